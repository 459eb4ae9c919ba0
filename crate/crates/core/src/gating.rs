//! Routed-expert gating: dense softmax, normalized sigmoid, and Top-K masked softmax.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::expert::dot;
use crate::model::RoutedAtom;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GatingRepr", into = "GatingRepr")]
pub enum GatingKind {
    SoftmaxDense,
    NormalizedSigmoid,
    SoftmaxTopK { k: usize },
}

impl GatingKind {
    /// Whether the gate is unchanged by adding a common offset to every
    /// routed atom's `(β0, β1)`.
    pub fn is_translation_invariant(self) -> bool {
        !matches!(self, GatingKind::NormalizedSigmoid)
    }

    pub(crate) fn validate(self, num_routed: usize) -> Result<()> {
        if let GatingKind::SoftmaxTopK { k } = self {
            if k == 0 || k > num_routed {
                return Err(Error::invalid(
                    "gating",
                    format!("Top-K requires 1 <= K <= {num_routed}, got K = {k}"),
                ));
            }
        }
        Ok(())
    }
}

impl fmt::Display for GatingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GatingKind::SoftmaxDense => f.write_str("softmax"),
            GatingKind::NormalizedSigmoid => f.write_str("sigmoid"),
            GatingKind::SoftmaxTopK { k } => write!(f, "topk:{k}"),
        }
    }
}

impl FromStr for GatingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(GatingKind::SoftmaxDense),
            "sigmoid" => Ok(GatingKind::NormalizedSigmoid),
            _ => {
                let k = s
                    .strip_prefix("topk:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| {
                        Error::invalid("gating", format!("expected softmax|sigmoid|topk:<K>, got `{s}`"))
                    })?;
                Ok(GatingKind::SoftmaxTopK { k })
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GatingRepr {
    kind: String,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
}

impl TryFrom<GatingRepr> for GatingKind {
    type Error = Error;

    fn try_from(r: GatingRepr) -> Result<Self> {
        match (r.kind.as_str(), r.k) {
            ("softmax", _) => Ok(GatingKind::SoftmaxDense),
            ("sigmoid", _) => Ok(GatingKind::NormalizedSigmoid),
            ("topk", Some(k)) if k >= 1 => Ok(GatingKind::SoftmaxTopK { k }),
            ("topk", _) => Err(Error::invalid("gating", "topk gating needs a positive `K`")),
            (other, _) => Err(Error::invalid("gating", format!("unknown gating kind `{other}`"))),
        }
    }
}

impl From<GatingKind> for GatingRepr {
    fn from(g: GatingKind) -> Self {
        match g {
            GatingKind::SoftmaxDense => GatingRepr { kind: "softmax".into(), k: None },
            GatingKind::NormalizedSigmoid => GatingRepr { kind: "sigmoid".into(), k: None },
            GatingKind::SoftmaxTopK { k } => GatingRepr { kind: "topk".into(), k: Some(k) },
        }
    }
}

/// `log σ(z)` without overflow.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// Logistic sigmoid, evaluated on the branch that avoids `exp` overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Indices of the `k` largest entries of `scores`; ties go to the lower index.
pub(crate) fn top_k_mask(scores: &[f64], k: usize, mask: &mut [bool]) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    mask.iter_mut().for_each(|m| *m = false);
    for &i in order.iter().take(k) {
        mask[i] = true;
    }
}

/// Log gate weights written into `out`; masked-out atoms get `-inf`.
///
/// This is the hot path used by the density and EM code; `routed` must be
/// non-empty and dimension-consistent with `x`.
pub(crate) fn log_gate_weights_into(gating: GatingKind, routed: &[RoutedAtom], x: &[f64], out: &mut [f64]) {
    match gating {
        GatingKind::SoftmaxDense => {
            for (o, a) in out.iter_mut().zip(routed) {
                *o = dot(&a.gate_vector, x) + a.gate_bias;
            }
        }
        GatingKind::NormalizedSigmoid => {
            for (o, a) in out.iter_mut().zip(routed) {
                *o = log_sigmoid(dot(&a.gate_vector, x) + a.gate_bias);
            }
        }
        GatingKind::SoftmaxTopK { k } => {
            let scores: Vec<f64> = routed.iter().map(|a| dot(&a.gate_vector, x)).collect();
            let mut mask = vec![false; routed.len()];
            top_k_mask(&scores, k, &mut mask);
            for ((o, a), (&keep, s)) in out.iter_mut().zip(routed).zip(mask.iter().zip(&scores)) {
                *o = if keep { s + a.gate_bias } else { f64::NEG_INFINITY };
            }
        }
    }
    let lse = log_sum_exp(out);
    out.iter_mut().for_each(|v| *v -= lse);
}

/// Gate probabilities for the routed atoms at input `x`.
pub fn gate_weights(gating: GatingKind, routed: &[RoutedAtom], x: &[f64]) -> Result<Vec<f64>> {
    if routed.is_empty() {
        return Err(Error::invalid("routed", "at least one routed atom is required"));
    }
    gating.validate(routed.len())?;
    for a in routed {
        check_len("gate vector", x.len(), a.gate_vector.len())?;
    }
    let mut out = vec![0.0; routed.len()];
    log_gate_weights_into(gating, routed, x, &mut out);
    Ok(out.into_iter().map(f64::exp).collect())
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
