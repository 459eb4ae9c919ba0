//! Model parameterization and conditional density evaluation.
//!
//! The conditional density of `y` given `x` is
//!
//! ```text
//! f(y|x) = ½ Σᵢ ωᵢ N(y; h₁(x, κᵢ), τᵢ) + ½ Σᵢ gateᵢ(x) N(y; h₂(x, ηᵢ), νᵢ)
//! ```
//!
//! where the first sum runs over the shared atoms and the second over the
//! routed atoms. The branch probabilities are fixed at one half each.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::expert::ExpertFamily;
use crate::gating::{log_gate_weights_into, log_sum_exp, GatingKind};

/// Lower bound applied to every variance parameter.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedAtom {
    #[serde(rename = "omega")]
    pub weight: f64,
    #[serde(rename = "kappa")]
    pub expert_params: Vec<f64>,
    #[serde(rename = "tau")]
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutedAtom {
    #[serde(rename = "beta0")]
    pub gate_bias: f64,
    #[serde(rename = "beta1")]
    pub gate_vector: Vec<f64>,
    #[serde(rename = "eta")]
    pub expert_params: Vec<f64>,
    #[serde(rename = "nu")]
    pub variance: f64,
}

/// Full parameterization `(G1, G2)`: shared atoms, routed atoms, and the
/// structural choices (gate, expert families, input dimension).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingMeasurePair {
    pub input_dim: usize,
    pub gating: GatingKind,
    pub shared_family: ExpertFamily,
    pub routed_family: ExpertFamily,
    pub shared: Vec<SharedAtom>,
    pub routed: Vec<RoutedAtom>,
}

impl MixingMeasurePair {
    pub fn new(
        input_dim: usize,
        gating: GatingKind,
        shared_family: ExpertFamily,
        routed_family: ExpertFamily,
        shared: Vec<SharedAtom>,
        routed: Vec<RoutedAtom>,
    ) -> Result<Self> {
        let model = MixingMeasurePair {
            input_dim,
            gating,
            shared_family,
            routed_family,
            shared,
            routed,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim;
        if d == 0 {
            return Err(Error::invalid("input_dim", "must be positive"));
        }
        if self.shared.is_empty() || self.routed.is_empty() {
            return Err(Error::invalid("atoms", "need at least one shared and one routed atom"));
        }
        self.gating.validate(self.routed.len())?;
        let p1 = self.shared_family.param_dim(d);
        let p2 = self.routed_family.param_dim(d);
        let mut total = 0.0;
        for a in &self.shared {
            check_len("shared expert parameters", p1, a.expert_params.len())?;
            if !(a.weight >= 0.0 && a.weight.is_finite()) {
                return Err(Error::invalid("omega", format!("weight {} is not a finite non-negative number", a.weight)));
            }
            check_variance("tau", a.variance)?;
            check_finite("kappa", &a.expert_params)?;
            total += a.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid("omega", format!("shared weights sum to {total}, expected 1")));
        }
        for a in &self.routed {
            check_len("routed expert parameters", p2, a.expert_params.len())?;
            check_len("gate vector", d, a.gate_vector.len())?;
            check_variance("nu", a.variance)?;
            check_finite("beta1", &a.gate_vector)?;
            check_finite("eta", &a.expert_params)?;
            if !a.gate_bias.is_finite() {
                return Err(Error::invalid("beta0", "gate bias must be finite"));
            }
        }
        Ok(())
    }

    pub fn num_components(&self) -> usize {
        self.shared.len() + self.routed.len()
    }

    /// Routed gate probabilities at `x`.
    pub fn gate_weights(&self, x: &[f64]) -> Result<Vec<f64>> {
        crate::gating::gate_weights(self.gating, &self.routed, x)
    }

    /// Writes `log(prior_c(x)) + log N(y; mean_c(x), var_c)` for every
    /// component (shared first, then routed) into `out`.
    pub(crate) fn component_log_terms(&self, x: &[f64], y: f64, out: &mut [f64]) {
        let k1 = self.shared.len();
        let (shared_out, routed_out) = out.split_at_mut(k1);
        log_gate_weights_into(self.gating, &self.routed, x, routed_out);
        for (o, a) in shared_out.iter_mut().zip(&self.shared) {
            let mean = self.shared_family.eval_unchecked(&a.expert_params, x);
            *o = (0.5 * a.weight).ln() + log_normal(y, mean, a.variance);
        }
        for (o, a) in routed_out.iter_mut().zip(&self.routed) {
            if *o == f64::NEG_INFINITY {
                continue;
            }
            let mean = self.routed_family.eval_unchecked(&a.expert_params, x);
            *o += 0.5f64.ln() + log_normal(y, mean, a.variance);
        }
    }

    pub(crate) fn log_density_unchecked(&self, x: &[f64], y: f64, scratch: &mut [f64]) -> f64 {
        self.component_log_terms(x, y, scratch);
        log_sum_exp(scratch)
    }

    /// `log f(y|x)`.
    pub fn log_conditional_density(&self, x: &[f64], y: f64) -> Result<f64> {
        check_len("input", self.input_dim, x.len())?;
        let mut scratch = vec![0.0; self.num_components()];
        Ok(self.log_density_unchecked(x, y, &mut scratch))
    }

    /// `f(y|x)`.
    pub fn conditional_density(&self, x: &[f64], y: f64) -> Result<f64> {
        self.log_conditional_density(x, y).map(f64::exp)
    }

    /// Conditional mean `E[Y | x]`.
    pub fn conditional_mean(&self, x: &[f64]) -> Result<f64> {
        Ok(self.conditional_moments(x)?.0)
    }

    /// `(E[Y|x], E[Y²|x])`.
    pub fn conditional_moments(&self, x: &[f64]) -> Result<(f64, f64)> {
        check_len("input", self.input_dim, x.len())?;
        let gates = self.gate_weights(x)?;
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for a in &self.shared {
            let mu = self.shared_family.eval_unchecked(&a.expert_params, x);
            m1 += 0.5 * a.weight * mu;
            m2 += 0.5 * a.weight * (mu * mu + a.variance);
        }
        for (a, g) in self.routed.iter().zip(&gates) {
            let mu = self.routed_family.eval_unchecked(&a.expert_params, x);
            m1 += 0.5 * g * mu;
            m2 += 0.5 * g * (mu * mu + a.variance);
        }
        Ok((m1, m2))
    }

    /// Mean log conditional density over `data`.
    pub fn log_likelihood(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("data", "log-likelihood of an empty dataset"));
        }
        check_len("dataset input dimension", self.input_dim, data.input_dim())?;
        Ok(self.log_likelihood_unchecked(data))
    }

    pub(crate) fn log_likelihood_unchecked(&self, data: &Dataset) -> f64 {
        let mut scratch = vec![0.0; self.num_components()];
        let total: f64 = (0..data.len())
            .map(|i| self.log_density_unchecked(data.x(i), data.y(i), &mut scratch))
            .sum();
        total / data.len() as f64
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let model: MixingMeasurePair = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()? + "\n").map_err(|e| Error::io(path, e))
    }
}

fn check_variance(arg: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v >= VARIANCE_FLOOR {
        Ok(())
    } else {
        Err(Error::invalid(arg, format!("variance {v} is below the floor {VARIANCE_FLOOR}")))
    }
}

fn check_finite(arg: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(arg, "non-finite parameter"))
    }
}

/// Log of the Gaussian density with the given mean and variance.
pub fn log_normal(y: f64, mean: f64, variance: f64) -> f64 {
    let r = y - mean;
    -0.5 * ((2.0 * PI * variance).ln() + r * r / variance)
}

/// Paired inputs and scalar outputs; inputs are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    inputs: Vec<f64>,
    outputs: Vec<f64>,
}

impl Dataset {
    pub fn new(input_dim: usize, inputs: Vec<f64>, outputs: Vec<f64>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be positive"));
        }
        check_len("input matrix entries", outputs.len() * input_dim, inputs.len())?;
        if !inputs.iter().chain(&outputs).all(|v| v.is_finite()) {
            return Err(Error::invalid("data", "all entries must be finite"));
        }
        Ok(Dataset {
            input_dim,
            inputs,
            outputs,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn y(&self, i: usize) -> f64 {
        self.outputs[i]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    /// Writes `x_0,…,x_{d-1},y` rows with 17 significant digits.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.input_dim).map(|j| format!("x_{j}")).collect();
        header.push("y".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let row: Vec<String> = self
                .x(i)
                .iter()
                .chain(std::iter::once(&self.outputs[i]))
                .map(|v| format!("{v:.16e}"))
                .collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let cols = header.len();
        let well_formed = cols >= 2
            && header.get(cols - 1) == Some("y")
            && (0..cols - 1).all(|j| header.get(j) == Some(format!("x_{j}").as_str()));
        if !well_formed {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                reason: "expected header x_0,...,x_{d-1},y".into(),
            });
        }
        let d = cols - 1;
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = row + 2;
            if rec.len() != cols {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    reason: format!("expected {cols} fields, found {}", rec.len()),
                });
            }
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                    path: path.into(),
                    line,
                    reason: format!("invalid number `{field}`"),
                })?;
                if j < d {
                    inputs.push(v);
                } else {
                    outputs.push(v);
                }
            }
        }
        Dataset::new(d, inputs, outputs)
    }
}
