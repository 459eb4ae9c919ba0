//! Expert mean functions.
//!
//! Every family maps an input `x ∈ ℝᵈ` and a flat parameter vector to a
//! scalar mean. Parameter layouts:
//!
//! | family                  | layout               | dim   |
//! |-------------------------|----------------------|-------|
//! | `Linear`                | `(a ∈ ℝᵈ, b)`        | d + 1 |
//! | `GeluOuterInnerBias`    | `(a, w ∈ ℝᵈ, b)`     | d + 2 |
//! | `GeluOuterInner`        | `(a, w ∈ ℝᵈ)`        | d + 1 |
//!
//! with means `aᵀx + b`, `a·GELU(wᵀx + b)` and `a·GELU(wᵀx)` respectively.
//! GELU is the exact form `z·Φ(z)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `z·Φ(z)`.
pub fn gelu(z: f64) -> f64 {
    z * normal_cdf(z)
}

/// Returns `(GELU(z), GELU'(z), GELU''(z))`.
pub fn gelu_derivs(z: f64) -> (f64, f64, f64) {
    let cdf = normal_cdf(z);
    let pdf = normal_pdf(z);
    (z * cdf, cdf + z * pdf, pdf * (2.0 - z * z))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertFamily {
    Linear,
    GeluOuterInnerBias,
    GeluOuterInner,
}

impl ExpertFamily {
    pub fn param_dim(self, input_dim: usize) -> usize {
        match self {
            ExpertFamily::Linear | ExpertFamily::GeluOuterInner => input_dim + 1,
            ExpertFamily::GeluOuterInnerBias => input_dim + 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertFamily::Linear => "linear",
            ExpertFamily::GeluOuterInnerBias => "gelu_outer_inner_bias",
            ExpertFamily::GeluOuterInner => "gelu_outer_inner",
        }
    }

    fn check(self, params: &[f64], x: &[f64]) -> Result<()> {
        check_len("expert parameters", self.param_dim(x.len()), params.len())
    }

    /// Evaluates the expert mean `h(x, params)`.
    pub fn eval(self, params: &[f64], x: &[f64]) -> Result<f64> {
        self.check(params, x)?;
        Ok(self.eval_unchecked(params, x))
    }

    /// Gradient of [`ExpertFamily::eval`] with respect to `params`.
    pub fn grad(self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, x)?;
        let mut out = vec![0.0; params.len()];
        self.value_and_grad(params, x, &mut out);
        Ok(out)
    }

    /// Row-major `p × p` Hessian with respect to `params`.
    pub fn hessian(self, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(params, x)?;
        let p = params.len();
        let mut out = vec![0.0; p * p];
        self.hessian_into(params, x, &mut out);
        Ok(out)
    }

    pub(crate) fn eval_unchecked(self, params: &[f64], x: &[f64]) -> f64 {
        let d = x.len();
        match self {
            ExpertFamily::Linear => dot(&params[..d], x) + params[d],
            ExpertFamily::GeluOuterInnerBias => params[0] * gelu(dot(&params[1..=d], x) + params[d + 1]),
            ExpertFamily::GeluOuterInner => params[0] * gelu(dot(&params[1..=d], x)),
        }
    }

    /// Writes the gradient into `out` and returns the value.
    pub(crate) fn value_and_grad(self, params: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
        let d = x.len();
        match self {
            ExpertFamily::Linear => {
                out[..d].copy_from_slice(x);
                out[d] = 1.0;
                dot(&params[..d], x) + params[d]
            }
            ExpertFamily::GeluOuterInnerBias | ExpertFamily::GeluOuterInner => {
                let has_bias = self == ExpertFamily::GeluOuterInnerBias;
                let bias = if has_bias { params[d + 1] } else { 0.0 };
                let z = dot(&params[1..=d], x) + bias;
                let a = params[0];
                let cdf = normal_cdf(z);
                let g = z * cdf;
                let g1 = cdf + z * normal_pdf(z);
                out[0] = g;
                for (o, xi) in out[1..=d].iter_mut().zip(x) {
                    *o = a * g1 * xi;
                }
                if has_bias {
                    out[d + 1] = a * g1;
                }
                a * g
            }
        }
    }

    pub(crate) fn hessian_into(self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let p = params.len();
        out.iter_mut().for_each(|v| *v = 0.0);
        if self == ExpertFamily::Linear {
            return;
        }
        let has_bias = self == ExpertFamily::GeluOuterInnerBias;
        let bias = if has_bias { params[d + 1] } else { 0.0 };
        let z = dot(&params[1..=d], x) + bias;
        let a = params[0];
        let (_, g1, g2) = gelu_derivs(z);
        // Inner-argument gradient: dz/dθ is x for the weight block, 1 for the bias.
        let mut dz = vec![0.0; p];
        dz[1..=d].copy_from_slice(x);
        if has_bias {
            dz[d + 1] = 1.0;
        }
        for i in 1..p {
            out[i] = g1 * dz[i];
            out[i * p] = g1 * dz[i];
            for j in 1..p {
                out[i * p + j] = a * g2 * dz[i] * dz[j];
            }
        }
    }
}

impl fmt::Display for ExpertFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExpertFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ExpertFamily::Linear),
            "gelu_outer_inner_bias" | "gelu-bias" | "gelu_ffn" => Ok(ExpertFamily::GeluOuterInnerBias),
            "gelu_outer_inner" | "gelu" => Ok(ExpertFamily::GeluOuterInner),
            other => Err(Error::invalid(
                "family",
                format!("unknown expert family `{other}` (linear, gelu_outer_inner_bias, gelu_outer_inner)"),
            )),
        }
    }
}

/// A parameterized mean function with first and second parameter derivatives.
///
/// Implemented by [`ExpertFamily`]; identifiability probes accept any
/// implementation so that ad-hoc families (e.g. input-free experts) can be
/// examined too.
pub trait ExpertFunction {
    fn param_dim(&self, input_dim: usize) -> usize;
    fn value(&self, params: &[f64], x: &[f64]) -> f64;
    fn gradient(&self, params: &[f64], x: &[f64], out: &mut [f64]);
    fn hessian(&self, params: &[f64], x: &[f64], out: &mut [f64]);
}

impl ExpertFunction for ExpertFamily {
    fn param_dim(&self, input_dim: usize) -> usize {
        ExpertFamily::param_dim(*self, input_dim)
    }

    fn value(&self, params: &[f64], x: &[f64]) -> f64 {
        self.eval_unchecked(params, x)
    }

    fn gradient(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        self.value_and_grad(params, x, out);
    }

    fn hessian(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        self.hessian_into(params, x, out);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| u * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_diff(family: ExpertFamily, params: &[f64], x: &[f64], h: f64) -> Vec<f64> {
        (0..params.len())
            .map(|k| {
                let mut up = params.to_vec();
                let mut dn = params.to_vec();
                up[k] += h;
                dn[k] -= h;
                (family.eval(&up, x).unwrap() - family.eval(&dn, x).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn linear_eval() {
        assert_eq!(ExpertFamily::Linear.eval(&[8.0, 2.0], &[1.0]).unwrap(), 10.0);
    }

    #[test]
    fn gelu_inner_at_zero() {
        assert_eq!(ExpertFamily::GeluOuterInner.eval(&[4.0, 12.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn gelu_inner_saturated() {
        // Φ(12) = 1 - 1.78e-33, which rounds to 1 in double precision.
        let v = ExpertFamily::GeluOuterInner.eval(&[4.0, 12.0], &[1.0]).unwrap();
        assert_eq!(normal_cdf(12.0), 1.0);
        assert!((v - 48.0).abs() < 1e-12);
    }

    #[test]
    fn cdf_reference_values() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
        assert!((normal_cdf(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
        assert!((normal_cdf(-2.0) - 0.022_750_131_948_179_2).abs() < 1e-16);
    }

    #[test]
    fn linear_grad_is_input_and_one() {
        let g = ExpertFamily::Linear.grad(&[3.0, -1.0], &[0.7]).unwrap();
        assert_eq!(g, vec![0.7, 1.0]);
    }

    #[test]
    fn gelu_outer_grad_at_zero_argument() {
        let g = ExpertFamily::GeluOuterInner.grad(&[4.0, 12.0], &[0.0]).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn gelu_bias_grad_matches_fd_at_shared_truth() {
        let params = [-8.0, 6.0, 0.0];
        let x = [0.3];
        let g = ExpertFamily::GeluOuterInnerBias.grad(&params, &x).unwrap();
        let fd = central_diff(ExpertFamily::GeluOuterInnerBias, &params, &x, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        assert!(matches!(
            ExpertFamily::GeluOuterInnerBias.eval(&[1.0, 2.0], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(ExpertFamily::Linear.grad(&[1.0, 2.0, 3.0], &[0.0]).is_err());
    }

    #[test]
    fn family_names_round_trip() {
        for f in [ExpertFamily::Linear, ExpertFamily::GeluOuterInnerBias, ExpertFamily::GeluOuterInner] {
            assert_eq!(f.name().parse::<ExpertFamily>().unwrap(), f);
        }
        assert!("relu".parse::<ExpertFamily>().is_err());
    }

    fn family_strategy() -> impl Strategy<Value = ExpertFamily> {
        prop_oneof![
            Just(ExpertFamily::Linear),
            Just(ExpertFamily::GeluOuterInnerBias),
            Just(ExpertFamily::GeluOuterInner),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn grad_matches_central_difference(
            family in family_strategy(),
            raw in prop::collection::vec(-3.0f64..3.0, 4),
            x in prop::collection::vec(-3.0f64..3.0, 2),
        ) {
            let params = &raw[..family.param_dim(2)];
            let g = family.grad(params, &x).unwrap();
            let fd = central_diff(family, params, &x, 1e-5);
            let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() <= 1e-5 * scale, "{} vs {}", a, b);
            }
        }

        #[test]
        fn hessian_matches_gradient_difference(
            family in family_strategy(),
            raw in prop::collection::vec(-2.0f64..2.0, 4),
            x in prop::collection::vec(-2.0f64..2.0, 2),
        ) {
            let params = &raw[..family.param_dim(2)];
            let p = params.len();
            let hess = family.hessian(params, &x).unwrap();
            let h = 1e-5;
            for k in 0..p {
                let mut up = params.to_vec();
                let mut dn = params.to_vec();
                up[k] += h;
                dn[k] -= h;
                let gu = family.grad(&up, &x).unwrap();
                let gd = family.grad(&dn, &x).unwrap();
                for j in 0..p {
                    let fd = (gu[j] - gd[j]) / (2.0 * h);
                    prop_assert!((hess[j * p + k] - fd).abs() <= 1e-5 * (1.0 + fd.abs()));
                }
            }
        }
    }
}
