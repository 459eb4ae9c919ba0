//! Polynomial systems behind the over-specification exponents `r1` and
//! `r2`, with a numerical search for non-trivial solutions.
//!
//! Both systems have the shape `Σᵢ wᵢ² · Pₑ(blockᵢ) = 0` for each equation
//! index `e`, where `wᵢ` is a per-block weight that must stay away from
//! zero. Variables are laid out block by block:
//!
//! * `R1`: `(s1, s2, s3)` per block, `s3` being the weight;
//! * `R2` with `d = 1`: `(t1, t2, t3, t4, t5)` per block, `t5` being the
//!   weight.
//!
//! A search that finds nothing only means nothing was found; it is not a
//! proof of insolvability.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::sampler::derive_seed;

/// Lower bound on the magnitude of each block weight during the search.
pub const MIN_BLOCK_WEIGHT: f64 = 0.1;
/// Residual norm below which a candidate counts as a solution.
pub const SOLUTION_TOL: f64 = 1e-8;
/// Gauss–Newton iterations per restart.
pub const ITERATIONS_PER_RESTART: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemKind {
    R1,
    R2,
}

impl std::str::FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r1" => Ok(SystemKind::R1),
            "r2" => Ok(SystemKind::R2),
            other => Err(Error::invalid("system", format!("expected r1 or r2, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemInstance {
    pub kind: SystemKind,
    pub m: usize,
    pub r: usize,
    /// Input dimension; only `1` is supported for `R2`, ignored for `R1`.
    pub d: usize,
}

/// One monomial `coef · Π xₖ^{powers[k]}` over a block's free variables.
#[derive(Clone, Debug)]
struct Monomial {
    coef: f64,
    powers: Vec<u32>,
}

fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

impl SystemInstance {
    pub fn r1(m: usize, r: usize) -> Self {
        SystemInstance { kind: SystemKind::R1, m, r, d: 1 }
    }

    pub fn r2(m: usize, r: usize) -> Self {
        SystemInstance { kind: SystemKind::R2, m, r, d: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("m", "need at least one block"));
        }
        if self.r == 0 {
            return Err(Error::invalid("r", "need r >= 1"));
        }
        if self.kind == SystemKind::R2 && self.d != 1 {
            return Err(Error::invalid("d", format!("only d = 1 is supported for r2, got {}", self.d)));
        }
        Ok(())
    }

    /// Free (non-weight) variables per block.
    fn free_vars(&self) -> usize {
        match self.kind {
            SystemKind::R1 => 2,
            SystemKind::R2 => 4,
        }
    }

    pub fn block_len(&self) -> usize {
        self.free_vars() + 1
    }

    pub fn num_vars(&self) -> usize {
        self.m * self.block_len()
    }

    /// Equation indices in residual order: `(ℓ, 0)` for `R1`, `(ℓ1, ℓ2)` by
    /// increasing total order and then `ℓ1` for `R2`.
    pub fn equation_indices(&self) -> Vec<(usize, usize)> {
        match self.kind {
            SystemKind::R1 => (1..=self.r).map(|l| (l, 0)).collect(),
            SystemKind::R2 => (1..=self.r).flat_map(|total| (0..=total).map(move |l1| (l1, total - l1))).collect(),
        }
    }

    fn equations(&self) -> Vec<Vec<Monomial>> {
        self.equation_indices()
            .into_iter()
            .map(|(a, b)| match self.kind {
                SystemKind::R1 => r1_equation(a as u32),
                SystemKind::R2 => r2_equation(a as u32, b as u32),
            })
            .collect()
    }

    /// Exponent weights under which every equation is homogeneous, and the
    /// free variable whose largest magnitude is normalized to one.
    fn scaling(&self) -> (Vec<f64>, usize) {
        match self.kind {
            SystemKind::R1 => (vec![1.0, 2.0], 0),
            SystemKind::R2 => (vec![0.0, 0.5, 0.5, 1.0], 3),
        }
    }
}

/// `Σ_{n1 + 2 n2 = ℓ} s1^{n1} s2^{n2} / (n1! n2!)`.
fn r1_equation(l: u32) -> Vec<Monomial> {
    (0..=l / 2)
        .map(|n2| {
            let n1 = l - 2 * n2;
            Monomial {
                coef: 1.0 / (factorial(n1) * factorial(n2)),
                powers: vec![n1, n2],
            }
        })
        .collect()
}

/// `Σ t1^{α1} t2^{α2} t3^{α3} t4^{α4} / (α1! α2! α3! α4!)` over
/// `α1 + α2 = ℓ1`, `α3 + 2 α4 = ℓ2 − α2`.
fn r2_equation(l1: u32, l2: u32) -> Vec<Monomial> {
    let mut out = Vec::new();
    for a2 in 0..=l1.min(l2) {
        let a1 = l1 - a2;
        let rest = l2 - a2;
        for a4 in 0..=rest / 2 {
            let a3 = rest - 2 * a4;
            out.push(Monomial {
                coef: 1.0 / (factorial(a1) * factorial(a2) * factorial(a3) * factorial(a4)),
                powers: vec![a1, a2, a3, a4],
            });
        }
    }
    out
}

fn eval_poly(poly: &[Monomial], x: &[f64]) -> f64 {
    poly.iter()
        .map(|mono| mono.coef * mono.powers.iter().zip(x).map(|(&p, &v)| v.powi(p as i32)).product::<f64>())
        .sum()
}

fn poly_grad(poly: &[Monomial], x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|g| *g = 0.0);
    for mono in poly {
        for k in 0..x.len() {
            let p = mono.powers[k];
            if p == 0 {
                continue;
            }
            let mut term = mono.coef * f64::from(p) * x[k].powi(p as i32 - 1);
            for (j, (&q, &v)) in mono.powers.iter().zip(x).enumerate() {
                if j != k {
                    term *= v.powi(q as i32);
                }
            }
            out[k] += term;
        }
    }
}

/// Residual vector, one entry per equation, at `vars` laid out block by
/// block.
pub fn residual(sys: &SystemInstance, vars: &[f64]) -> Result<Vec<f64>> {
    sys.validate()?;
    check_len("variables", sys.num_vars(), vars.len())?;
    Ok(residual_unchecked(sys, &sys.equations(), vars))
}

fn residual_unchecked(sys: &SystemInstance, equations: &[Vec<Monomial>], vars: &[f64]) -> Vec<f64> {
    let f = sys.free_vars();
    equations
        .iter()
        .map(|poly| {
            vars.chunks_exact(f + 1)
                .map(|block| block[f] * block[f] * eval_poly(poly, &block[..f]))
                .sum()
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// Non-trivial solution in the block layout, if one was found.
    pub solution: Option<Vec<f64>>,
    /// Smallest residual norm reached over all restarts.
    pub residual_norm: f64,
    pub restarts: usize,
}

impl SearchOutcome {
    pub fn found(&self) -> bool {
        self.solution.is_some()
    }
}

/// Searches for a non-trivial solution by damped Gauss–Newton from
/// `restarts` random starting points.
///
/// Block weights are parameterized as `0.1 + u²` and the normalized free
/// variable is rescaled to `max |·| = 1` after every step, so every
/// candidate is non-trivial by construction.
pub fn search_nontrivial(sys: &SystemInstance, restarts: usize, seed: u64) -> Result<SearchOutcome> {
    sys.validate()?;
    if restarts == 0 {
        return Err(Error::invalid("restarts", "need at least one restart"));
    }
    let equations = sys.equations();
    let best = (0..restarts)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64, 0x5059));
            let vars = single_search(sys, &equations, &mut rng);
            let res = norm(&residual_unchecked(sys, &equations, &vars));
            (res, k, vars)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("at least one restart");
    let (res, _, vars) = best;
    Ok(SearchOutcome {
        solution: (res < SOLUTION_TOL).then_some(vars),
        residual_norm: res,
        restarts,
    })
}

/// Unconstrained coordinates: the free variables of each block followed by
/// `u` with weight `0.1 + u²`.
fn to_vars(sys: &SystemInstance, theta: &[f64]) -> Vec<f64> {
    let f = sys.free_vars();
    let mut out = theta.to_vec();
    for block in out.chunks_exact_mut(f + 1) {
        block[f] = MIN_BLOCK_WEIGHT + block[f] * block[f];
    }
    out
}

/// Rescales along the homogeneity direction so the pivot variable has
/// largest magnitude one. Returns `false` if the pivot is identically zero.
fn normalize(sys: &SystemInstance, theta: &mut [f64]) -> bool {
    let f = sys.free_vars();
    let (weights, pivot) = sys.scaling();
    let largest = theta.chunks_exact(f + 1).map(|b| b[pivot].abs()).fold(0.0, f64::max);
    if !(largest > 1e-300) || !largest.is_finite() {
        return false;
    }
    let lambda = 1.0 / largest;
    for block in theta.chunks_exact_mut(f + 1) {
        for (v, w) in block[..f].iter_mut().zip(&weights) {
            *v *= lambda.powf(*w);
        }
    }
    true
}

fn jacobian(sys: &SystemInstance, equations: &[Vec<Monomial>], theta: &[f64]) -> DMatrix<f64> {
    let f = sys.free_vars();
    let mut jac = DMatrix::<f64>::zeros(equations.len(), theta.len());
    let mut grad = vec![0.0; f];
    for (e, poly) in equations.iter().enumerate() {
        for (b, block) in theta.chunks_exact(f + 1).enumerate() {
            let u = block[f];
            let w = MIN_BLOCK_WEIGHT + u * u;
            poly_grad(poly, &block[..f], &mut grad);
            let base = b * (f + 1);
            for k in 0..f {
                jac[(e, base + k)] = w * w * grad[k];
            }
            // d(w²)/du = 2w · 2u
            jac[(e, base + f)] = 4.0 * w * u * eval_poly(poly, &block[..f]);
        }
    }
    jac
}

fn single_search<R: Rng>(sys: &SystemInstance, equations: &[Vec<Monomial>], rng: &mut R) -> Vec<f64> {
    let dim = sys.num_vars();
    let mut theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    if !normalize(sys, &mut theta) {
        theta[sys.scaling().1] = 1.0;
    }
    let cost = |t: &[f64]| norm(&residual_unchecked(sys, equations, &to_vars(sys, t)));
    let mut current = cost(&theta);
    let mut lambda = 1e-3;
    for _ in 0..ITERATIONS_PER_RESTART {
        if current < 1e-14 {
            break;
        }
        let res = DVector::from_vec(residual_unchecked(sys, equations, &to_vars(sys, &theta)));
        let jac = jacobian(sys, equations, &theta);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let scale = (0..dim).map(|a| jtj[(a, a)]).fold(0.0, f64::max).max(1e-300);
        let mut moved = false;
        for _ in 0..15 {
            let mut m = jtj.clone();
            for a in 0..dim {
                m[(a, a)] += lambda * (jtj[(a, a)] + 1e-9 * scale);
            }
            if let Some(chol) = m.cholesky() {
                let step = chol.solve(&jtr);
                let mut cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t - s).collect();
                if normalize(sys, &mut cand) {
                    let c = cost(&cand);
                    if c.is_finite() && c < current {
                        theta = cand;
                        current = c;
                        lambda = (lambda * 0.3).max(1e-15);
                        moved = true;
                        break;
                    }
                }
            }
            lambda *= 10.0;
        }
        if !moved {
            break;
        }
    }
    to_vars(sys, &theta)
}

/// Checks that `vars` satisfies the non-triviality conditions: every block
/// weight non-zero and at least one pivot variable non-zero.
pub fn is_nontrivial(sys: &SystemInstance, vars: &[f64]) -> Result<bool> {
    sys.validate()?;
    check_len("variables", sys.num_vars(), vars.len())?;
    let f = sys.free_vars();
    let pivot = sys.scaling().1;
    let blocks = || vars.chunks_exact(f + 1);
    Ok(blocks().all(|b| b[f] != 0.0) && blocks().any(|b| b[pivot] != 0.0))
}
