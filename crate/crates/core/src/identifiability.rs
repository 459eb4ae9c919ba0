//! Numerical checks of strong and weak identifiability of expert families.
//!
//! Each derivative function set is sampled on a deterministic grid, every
//! function is scaled to unit norm, and the Gram matrix (inner product =
//! grid average) is decomposed; a minimum singular value near zero relative
//! to the largest signals a linear dependence. An identically zero function
//! makes its set dependent and scores 0. Sets are scored atom by atom: functions belonging to
//! different atoms are separated in the density by their distinct
//! parameters, so a dependence is only meaningful within one atom's block.
//!
//! The scores are heuristic certificates, not proofs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::expert::ExpertFunction;

/// Relative minimum singular value above which a block passes.
pub const PASS_THRESHOLD: f64 = 1e-3;
/// Parameters closer than this are treated as duplicates.
pub const DUPLICATE_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramScore {
    pub min_singular_value: f64,
    pub max_singular_value: f64,
    pub gram_dim: usize,
    /// Which block produced this score, e.g. `"routed[1] derivatives"`.
    pub block: String,
}

impl GramScore {
    pub fn relative(&self) -> f64 {
        if self.max_singular_value > 0.0 {
            self.min_singular_value / self.max_singular_value
        } else {
            0.0
        }
    }

    pub fn passes(&self) -> bool {
        self.relative() > PASS_THRESHOLD
    }
}

/// `points` evenly spaced values on `[low, high]`, endpoints included, as
/// one-dimensional inputs.
pub fn uniform_grid(points: usize, low: f64, high: f64) -> Vec<Vec<f64>> {
    match points {
        0 => Vec::new(),
        1 => vec![vec![0.5 * (low + high)]],
        _ => (0..points).map(|i| vec![low + (high - low) * i as f64 / (points - 1) as f64]).collect(),
    }
}

/// Scores the three function sets of strong identifiability and returns
/// the worst block.
pub fn strong_identifiability_score(
    shared_family: &dyn ExpertFunction,
    routed_family: &dyn ExpertFunction,
    shared_params: &[Vec<f64>],
    routed_params: &[Vec<f64>],
    grid: &[Vec<f64>],
) -> Result<GramScore> {
    let d = check_grid(grid)?;
    check_params("shared", shared_family, shared_params, d)?;
    check_params("routed", routed_family, routed_params, d)?;
    let mut scores = Vec::new();
    for (i, p) in shared_params.iter().enumerate() {
        scores.push(gram_score(format!("shared[{i}] derivatives"), &derivative_columns(shared_family, p, grid))?);
        scores.push(gram_score(format!("shared[{i}] products"), &product_columns(shared_family, p, grid))?);
    }
    for (j, p) in routed_params.iter().enumerate() {
        scores.push(gram_score(format!("routed[{j}] second order"), &routed_strong_columns(routed_family, p, grid))?);
    }
    Ok(worst(scores))
}

/// Scores the first-derivative set of weak identifiability and returns the
/// worst block.
pub fn weak_identifiability_score(routed_family: &dyn ExpertFunction, routed_params: &[Vec<f64>], grid: &[Vec<f64>]) -> Result<GramScore> {
    let d = check_grid(grid)?;
    check_params("routed", routed_family, routed_params, d)?;
    let scores = routed_params
        .iter()
        .enumerate()
        .map(|(j, p)| gram_score(format!("routed[{j}] derivatives"), &derivative_columns(routed_family, p, grid)))
        .collect::<Result<Vec<_>>>()?;
    Ok(worst(scores))
}

fn worst(scores: Vec<GramScore>) -> GramScore {
    scores
        .into_iter()
        .min_by(|a, b| a.relative().total_cmp(&b.relative()))
        .expect("at least one block")
}

fn check_grid(grid: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = grid.first() else {
        return Err(Error::invalid("grid", "grid is empty"));
    };
    let d = first.len();
    if d == 0 {
        return Err(Error::invalid("grid", "grid points must have at least one coordinate"));
    }
    for x in grid {
        check_len("grid point", d, x.len())?;
    }
    Ok(d)
}

fn check_params(which: &'static str, family: &dyn ExpertFunction, params: &[Vec<f64>], d: usize) -> Result<()> {
    if params.is_empty() {
        return Err(Error::invalid(which, "need at least one parameter vector"));
    }
    let p = family.param_dim(d);
    for v in params {
        check_len(which, p, v.len())?;
    }
    for (i, a) in params.iter().enumerate() {
        for b in &params[i + 1..] {
            let dist = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            if dist <= DUPLICATE_TOL {
                return Err(Error::invalid(which, format!("parameters must be distinct, got {a:?} twice")));
            }
        }
    }
    Ok(())
}

/// `{∂h/∂θ_u}`.
fn derivative_columns(family: &dyn ExpertFunction, params: &[f64], grid: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = params.len();
    let mut g = vec![0.0; p];
    let mut cols = vec![Vec::with_capacity(grid.len()); p];
    for x in grid {
        family.gradient(params, x, &mut g);
        for (c, v) in cols.iter_mut().zip(&g) {
            c.push(*v);
        }
    }
    cols
}

/// `{∂h/∂θ_u · ∂h/∂θ_v : u ≤ v} ∪ {1}`.
fn product_columns(family: &dyn ExpertFunction, params: &[f64], grid: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let first = derivative_columns(family, params, grid);
    let p = params.len();
    let mut cols = Vec::new();
    for u in 0..p {
        for v in u..p {
            cols.push(first[u].iter().zip(&first[v]).map(|(a, b)| a * b).collect());
        }
    }
    cols.push(vec![1.0; grid.len()]);
    cols
}

/// `{∂h/∂θ_u, ∂²h/∂θ_u∂θ_v (u ≤ v), x_w · ∂h/∂θ_v}`.
fn routed_strong_columns(family: &dyn ExpertFunction, params: &[f64], grid: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = params.len();
    let d = grid[0].len();
    let first = derivative_columns(family, params, grid);
    let mut hess = vec![0.0; p * p];
    let mut second = vec![Vec::with_capacity(grid.len()); p * (p + 1) / 2];
    for x in grid {
        family.hessian(params, x, &mut hess);
        let mut k = 0;
        for u in 0..p {
            for v in u..p {
                second[k].push(hess[u * p + v]);
                k += 1;
            }
        }
    }
    let mut cols = first.clone();
    cols.extend(second);
    for w in 0..d {
        for f in &first {
            cols.push(grid.iter().zip(f).map(|(x, v)| x[w] * v).collect());
        }
    }
    cols
}

fn gram_score(block: String, cols: &[Vec<f64>]) -> Result<GramScore> {
    let m = cols.len();
    let g = cols[0].len();
    if g < 4 * m {
        return Err(Error::invalid("grid", format!("need at least {} grid points for {block}, got {g}", 4 * m)));
    }
    let norms: Vec<f64> = cols.iter().map(|c| (c.iter().map(|v| v * v).sum::<f64>() / g as f64).sqrt()).collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Ok(GramScore {
            min_singular_value: 0.0,
            max_singular_value: norms.iter().copied().fold(0.0, f64::max).max(1.0),
            gram_dim: m,
            block,
        });
    }
    let mut gram = DMatrix::<f64>::zeros(m, m);
    for a in 0..m {
        for b in 0..=a {
            let v = cols[a].iter().zip(&cols[b]).map(|(x, y)| x * y).sum::<f64>() / (g as f64 * norms[a] * norms[b]);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let sv = gram.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    let min = sv.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(GramScore {
        min_singular_value: min,
        max_singular_value: max,
        gram_dim: m,
        block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::ExpertFamily;

    /// Input-free expert `h(x, η) = η0 + η1²`.
    struct InputFree;

    impl ExpertFunction for InputFree {
        fn param_dim(&self, _input_dim: usize) -> usize {
            2
        }
        fn value(&self, params: &[f64], _x: &[f64]) -> f64 {
            params[0] + params[1] * params[1]
        }
        fn gradient(&self, params: &[f64], _x: &[f64], out: &mut [f64]) {
            out[0] = 1.0;
            out[1] = 2.0 * params[1];
        }
        fn hessian(&self, _params: &[f64], _x: &[f64], out: &mut [f64]) {
            out.copy_from_slice(&[0.0, 0.0, 0.0, 2.0]);
        }
    }

    fn grid() -> Vec<Vec<f64>> {
        uniform_grid(512, -3.0, 3.0)
    }

    #[test]
    fn linear_fails_strong() {
        let s = strong_identifiability_score(
            &ExpertFamily::Linear,
            &ExpertFamily::Linear,
            &[vec![2.0, 0.0], vec![1.0, 1.0]],
            &[vec![8.0, 2.0], vec![-6.0, 1.0]],
            &grid(),
        )
        .unwrap();
        assert!(s.relative() < 1e-10, "{s:?}");
    }

    #[test]
    fn linear_passes_weak() {
        let s = weak_identifiability_score(&ExpertFamily::Linear, &[vec![8.0, 2.0], vec![-6.0, 1.0]], &grid()).unwrap();
        assert!(s.passes(), "{s:?}");
    }

    #[test]
    fn gelu_passes_weak_at_moderate_slopes() {
        let s = weak_identifiability_score(&ExpertFamily::GeluOuterInner, &[vec![4.0, -1.0], vec![4.0, 1.5]], &grid()).unwrap();
        assert!(s.passes(), "{s:?}");
    }

    #[test]
    fn steep_gelu_is_nearly_collinear() {
        // With |w| = 12 both GELU(w x) and x GELU'(w x) are close to multiples
        // of relu(±x) away from a narrow band around 0.
        let s = weak_identifiability_score(&ExpertFamily::GeluOuterInner, &[vec![4.0, -12.0], vec![4.0, 12.0]], &grid()).unwrap();
        assert!(s.relative() > 1e-7 && s.relative() < PASS_THRESHOLD, "{s:?}");
    }

    #[test]
    fn single_shared_gelu_blocks_have_full_rank() {
        let g = grid();
        let fam = ExpertFamily::GeluOuterInnerBias;
        for p in [[-8.0, 1.0, 0.0], [2.0, -0.7, 0.3]] {
            let s = gram_score("d".into(), &derivative_columns(&fam, &p, &g)).unwrap();
            assert!(s.passes(), "{s:?}");
            let s = gram_score("p".into(), &product_columns(&fam, &p, &g)).unwrap();
            assert!(s.relative() > 1e-9, "{s:?}");
        }
    }

    #[test]
    fn gelu_second_order_block_is_degenerate() {
        // ∂²h/∂a² vanishes and ∂²h/∂a∂w = (∂h/∂w) / a for h = a·GELU(w x).
        let cols = routed_strong_columns(&ExpertFamily::GeluOuterInner, &[4.0, 12.0], &grid());
        assert!(cols[2].iter().all(|&v| v == 0.0));
        for (c, f) in cols[3].iter().zip(&cols[1]) {
            assert!((4.0 * c - f).abs() < 1e-12);
        }
    }

    #[test]
    fn input_free_family_fails_weak() {
        let s = weak_identifiability_score(&InputFree, &[vec![0.5, 1.0], vec![2.0, -1.0]], &grid()).unwrap();
        assert!(s.relative() < 1e-12, "{s:?}");
    }

    #[test]
    fn grid_density_does_not_matter_much() {
        let coarse = weak_identifiability_score(&ExpertFamily::Linear, &[vec![8.0, 2.0]], &uniform_grid(512, -3.0, 3.0)).unwrap();
        let fine = weak_identifiability_score(&ExpertFamily::Linear, &[vec![8.0, 2.0]], &uniform_grid(1023, -3.0, 3.0)).unwrap();
        // Both grids contain the same endpoints; the averages are quadrature
        // rules for the same integrals.
        assert!((coarse.relative() - fine.relative()).abs() < 1e-2 * fine.relative());
    }

    #[test]
    fn duplicates_and_small_grids_are_rejected() {
        assert!(weak_identifiability_score(&ExpertFamily::Linear, &[vec![1.0, 2.0], vec![1.0, 2.0]], &grid()).is_err());
        assert!(weak_identifiability_score(&ExpertFamily::Linear, &[vec![1.0, 2.0]], &uniform_grid(7, -3.0, 3.0)).is_err());
        assert!(weak_identifiability_score(&ExpertFamily::Linear, &[vec![1.0]], &grid()).is_err());
        assert!(weak_identifiability_score(&ExpertFamily::Linear, &[vec![1.0, 2.0]], &[]).is_err());
    }
}
