//! Voronoi cells around true atoms and the Voronoi losses built on them.
//!
//! Each fitted atom is attached to its nearest true atom: shared atoms by
//! Euclidean distance on `(κ, τ)`, routed atoms on `(β1, η, ν)` (the gate
//! bias is excluded). Losses then compare cell masses with true masses and
//! fitted parameters with their cell centre, using first-order terms for
//! singleton cells and higher powers for over-specified cells.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::expert::ExpertFamily;
use crate::gating::{sigmoid, GatingKind};
use crate::model::{MixingMeasurePair, RoutedAtom, SharedAtom};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoronoiAssignment {
    /// `shared_cells[j]` lists the fitted shared atoms nearest to true shared atom `j`.
    pub shared_cells: Vec<Vec<usize>>,
    /// `routed_cells[j]` lists the fitted routed atoms nearest to true routed atom `j`.
    pub routed_cells: Vec<Vec<usize>>,
}

impl VoronoiAssignment {
    fn validate(&self, fitted: &MixingMeasurePair, truth_shared: usize, truth_routed: usize) -> Result<()> {
        check_len("shared cells", truth_shared, self.shared_cells.len())?;
        check_len("routed cells", truth_routed, self.routed_cells.len())?;
        check_partition("shared cells", &self.shared_cells, fitted.shared.len())?;
        check_partition("routed cells", &self.routed_cells, fitted.routed.len())
    }
}

fn check_partition(what: &'static str, cells: &[Vec<usize>], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in cells.iter().flatten() {
        if i >= n || seen[i] {
            return Err(Error::invalid("assignment", format!("{what} do not partition the {n} fitted atoms")));
        }
        seen[i] = true;
    }
    if seen.iter().all(|&s| s) {
        Ok(())
    } else {
        Err(Error::invalid("assignment", format!("{what} do not cover all {n} fitted atoms")))
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn norm(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

fn shared_key(a: &SharedAtom) -> Vec<f64> {
    let mut v = a.expert_params.clone();
    v.push(a.variance);
    v
}

fn routed_key(a: &RoutedAtom) -> Vec<f64> {
    let mut v = a.gate_vector.clone();
    v.extend_from_slice(&a.expert_params);
    v.push(a.variance);
    v
}

/// Index of the nearest centre; ties go to the lowest index.
fn nearest(point: &[f64], centres: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centres.iter().enumerate() {
        let d = dist2(point, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn cells_for(points: Vec<Vec<f64>>, centres: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut cells = vec![Vec::new(); centres.len()];
    for (i, p) in points.iter().enumerate() {
        cells[nearest(p, centres)].push(i);
    }
    cells
}

fn routed_cells_against(fitted: &[RoutedAtom], centres: &[RoutedAtom]) -> Vec<Vec<usize>> {
    let centres: Vec<Vec<f64>> = centres.iter().map(routed_key).collect();
    cells_for(fitted.iter().map(routed_key).collect(), &centres)
}

fn check_comparable(fitted: &MixingMeasurePair, truth: &MixingMeasurePair) -> Result<()> {
    check_len("input dimension", truth.input_dim, fitted.input_dim)?;
    if fitted.shared_family != truth.shared_family || fitted.routed_family != truth.routed_family {
        return Err(Error::invalid(
            "family",
            format!(
                "fitted families ({}, {}) differ from true families ({}, {})",
                fitted.shared_family, fitted.routed_family, truth.shared_family, truth.routed_family
            ),
        ));
    }
    Ok(())
}

/// Assigns every fitted atom to the cell of its nearest true atom.
pub fn assign_voronoi(fitted: &MixingMeasurePair, truth: &MixingMeasurePair) -> Result<VoronoiAssignment> {
    check_comparable(fitted, truth)?;
    let shared_centres: Vec<Vec<f64>> = truth.shared.iter().map(shared_key).collect();
    Ok(VoronoiAssignment {
        shared_cells: cells_for(fitted.shared.iter().map(shared_key).collect(), &shared_centres),
        routed_cells: routed_cells_against(&fitted.routed, &truth.routed),
    })
}

/// Exponents `r1(m)` and `r2(m)` for over-specified cells of size `m`.
///
/// Values for `m ≥ 4` are only known to be at least 7; the table returns
/// 7 there and marks the value as inexact.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateExponentTable {
    pub proxy_for_large: u32,
}

impl Default for RateExponentTable {
    fn default() -> Self {
        RateExponentTable { proxy_for_large: 7 }
    }
}

impl RateExponentTable {
    /// `(r1(m), is_exact)`.
    pub fn r1(&self, m: usize) -> (u32, bool) {
        self.lookup(m)
    }

    /// `(r2(m), is_exact)`.
    pub fn r2(&self, m: usize) -> (u32, bool) {
        self.lookup(m)
    }

    fn lookup(&self, m: usize) -> (u32, bool) {
        match m {
            0 | 1 => (1, true),
            2 => (4, true),
            3 => (6, true),
            _ => (self.proxy_for_large, false),
        }
    }
}

/// Per-cell exponent used by the linear-expert loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentUse {
    pub block: String,
    pub cell: usize,
    pub size: usize,
    pub r: u32,
    pub exact: bool,
}

/// Shared-block terms common to every loss: cell mass discrepancies plus
/// first-order (singleton) or squared (over-specified) parameter terms.
fn shared_block(fitted: &MixingMeasurePair, truth_shared: &[SharedAtom], cells: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (j, cell) in cells.iter().enumerate() {
        let t = &truth_shared[j];
        let mass: f64 = cell.iter().map(|&i| fitted.shared[i].weight).sum();
        total += (mass - t.weight).abs();
        for &i in cell {
            let a = &fitted.shared[i];
            let dk = norm(&a.expert_params, &t.expert_params);
            let dt = (a.variance - t.variance).abs();
            total += if cell.len() == 1 {
                a.weight * (dk + dt)
            } else {
                a.weight * (dk * dk + dt * dt)
            };
        }
    }
    total
}

/// Routed contribution of one cell under the softmax-mass loss.
fn routed_cell_d1(fitted: &MixingMeasurePair, t: &RoutedAtom, cell: &[usize]) -> f64 {
    let mass: f64 = cell.iter().map(|&i| fitted.routed[i].gate_bias.exp()).sum();
    let mut total = (mass - t.gate_bias.exp()).abs();
    for &i in cell {
        let a = &fitted.routed[i];
        let db = norm(&a.gate_vector, &t.gate_vector);
        let de = norm(&a.expert_params, &t.expert_params);
        let dv = (a.variance - t.variance).abs();
        let w = a.gate_bias.exp();
        total += if cell.len() == 1 {
            w * (db + de + dv)
        } else {
            w * (db * db + de * de + dv * dv)
        };
    }
    total
}

/// Loss for strongly identifiable experts with softmax gating; routed
/// masses are `exp(β0)`.
pub fn loss_d1(fitted: &MixingMeasurePair, truth: &MixingMeasurePair, cells: &VoronoiAssignment) -> Result<f64> {
    check_comparable(fitted, truth)?;
    cells.validate(fitted, truth.shared.len(), truth.routed.len())?;
    let routed: f64 = cells
        .routed_cells
        .iter()
        .enumerate()
        .map(|(j, c)| routed_cell_d1(fitted, &truth.routed[j], c))
        .sum();
    Ok(shared_block(fitted, &truth.shared, &cells.shared_cells) + routed)
}

/// Loss for linear experts, with cell-size dependent exponents.
pub fn loss_d2(fitted: &MixingMeasurePair, truth: &MixingMeasurePair, cells: &VoronoiAssignment, table: &RateExponentTable) -> Result<f64> {
    Ok(loss_d2_detailed(fitted, truth, cells, table)?.0)
}

fn loss_d2_detailed(
    fitted: &MixingMeasurePair,
    truth: &MixingMeasurePair,
    cells: &VoronoiAssignment,
    table: &RateExponentTable,
) -> Result<(f64, Vec<ExponentUse>)> {
    if truth.shared_family != ExpertFamily::Linear || truth.routed_family != ExpertFamily::Linear {
        return Err(Error::invalid("family", "linear family required for both shared and routed experts"));
    }
    check_comparable(fitted, truth)?;
    cells.validate(fitted, truth.shared.len(), truth.routed.len())?;
    let d = truth.input_dim;
    let split = |p: &[f64], q: &[f64]| (norm(&p[..d], &q[..d]), (p[d] - q[d]).abs());
    let mut used = Vec::new();
    let mut total = 0.0;

    for (j, cell) in cells.shared_cells.iter().enumerate() {
        let t = &truth.shared[j];
        let mass: f64 = cell.iter().map(|&i| fitted.shared[i].weight).sum();
        total += (mass - t.weight).abs();
        let (r, exact) = table.r1(cell.len());
        if cell.len() > 1 {
            used.push(ExponentUse { block: "shared".into(), cell: j, size: cell.len(), r, exact });
        }
        let r = f64::from(r);
        for &i in cell {
            let a = &fitted.shared[i];
            let (d1, d0) = split(&a.expert_params, &t.expert_params);
            let dt = (a.variance - t.variance).abs();
            total += if cell.len() == 1 {
                a.weight * (d1 + d0 + dt)
            } else {
                a.weight * (d1 * d1 + d0.powf(r) + dt.powf(r / 2.0))
            };
        }
    }

    for (j, cell) in cells.routed_cells.iter().enumerate() {
        let t = &truth.routed[j];
        let mass: f64 = cell.iter().map(|&i| fitted.routed[i].gate_bias.exp()).sum();
        total += (mass - t.gate_bias.exp()).abs();
        let (r, exact) = table.r2(cell.len());
        if cell.len() > 1 {
            used.push(ExponentUse { block: "routed".into(), cell: j, size: cell.len(), r, exact });
        }
        let r = f64::from(r);
        for &i in cell {
            let a = &fitted.routed[i];
            let db = norm(&a.gate_vector, &t.gate_vector);
            let (d1, d0) = split(&a.expert_params, &t.expert_params);
            let dv = (a.variance - t.variance).abs();
            let w = a.gate_bias.exp();
            total += if cell.len() == 1 {
                w * (db + d1 + d0 + dv)
            } else {
                w * (db.powf(r) + d1.powf(r / 2.0) + d0.powf(r) + dv.powf(r / 2.0))
            };
        }
    }
    Ok((total, used))
}

/// Loss for normalized sigmoid gating in the sparse regime; routed masses
/// are `σ(β0)` and routed parameter terms are unweighted.
pub fn loss_d3(fitted: &MixingMeasurePair, truth: &MixingMeasurePair, cells: &VoronoiAssignment) -> Result<f64> {
    check_comparable(fitted, truth)?;
    cells.validate(fitted, truth.shared.len(), truth.routed.len())?;
    let mut total = shared_block(fitted, &truth.shared, &cells.shared_cells);
    for (j, cell) in cells.routed_cells.iter().enumerate() {
        let t = &truth.routed[j];
        if cell.len() > 1 {
            let mass: f64 = cell.iter().map(|&i| sigmoid(fitted.routed[i].gate_bias)).sum();
            total += (mass - sigmoid(t.gate_bias)).abs();
        }
        for &i in cell {
            let a = &fitted.routed[i];
            let db = norm(&a.gate_vector, &t.gate_vector);
            let de = norm(&a.expert_params, &t.expert_params);
            let dv = (a.variance - t.variance).abs();
            total += if cell.len() == 1 {
                db + (a.gate_bias - t.gate_bias).abs() + de + dv
            } else {
                db * db + de * de + dv * dv
            };
        }
    }
    Ok(total)
}

/// Loss for normalized sigmoid gating in the dense regime, measured
/// against a reference routed measure. Fitted routed atoms are attached to
/// their nearest reference atom and every routed term is first order.
pub fn loss_d4(fitted: &MixingMeasurePair, truth: &MixingMeasurePair, reference_routed: &[RoutedAtom]) -> Result<f64> {
    check_comparable(fitted, truth)?;
    if reference_routed.is_empty() {
        return Err(Error::invalid("reference", "reference routed measure is empty"));
    }
    for r in reference_routed {
        check_len("reference gate vector", truth.input_dim, r.gate_vector.len())?;
        check_len("reference expert parameters", truth.routed_family.param_dim(truth.input_dim), r.expert_params.len())?;
    }
    let shared_centres: Vec<Vec<f64>> = truth.shared.iter().map(shared_key).collect();
    let shared_cells = cells_for(fitted.shared.iter().map(shared_key).collect(), &shared_centres);
    let routed_cells = routed_cells_against(&fitted.routed, reference_routed);
    let mut total = shared_block(fitted, &truth.shared, &shared_cells);
    for (j, cell) in routed_cells.iter().enumerate() {
        let t = &reference_routed[j];
        for &i in cell {
            let a = &fitted.routed[i];
            total += norm(&a.gate_vector, &t.gate_vector)
                + (a.gate_bias - t.gate_bias).abs()
                + norm(&a.expert_params, &t.expert_params)
                + (a.variance - t.variance).abs();
        }
    }
    Ok(total)
}

/// Loss for Top-K sparse gating: the largest value, over all `K`-subsets of
/// true routed atoms, of the softmax-mass loss restricted to the shared
/// cells and the chosen routed cells.
pub fn loss_d5(fitted: &MixingMeasurePair, truth: &MixingMeasurePair, k: usize) -> Result<f64> {
    if k == 0 || k > truth.routed.len() {
        return Err(Error::invalid("K", format!("need 1 <= K <= {}, got {k}", truth.routed.len())));
    }
    let cells = assign_voronoi(fitted, truth)?;
    let shared = shared_block(fitted, &truth.shared, &cells.shared_cells);
    let mut per_cell: Vec<f64> = cells
        .routed_cells
        .iter()
        .enumerate()
        .map(|(j, c)| routed_cell_d1(fitted, &truth.routed[j], c))
        .collect();
    // Every routed cell contributes a nonnegative amount, so the maximizing
    // subset is the K largest contributions.
    per_cell.sort_by(|a, b| b.total_cmp(a));
    Ok(shared + per_cell.iter().take(k).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    D1,
    D2,
    D3,
    D4,
    D5 { k: usize },
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::D1 => f.write_str("d1"),
            LossKind::D2 => f.write_str("d2"),
            LossKind::D3 => f.write_str("d3"),
            LossKind::D4 => f.write_str("d4"),
            LossKind::D5 { k } => write!(f, "d5:{k}"),
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d1" => Ok(LossKind::D1),
            "d2" => Ok(LossKind::D2),
            "d3" => Ok(LossKind::D3),
            "d4" => Ok(LossKind::D4),
            _ => s
                .strip_prefix("d5:")
                .and_then(|k| k.parse().ok())
                .map(|k| LossKind::D5 { k })
                .ok_or_else(|| Error::invalid("loss", format!("unknown loss `{s}` (d1, d2, d3, d4, d5:<K>)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub cells: VoronoiAssignment,
    pub exponents_used: Vec<ExponentUse>,
}

impl LossKind {
    /// Evaluates the loss of `fitted` against `truth`. The dense-regime loss
    /// uses the true routed atoms as its reference measure.
    pub fn evaluate(self, fitted: &MixingMeasurePair, truth: &MixingMeasurePair) -> Result<LossReport> {
        let cells = match self {
            LossKind::D4 => VoronoiAssignment {
                shared_cells: assign_voronoi(fitted, truth)?.shared_cells,
                routed_cells: routed_cells_against(&fitted.routed, &truth.routed),
            },
            _ => assign_voronoi(fitted, truth)?,
        };
        let mut exponents_used = Vec::new();
        let loss = match self {
            LossKind::D1 => loss_d1(fitted, truth, &cells)?,
            LossKind::D2 => {
                let (loss, used) = loss_d2_detailed(fitted, truth, &cells, &RateExponentTable::default())?;
                exponents_used = used;
                loss
            }
            LossKind::D3 => loss_d3(fitted, truth, &cells)?,
            LossKind::D4 => loss_d4(fitted, truth, &truth.routed)?,
            LossKind::D5 { k } => loss_d5(fitted, truth, k)?,
        };
        Ok(LossReport { loss, cells, exponents_used })
    }
}

/// Moves `fitted` to the member of its gate-equivalence class whose gate
/// parameters sit closest to the truth's.
///
/// Softmax and Top-K gates are unchanged by a common shift of every
/// `(β0, β1)`; the shift is chosen so that mass-weighted gate vectors and
/// log cell masses match the truth. A normalized sigmoid gate with zero gate
/// vectors depends only on the ratios of `σ(β0)`; when the truth has zero
/// gate vectors the fitted `σ(β0)` are rescaled to the true total mass.
pub fn align_gate_gauge(fitted: &MixingMeasurePair, truth: &MixingMeasurePair) -> Result<MixingMeasurePair> {
    check_comparable(fitted, truth)?;
    let mut out = fitted.clone();
    match fitted.gating {
        GatingKind::SoftmaxDense | GatingKind::SoftmaxTopK { .. } => {
            for _ in 0..20 {
                let cells = routed_cells_against(&out.routed, &truth.routed);
                let shifted = shift_to_truth(&out, truth, &cells);
                let stable = routed_cells_against(&shifted.routed, &truth.routed) == cells;
                out = shifted;
                if stable {
                    break;
                }
            }
        }
        GatingKind::NormalizedSigmoid => {
            if truth.routed.iter().all(|a| a.gate_vector.iter().all(|&v| v == 0.0)) {
                rescale_sigmoid_mass(&mut out, truth);
            }
        }
    }
    Ok(out)
}

fn shift_to_truth(fitted: &MixingMeasurePair, truth: &MixingMeasurePair, cells: &[Vec<usize>]) -> MixingMeasurePair {
    let d = truth.input_dim;
    let mut out = fitted.clone();
    let top = fitted.routed.iter().map(|a| a.gate_bias).fold(f64::NEG_INFINITY, f64::max);
    let mut c1 = vec![0.0; d];
    let mut total = 0.0;
    for (j, cell) in cells.iter().enumerate() {
        for &i in cell {
            let a = &fitted.routed[i];
            let w = (a.gate_bias - top).exp();
            total += w;
            for u in 0..d {
                c1[u] += w * (truth.routed[j].gate_vector[u] - a.gate_vector[u]);
            }
        }
    }
    c1.iter_mut().for_each(|v| *v /= total);
    let mut c0 = 0.0;
    let mut occupied = 0;
    for (j, cell) in cells.iter().enumerate() {
        if cell.is_empty() {
            continue;
        }
        let logs: Vec<f64> = cell.iter().map(|&i| fitted.routed[i].gate_bias).collect();
        c0 += truth.routed[j].gate_bias - crate::gating::log_sum_exp(&logs);
        occupied += 1;
    }
    c0 /= occupied as f64;
    for a in &mut out.routed {
        a.gate_bias += c0;
        for (v, c) in a.gate_vector.iter_mut().zip(&c1) {
            *v += c;
        }
    }
    out
}

fn rescale_sigmoid_mass(fitted: &mut MixingMeasurePair, truth: &MixingMeasurePair) {
    let masses: Vec<f64> = fitted.routed.iter().map(|a| sigmoid(a.gate_bias)).collect();
    let target: f64 = truth.routed.iter().map(|a| sigmoid(a.gate_bias)).sum();
    let current: f64 = masses.iter().sum();
    let largest = masses.iter().copied().fold(0.0, f64::max);
    if current <= 0.0 || largest <= 0.0 {
        return;
    }
    let scale = (target / current).min((1.0 - 1e-12) / largest);
    for (a, m) in fitted.routed.iter_mut().zip(&masses) {
        let p = m * scale;
        a.gate_bias = (p / (1.0 - p)).ln();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::preset_theorem;
    use proptest::prelude::*;

    const DELTA: f64 = 0.03125;

    fn linear_truth() -> MixingMeasurePair {
        preset_theorem(2).unwrap().truth
    }

    #[test]
    fn identical_measures_have_singleton_cells_and_zero_loss() {
        for which in 1..=4 {
            let t = preset_theorem(which).unwrap().truth;
            let cells = assign_voronoi(&t, &t).unwrap();
            assert_eq!(cells.shared_cells, vec![vec![0]]);
            assert_eq!(cells.routed_cells, vec![vec![0], vec![1]]);
            assert_eq!(loss_d1(&t, &t, &cells).unwrap(), 0.0);
            assert_eq!(loss_d3(&t, &t, &cells).unwrap(), 0.0);
            assert_eq!(loss_d4(&t, &t, &t.routed).unwrap(), 0.0);
            assert_eq!(loss_d5(&t, &t, 1).unwrap(), 0.0);
            assert_eq!(loss_d5(&t, &t, 2).unwrap(), 0.0);
        }
        let t = linear_truth();
        let cells = assign_voronoi(&t, &t).unwrap();
        assert_eq!(loss_d2(&t, &t, &cells, &RateExponentTable::default()).unwrap(), 0.0);
    }

    #[test]
    fn nearest_neighbour_and_ties() {
        let mut truth = linear_truth();
        truth.shared = vec![
            SharedAtom { weight: 0.5, expert_params: vec![0.0, 0.0], variance: 1.0 },
            SharedAtom { weight: 0.5, expert_params: vec![10.0, 0.0], variance: 1.0 },
        ];
        let mut fitted = truth.clone();
        fitted.shared = vec![
            SharedAtom { weight: 0.3, expert_params: vec![DELTA, 0.0], variance: 1.0 },
            SharedAtom { weight: 0.3, expert_params: vec![-DELTA, 0.0], variance: 1.0 },
            SharedAtom { weight: 0.4, expert_params: vec![5.0, 0.0], variance: 1.0 },
        ];
        let cells = assign_voronoi(&fitted, &truth).unwrap();
        assert_eq!(cells.shared_cells, vec![vec![0, 1, 2], vec![]]);
        fitted.shared[2].expert_params[0] = 9.0;
        let cells = assign_voronoi(&fitted, &truth).unwrap();
        assert_eq!(cells.shared_cells, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn d1_singleton_shift() {
        let truth = preset_theorem(1).unwrap().truth;
        let mut fitted = truth.clone();
        fitted.shared[0].expert_params[1] += DELTA;
        let cells = assign_voronoi(&fitted, &truth).unwrap();
        assert!((loss_d1(&fitted, &truth, &cells).unwrap() - DELTA).abs() < 1e-12);
    }

    #[test]
    fn d1_split_shared_atom() {
        let truth = preset_theorem(1).unwrap().truth;
        let mut fitted = truth.clone();
        let mut a = truth.shared[0].clone();
        let mut b = truth.shared[0].clone();
        a.weight = 0.5;
        b.weight = 0.5;
        a.expert_params[0] += DELTA;
        b.expert_params[0] -= DELTA;
        fitted.shared = vec![a, b];
        let cells = assign_voronoi(&fitted, &truth).unwrap();
        assert_eq!(cells.shared_cells, vec![vec![0, 1]]);
        assert!((loss_d1(&fitted, &truth, &cells).unwrap() - DELTA * DELTA).abs() < 1e-12);
    }

    #[test]
    fn d2_over_specified_intercept_uses_fourth_power() {
        let truth = linear_truth();
        let mut fitted = truth.clone();
        // Split routed atom 1 into two atoms of mass w each, total matching the truth.
        let w = truth.routed[0].gate_bias.exp() / 2.0;
        let mut a = truth.routed[0].clone();
        a.gate_bias = w.ln();
        let mut b = a.clone();
        b.expert_params[1] += DELTA;
        fitted.routed = vec![a, b, truth.routed[1].clone()];
        let cells = assign_voronoi(&fitted, &truth).unwrap();
        assert_eq!(cells.routed_cells, vec![vec![0, 1], vec![2]]);
        let loss = loss_d2(&fitted, &truth, &cells, &RateExponentTable::default()).unwrap();
        assert!((loss - w * DELTA.powi(4)).abs() < 1e-12, "{loss}");
        let report = LossKind::D2.evaluate(&fitted, &truth).unwrap();
        assert_eq!(report.exponents_used.len(), 1);
        assert_eq!(report.exponents_used[0].r, 4);
    }

    #[test]
    fn d2_singleton_intercept_is_first_order() {
        let truth = linear_truth();
        let mut fitted = truth.clone();
        fitted.shared[0].expert_params[1] += DELTA;
        let cells = assign_voronoi(&fitted, &truth).unwrap();
        let loss = loss_d2(&fitted, &truth, &cells, &RateExponentTable::default()).unwrap();
        assert!((loss - truth.shared[0].weight * DELTA).abs() < 1e-12);
    }

    #[test]
    fn d2_requires_linear_experts() {
        let t = preset_theorem(1).unwrap().truth;
        let cells = assign_voronoi(&t, &t).unwrap();
        let err = loss_d2(&t, &t, &cells, &RateExponentTable::default()).unwrap_err();
        assert!(err.to_string().contains("linear family required"));
    }

    #[test]
    fn d3_singleton_gate_bias() {
        let truth = preset_theorem(3).unwrap().truth;
        let mut fitted = truth.clone();
        fitted.routed[1].gate_bias += DELTA;
        let cells = assign_voronoi(&fitted, &truth).unwrap();
        assert!((loss_d3(&fitted, &truth, &cells).unwrap() - DELTA).abs() < 1e-12);
    }

    #[test]
    fn d3_over_specified_mass() {
        let truth = preset_theorem(3).unwrap().truth;
        let target = sigmoid(truth.routed[0].gate_bias) + DELTA;
        let half = target / 2.0;
        let logit = (half / (1.0 - half)).ln();
        let mut a = truth.routed[0].clone();
        a.gate_bias = logit;
        let fitted = MixingMeasurePair {
            routed: vec![a.clone(), a, truth.routed[1].clone()],
            ..truth.clone()
        };
        let cells = assign_voronoi(&fitted, &truth).unwrap();
        assert!((loss_d3(&fitted, &truth, &cells).unwrap() - DELTA).abs() < 1e-12);
    }

    #[test]
    fn d4_examples() {
        let truth = preset_theorem(4).unwrap().truth;
        let mut fitted = truth.clone();
        fitted.routed[0].variance += DELTA;
        assert!((loss_d4(&fitted, &truth, &truth.routed).unwrap() - DELTA).abs() < 1e-12);

        let w = 0.25;
        let mut a = truth.shared[0].clone();
        a.weight = w;
        a.variance += DELTA;
        let mut b = truth.shared[0].clone();
        b.weight = 1.0 - w;
        let fitted = MixingMeasurePair { shared: vec![a, b], ..truth.clone() };
        assert!((loss_d4(&fitted, &truth, &truth.routed).unwrap() - w * DELTA * DELTA).abs() < 1e-12);
    }

    #[test]
    fn d5_examples() {
        let mut truth = preset_theorem(1).unwrap().truth;
        truth.gating = GatingKind::SoftmaxTopK { k: 1 };
        let mut fitted = truth.clone();
        fitted.routed[1].expert_params[0] += DELTA;
        let w = truth.routed[1].gate_bias.exp();
        // Oracle: enumerate both singleton subsets by hand.
        let subset_one = 0.0;
        let subset_two = w * DELTA;
        let expected = f64::max(subset_one, subset_two);
        assert!((loss_d5(&fitted, &truth, 1).unwrap() - expected).abs() < 1e-12);
        let cells = assign_voronoi(&fitted, &truth).unwrap();
        assert_eq!(loss_d5(&fitted, &truth, 2).unwrap(), loss_d1(&fitted, &truth, &cells).unwrap());
        assert!(loss_d5(&fitted, &truth, 3).is_err());
    }

    #[test]
    fn rate_table_values() {
        let t = RateExponentTable::default();
        assert_eq!(t.r1(1), (1, true));
        assert_eq!(t.r1(2), (4, true));
        assert_eq!(t.r1(3), (6, true));
        assert_eq!(t.r2(2), (4, true));
        assert_eq!(t.r2(3), (6, true));
        assert_eq!(t.r1(4), (7, false));
        for m in 1..=10 {
            assert!(t.r2(m).0 <= t.r1(m).0);
            assert!(t.r1(m).0 <= t.r1(m + 1).0);
        }
    }

    #[test]
    fn invalid_assignment_is_rejected() {
        let t = preset_theorem(1).unwrap().truth;
        let cells = VoronoiAssignment { shared_cells: vec![vec![0]], routed_cells: vec![vec![0], vec![0]] };
        assert!(loss_d1(&t, &t, &cells).is_err());
    }

    #[test]
    fn softmax_gauge_alignment_undoes_shift() {
        let truth = preset_theorem(1).unwrap().truth;
        let mut fitted = truth.clone();
        for a in &mut fitted.routed {
            a.gate_bias += 1.7;
            a.gate_vector[0] -= 0.4;
        }
        let x = [0.8];
        let before = fitted.gate_weights(&x).unwrap();
        let aligned = align_gate_gauge(&fitted, &truth).unwrap();
        let after = aligned.gate_weights(&x).unwrap();
        for (u, v) in before.iter().zip(&after) {
            assert!((u - v).abs() < 1e-12);
        }
        let cells = assign_voronoi(&aligned, &truth).unwrap();
        assert!(loss_d1(&aligned, &truth, &cells).unwrap() < 1e-12);
    }

    #[test]
    fn sigmoid_scale_alignment_keeps_gates() {
        let truth = preset_theorem(3).unwrap().truth;
        let mut fitted = truth.clone();
        fitted.routed[0].gate_bias = (0.5 * sigmoid(truth.routed[0].gate_bias)).ln() - (1.0 - 0.5 * sigmoid(truth.routed[0].gate_bias)).ln();
        fitted.routed[1].gate_bias = (0.5 * sigmoid(truth.routed[1].gate_bias)).ln() - (1.0 - 0.5 * sigmoid(truth.routed[1].gate_bias)).ln();
        let aligned = align_gate_gauge(&fitted, &truth).unwrap();
        for (a, t) in aligned.routed.iter().zip(&truth.routed) {
            assert!((a.gate_bias - t.gate_bias).abs() < 1e-12);
        }
    }

    fn perturbed(seed: u64) -> (MixingMeasurePair, MixingMeasurePair) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let truth = linear_truth();
        let mut fitted = truth.clone();
        fitted.shared = (0..2)
            .map(|_| {
                let mut a = truth.shared[0].clone();
                a.weight = 0.5;
                a.expert_params.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
                a.variance += rng.random_range(0.0..0.1);
                a
            })
            .collect();
        fitted.routed = (0..3)
            .map(|i| {
                let mut a = truth.routed[i % 2].clone();
                a.gate_bias += rng.random_range(-0.5..0.5);
                a.gate_vector[0] += rng.random_range(-0.5..0.5);
                a.expert_params.iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
                a.variance += rng.random_range(0.0..0.2);
                a
            })
            .collect();
        (fitted, truth)
    }

    fn all_losses(fitted: &MixingMeasurePair, truth: &MixingMeasurePair) -> Vec<f64> {
        [LossKind::D1, LossKind::D2, LossKind::D3, LossKind::D4, LossKind::D5 { k: 1 }]
            .iter()
            .map(|k| k.evaluate(fitted, truth).unwrap().loss)
            .collect()
    }

    proptest! {
        #[test]
        fn permutation_invariance(seed in any::<u64>(), rot in 0usize..3, swap_true in any::<bool>()) {
            let (fitted, truth) = perturbed(seed);
            let base = all_losses(&fitted, &truth);
            let mut f2 = fitted.clone();
            f2.routed.rotate_left(rot);
            f2.shared.reverse();
            let mut t2 = truth.clone();
            if swap_true {
                t2.routed.swap(0, 1);
            }
            for (a, b) in base.iter().zip(all_losses(&f2, &t2)) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
                prop_assert!(*a >= 0.0);
            }
        }

        #[test]
        fn d1_grows_when_atom_moves_away(seed in any::<u64>(), idx in 0usize..3, step in 0.01f64..1.0) {
            let (fitted, truth) = perturbed(seed);
            let cells = assign_voronoi(&fitted, &truth).unwrap();
            let before = loss_d1(&fitted, &truth, &cells).unwrap();
            let j = cells.routed_cells.iter().position(|c| c.contains(&idx)).unwrap();
            let centre = &truth.routed[j];
            let mut moved = fitted.clone();
            let a = &mut moved.routed[idx];
            let away = |v: &mut f64, c: f64| *v += if *v >= c { step } else { -step };
            away(&mut a.gate_vector[0], centre.gate_vector[0]);
            for (v, c) in a.expert_params.iter_mut().zip(&centre.expert_params) {
                away(v, *c);
            }
            a.variance += if a.variance >= centre.variance { step } else { 0.0 };
            let after = loss_d1(&moved, &truth, &cells).unwrap();
            prop_assert!(after >= before);
        }
    }
}
