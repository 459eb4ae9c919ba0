//! Maximum-likelihood estimation by generalized EM.
//!
//! Each iteration computes posterior responsibilities (E-step) and then
//! improves the expected complete-data log-likelihood block by block:
//! shared weights, linear experts and variances in closed form, nonlinear
//! experts by Levenberg–Marquardt on the weighted squared error, and gate
//! parameters by damped Newton steps with Armijo backtracking. A candidate
//! update is kept only if the observed-data log-likelihood does not drop.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::expert::{dot, ExpertFamily};
use crate::gating::{log_gate_weights_into, log_sum_exp, sigmoid, GatingKind};
use crate::model::{Dataset, MixingMeasurePair, RoutedAtom, SharedAtom, VARIANCE_FLOOR};
use crate::sampler::derive_seed;
use crate::voronoi::assign_voronoi;

/// Components whose responsibility mass falls below this fraction of `n`
/// keep their expert parameters for the iteration.
const DEGENERATE_MASS: f64 = 1e-8;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EMConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub inner_steps: usize,
    pub seed: u64,
    pub init_box_scale: f64,
    /// Optional compact parameter box: every expert and gate coordinate is
    /// kept in `[-bound, bound]` by the M-step.
    #[serde(default)]
    pub param_bound: Option<f64>,
}

impl Default for EMConfig {
    fn default() -> Self {
        EMConfig {
            tol: 1e-6,
            max_iter: 1000,
            restarts: 5,
            inner_steps: 25,
            seed: 0,
            init_box_scale: 1.0,
            param_bound: None,
        }
    }
}

impl EMConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be at least 1"));
        }
        if self.restarts == 0 {
            return Err(Error::invalid("restarts", "must be at least 1"));
        }
        if self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps", "must be at least 1"));
        }
        if !(self.init_box_scale > 0.0 && self.init_box_scale.is_finite()) {
            return Err(Error::invalid("init_box_scale", "must be a positive finite number"));
        }
        if let Some(b) = self.param_bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::invalid("param_bound", "must be a positive finite number"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: MixingMeasurePair,
    /// Mean log-likelihood before the first and after every iteration.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
    /// Set when a Top-K fit has fewer active slots than the truth's
    /// Voronoi cells require.
    pub topk_capacity_warning: bool,
}

impl FitResult {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace is never empty")
    }

    /// Flags a Top-K fit whose `K̄` is below the largest total size of any
    /// `K` routed Voronoi cells around the truth. Returns the flag.
    pub fn check_topk_capacity(&mut self, truth: &MixingMeasurePair) -> Result<bool> {
        let k_fit = match self.model.gating {
            GatingKind::SoftmaxTopK { k } => k,
            _ => return Ok(false),
        };
        let k_true = match truth.gating {
            GatingKind::SoftmaxTopK { k } => k,
            _ => truth.routed.len(),
        };
        let cells = assign_voronoi(&self.model, truth)?;
        let mut sizes: Vec<usize> = cells.routed_cells.iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        let required: usize = sizes.iter().take(k_true).sum();
        self.topk_capacity_warning = k_fit < required;
        Ok(self.topk_capacity_warning)
    }
}

/// Posterior component probabilities, one row per sample; shared
/// components first, then routed ones.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    k1: usize,
    k2: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    fn zeros(n: usize, k1: usize, k2: usize) -> Self {
        Responsibilities {
            k1,
            k2,
            values: vec![0.0; n * (k1 + k2)],
        }
    }

    pub fn num_rows(&self) -> usize {
        self.values.len() / self.num_components()
    }

    pub fn num_components(&self) -> usize {
        self.k1 + self.k2
    }

    pub fn num_shared(&self) -> usize {
        self.k1
    }

    pub fn num_routed(&self) -> usize {
        self.k2
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.num_components();
        &self.values[i * k..(i + 1) * k]
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.num_components() + c]
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let k = self.num_components();
        let mut sums = vec![0.0; k];
        for row in self.values.chunks_exact(k) {
            for (s, r) in sums.iter_mut().zip(row) {
                *s += r;
            }
        }
        sums
    }

    fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(c).step_by(self.num_components()).copied()
    }
}

/// Posterior responsibilities of every component for every sample.
pub fn e_step(model: &MixingMeasurePair, data: &Dataset) -> Result<Responsibilities> {
    check_compatible(model, data)?;
    let mut resp = Responsibilities::zeros(data.len(), model.shared.len(), model.routed.len());
    e_step_into(model, data, &mut resp);
    Ok(resp)
}

/// Fills `resp` and returns the mean observed-data log-likelihood.
fn e_step_into(model: &MixingMeasurePair, data: &Dataset, resp: &mut Responsibilities) -> f64 {
    let k = model.num_components();
    let mut total = 0.0;
    for (i, row) in resp.values.chunks_exact_mut(k).enumerate() {
        model.component_log_terms(data.x(i), data.y(i), row);
        let lse = log_sum_exp(row);
        total += lse;
        for v in row.iter_mut() {
            *v = (*v - lse).exp();
        }
    }
    total / data.len() as f64
}

fn check_compatible(model: &MixingMeasurePair, data: &Dataset) -> Result<()> {
    model.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("data", "dataset is empty"));
    }
    check_len("dataset input dimension", model.input_dim, data.input_dim())
}

/// One generalized M-step from the given responsibilities.
///
/// Returns the updated model; blocks whose update would lower the observed
/// log-likelihood are left at their previous values.
pub fn m_step(resp: &Responsibilities, data: &Dataset, model: &MixingMeasurePair, cfg: &EMConfig) -> Result<MixingMeasurePair> {
    check_compatible(model, data)?;
    cfg.validate()?;
    check_len("responsibility rows", data.len(), resp.num_rows())?;
    check_len("shared responsibility columns", model.shared.len(), resp.num_shared())?;
    check_len("routed responsibility columns", model.routed.len(), resp.num_routed())?;
    let old_ll = model.log_likelihood_unchecked(data);
    let mut scratch = Responsibilities::zeros(data.len(), resp.k1, resp.k2);
    Ok(guarded_m_step(resp, data, model, old_ll, cfg, &mut scratch).0)
}

/// Computes the candidate update and applies the likelihood guard. On
/// return `scratch` holds the responsibilities of the returned model.
fn guarded_m_step(
    resp: &Responsibilities,
    data: &Dataset,
    model: &MixingMeasurePair,
    old_ll: f64,
    cfg: &EMConfig,
    scratch: &mut Responsibilities,
) -> (MixingMeasurePair, f64) {
    let mixture = update_mixture_block(resp, data, model, cfg);
    let gates = update_gating_block(resp, data, model, cfg.inner_steps, cfg.param_bound);

    let mut full = mixture.clone();
    set_gates(&mut full, &gates);
    let mut only_gates = model.clone();
    set_gates(&mut only_gates, &gates);

    for candidate in [full, mixture, only_gates] {
        let ll = e_step_into(&candidate, data, scratch);
        if ll >= old_ll {
            return (candidate, ll);
        }
    }
    let ll = e_step_into(model, data, scratch);
    (model.clone(), ll)
}

fn set_gates(model: &mut MixingMeasurePair, gates: &[(f64, Vec<f64>)]) {
    for (a, (b0, b1)) in model.routed.iter_mut().zip(gates) {
        a.gate_bias = *b0;
        a.gate_vector.clone_from(b1);
    }
}

/// Shared weights, expert parameters and variances.
fn update_mixture_block(resp: &Responsibilities, data: &Dataset, model: &MixingMeasurePair, cfg: &EMConfig) -> MixingMeasurePair {
    let n = data.len();
    let k1 = model.shared.len();
    let mass = resp.column_sums();
    let threshold = DEGENERATE_MASS * n as f64;
    let mut out = model.clone();

    let shared_mass: f64 = mass[..k1].iter().sum();
    if shared_mass > threshold {
        for (a, m) in out.shared.iter_mut().zip(&mass[..k1]) {
            a.weight = m / shared_mass;
        }
        let total: f64 = out.shared.iter().map(|a| a.weight).sum();
        out.shared.iter_mut().for_each(|a| a.weight /= total);
    }

    let mut weights = vec![0.0; n];
    for c in 0..model.num_components() {
        if mass[c] < threshold {
            continue;
        }
        for (w, r) in weights.iter_mut().zip(resp.column(c)) {
            *w = r;
        }
        let (family, params, variance) = if c < k1 {
            let a = &mut out.shared[c];
            (model.shared_family, &mut a.expert_params, &mut a.variance)
        } else {
            let a = &mut out.routed[c - k1];
            (model.routed_family, &mut a.expert_params, &mut a.variance)
        };
        let updated = match family {
            ExpertFamily::Linear => weighted_least_squares(data, &weights).map(|mut p| {
                clamp_to(&mut p, cfg.param_bound);
                p
            }),
            _ => levenberg_marquardt(family, params, data, &weights, cfg.inner_steps, cfg.param_bound),
        };
        if let Some(p) = updated {
            *params = p;
        }
        let sse = weighted_sse(family, params, data, &weights);
        *variance = (sse / mass[c]).max(VARIANCE_FLOOR);
    }
    out
}

fn weighted_sse(family: ExpertFamily, params: &[f64], data: &Dataset, weights: &[f64]) -> f64 {
    weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, &w)| {
            let r = data.y(i) - family.eval_unchecked(params, data.x(i));
            w * r * r
        })
        .sum()
}

/// Closed-form weighted least squares for `y ≈ aᵀx + b`.
fn weighted_least_squares(data: &Dataset, weights: &[f64]) -> Option<Vec<f64>> {
    let d = data.input_dim();
    let p = d + 1;
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut row = vec![1.0; p];
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        row[..d].copy_from_slice(data.x(i));
        let y = data.y(i);
        for a in 0..p {
            xty[a] += w * row[a] * y;
            for b in 0..=a {
                xtx[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    symmetrize(&mut xtx);
    let sol = xtx.clone().cholesky()?.solve(&xty);
    sol.iter().all(|v| v.is_finite()).then(|| sol.iter().copied().collect())
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.nrows();
    for a in 0..p {
        for b in 0..a {
            m[(b, a)] = m[(a, b)];
        }
    }
}

fn clamp_to(values: &mut [f64], bound: Option<f64>) {
    if let Some(b) = bound {
        values.iter_mut().for_each(|v| *v = v.clamp(-b, b));
    }
}

/// Damped Gauss–Newton on the weighted squared error of one expert,
/// projected onto the parameter box when one is given.
fn levenberg_marquardt(
    family: ExpertFamily,
    start: &[f64],
    data: &Dataset,
    weights: &[f64],
    steps: usize,
    bound: Option<f64>,
) -> Option<Vec<f64>> {
    let p = start.len();
    let mut params = start.to_vec();
    let mut sse = weighted_sse(family, &params, data, weights);
    let mut lambda = 1e-3;
    let mut grad = vec![0.0; p];
    let mut improved = false;
    for _ in 0..steps {
        let mut jtj = DMatrix::<f64>::zeros(p, p);
        let mut jtr = DVector::<f64>::zeros(p);
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let h = family.value_and_grad(&params, data.x(i), &mut grad);
            let r = data.y(i) - h;
            for a in 0..p {
                jtr[a] += w * grad[a] * r;
                for b in 0..=a {
                    jtj[(a, b)] += w * grad[a] * grad[b];
                }
            }
        }
        symmetrize(&mut jtj);
        let scale = (0..p).map(|a| jtj[(a, a)]).fold(0.0, f64::max).max(1e-300);
        let mut accepted = false;
        for _ in 0..12 {
            let mut m = jtj.clone();
            for a in 0..p {
                m[(a, a)] += lambda * (jtj[(a, a)] + 1e-9 * scale);
            }
            let Some(chol) = m.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let delta = chol.solve(&jtr);
            let mut cand: Vec<f64> = params.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            clamp_to(&mut cand, bound);
            let cand_sse = weighted_sse(family, &cand, data, weights);
            if cand_sse.is_finite() && cand_sse < sse {
                let gain = sse - cand_sse;
                params = cand;
                sse = cand_sse;
                lambda = (lambda * 0.3).max(1e-12);
                accepted = true;
                improved = true;
                if gain <= 1e-12 * sse {
                    return Some(params);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    improved.then_some(params)
}

/// Gate-parameter update: `(β0, β1)` per routed atom.
fn update_gating_block(
    resp: &Responsibilities,
    data: &Dataset,
    model: &MixingMeasurePair,
    steps: usize,
    bound: Option<f64>,
) -> Vec<(f64, Vec<f64>)> {
    let d = model.input_dim;
    let k2 = model.routed.len();
    let mut theta: Vec<f64> = Vec::with_capacity(k2 * (d + 1));
    for a in &model.routed {
        theta.push(a.gate_bias);
        theta.extend_from_slice(&a.gate_vector);
    }
    let problem = GateProblem {
        gating: model.gating,
        data,
        resp,
        d,
        k2,
    };
    newton_ascent(&problem, &mut theta, steps, bound);
    theta.chunks_exact(d + 1).map(|c| (c[0], c[1..].to_vec())).collect()
}

/// Gating part of the EM objective: `Σₙ Σᵢ rₙᵢ log gateᵢ(xₙ; θ)`.
struct GateProblem<'a> {
    gating: GatingKind,
    data: &'a Dataset,
    resp: &'a Responsibilities,
    d: usize,
    k2: usize,
}

impl GateProblem<'_> {
    fn atoms(&self, theta: &[f64]) -> Vec<RoutedAtom> {
        theta
            .chunks_exact(self.d + 1)
            .map(|c| RoutedAtom {
                gate_bias: c[0],
                gate_vector: c[1..].to_vec(),
                expert_params: Vec::new(),
                variance: 1.0,
            })
            .collect()
    }

    fn routed_resp<'b>(&'b self, i: usize) -> &'b [f64] {
        &self.resp.row(i)[self.resp.k1..]
    }

    fn total_routed_mass(&self) -> f64 {
        (0..self.data.len()).map(|i| self.routed_resp(i).iter().sum::<f64>()).sum()
    }

    fn objective(&self, theta: &[f64]) -> f64 {
        let atoms = self.atoms(theta);
        let mut logg = vec![0.0; self.k2];
        let mut q = 0.0;
        for i in 0..self.data.len() {
            log_gate_weights_into(self.gating, &atoms, self.data.x(i), &mut logg);
            for (r, lg) in self.routed_resp(i).iter().zip(&logg) {
                if *r > 0.0 {
                    q += r * lg;
                }
            }
        }
        q
    }

    /// Gradient and Hessian of the objective with respect to `θ`.
    fn derivatives(&self, theta: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let k2 = self.k2;
        let q = self.d + 1;
        let dim = k2 * q;
        let atoms = self.atoms(theta);
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut logg = vec![0.0; k2];
        let mut gl = vec![0.0; k2];
        let mut hl = vec![0.0; k2 * k2];
        let mut xt = vec![1.0; q];
        for i in 0..self.data.len() {
            let x = self.data.x(i);
            xt[1..].copy_from_slice(x);
            let r = self.routed_resp(i);
            let big_r: f64 = r.iter().sum();
            log_gate_weights_into(self.gating, &atoms, x, &mut logg);
            let g: Vec<f64> = logg.iter().map(|v| v.exp()).collect();
            match self.gating {
                GatingKind::SoftmaxDense | GatingKind::SoftmaxTopK { .. } => {
                    for a in 0..k2 {
                        gl[a] = r[a] - big_r * g[a];
                        for b in 0..k2 {
                            let delta = if a == b { g[a] } else { 0.0 };
                            hl[a * k2 + b] = -big_r * (delta - g[a] * g[b]);
                        }
                    }
                }
                GatingKind::NormalizedSigmoid => {
                    let s: Vec<f64> = atoms.iter().map(|at| sigmoid(dot(&at.gate_vector, x) + at.gate_bias)).collect();
                    for a in 0..k2 {
                        let ca = 1.0 - s[a];
                        let resid = r[a] - big_r * g[a];
                        gl[a] = ca * resid;
                        for b in 0..k2 {
                            let cb = 1.0 - s[b];
                            let kron = if a == b { 1.0 } else { 0.0 };
                            hl[a * k2 + b] = -kron * s[a] * ca * resid - big_r * ca * g[a] * cb * (kron - g[b]);
                        }
                    }
                }
            }
            for a in 0..k2 {
                for u in 0..q {
                    grad[a * q + u] += gl[a] * xt[u];
                }
                for b in 0..=a {
                    let h = hl[a * k2 + b];
                    if h == 0.0 {
                        continue;
                    }
                    for u in 0..q {
                        for v in 0..q {
                            hess[(a * q + u, b * q + v)] += h * xt[u] * xt[v];
                        }
                    }
                }
            }
        }
        for a in 0..dim {
            for b in (a + 1)..dim {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        (grad, hess)
    }
}

/// Damped Newton ascent with Armijo backtracking.
fn newton_ascent(problem: &GateProblem<'_>, theta: &mut [f64], steps: usize, bound: Option<f64>) {
    let dim = theta.len();
    let mut q = problem.objective(theta);
    if !q.is_finite() {
        return;
    }
    let stop = 1e-10 * problem.total_routed_mass().max(1.0);
    let mut lambda = 1e-6;
    for _ in 0..steps {
        let (grad, hess) = problem.derivatives(theta);
        let neg_h = -hess;
        let scale = (0..dim).map(|a| neg_h[(a, a)].abs()).fold(0.0, f64::max).max(1e-12);
        let mut direction = None;
        for _ in 0..20 {
            let mut m = neg_h.clone();
            for a in 0..dim {
                m[(a, a)] += lambda * scale;
            }
            if let Some(chol) = m.cholesky() {
                direction = Some(chol.solve(&grad));
                break;
            }
            lambda *= 10.0;
        }
        let Some(direction) = direction else { break };
        let slope = grad.dot(&direction);
        if !(slope > 0.0) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut cand: Vec<f64> = theta.iter().zip(direction.iter()).map(|(a, b)| a + t * b).collect();
            clamp_to(&mut cand, bound);
            let cq = problem.objective(&cand);
            if cq.is_finite() && cq >= q + ARMIJO_C * t * slope {
                accepted = Some((cand, cq));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cq)) = accepted else { break };
        let gain = cq - q;
        theta.copy_from_slice(&cand);
        q = cq;
        lambda = if t == 1.0 { (lambda * 0.1).max(1e-12) } else { lambda * 10.0 };
        if gain < stop {
            break;
        }
    }
}

/// Random starting point: expert coordinates uniform on
/// `scale·[-10, 10]`, variances on `[0.05, 1]`, gate parameters on `[-1, 1]`,
/// equal shared weights.
pub fn random_init<R: Rng>(
    rng: &mut R,
    input_dim: usize,
    k1: usize,
    k2: usize,
    shared_family: ExpertFamily,
    routed_family: ExpertFamily,
    gating: GatingKind,
    scale: f64,
) -> MixingMeasurePair {
    let box_draw = |rng: &mut R, len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-10.0 * scale..=10.0 * scale)).collect() };
    let shared = (0..k1)
        .map(|_| SharedAtom {
            weight: 1.0 / k1 as f64,
            expert_params: box_draw(rng, shared_family.param_dim(input_dim)),
            variance: rng.random_range(0.05..=1.0),
        })
        .collect();
    let routed = (0..k2)
        .map(|_| RoutedAtom {
            gate_bias: rng.random_range(-1.0..=1.0),
            gate_vector: (0..input_dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            expert_params: box_draw(rng, routed_family.param_dim(input_dim)),
            variance: rng.random_range(0.05..=1.0),
        })
        .collect();
    MixingMeasurePair {
        input_dim,
        gating,
        shared_family,
        routed_family,
        shared,
        routed,
    }
}

/// Runs EM from `init` until the mean log-likelihood changes by less than
/// `cfg.tol` or `cfg.max_iter` iterations have been made.
pub fn fit_from(data: &Dataset, init: &MixingMeasurePair, cfg: &EMConfig) -> Result<FitResult> {
    check_compatible(init, data)?;
    cfg.validate()?;
    Ok(run_em(data, init.clone(), cfg))
}

fn run_em(data: &Dataset, mut model: MixingMeasurePair, cfg: &EMConfig) -> FitResult {
    let (k1, k2) = (model.shared.len(), model.routed.len());
    let mut resp = Responsibilities::zeros(data.len(), k1, k2);
    let mut next = Responsibilities::zeros(data.len(), k1, k2);
    let mut ll = e_step_into(&model, data, &mut resp);
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        let (new_model, new_ll) = guarded_m_step(&resp, data, &model, ll, cfg, &mut next);
        iterations += 1;
        trace.push(new_ll);
        std::mem::swap(&mut resp, &mut next);
        let change = new_ll - ll;
        model = new_model;
        ll = new_ll;
        if change.abs() < cfg.tol {
            converged = true;
            break;
        }
    }
    sort_shared(&mut model);
    FitResult {
        model,
        loglik_trace: trace,
        iterations,
        converged,
        restart_index: 0,
        topk_capacity_warning: false,
    }
}

fn sort_shared(model: &mut MixingMeasurePair) {
    model.shared.sort_by(|a, b| {
        a.expert_params
            .iter()
            .zip(&b.expert_params)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.variance.total_cmp(&b.variance))
    });
}

/// Starting point in a neighbourhood of `center` with `k1` shared and `k2`
/// routed atoms. Fitted atom `i` starts from centre atom `i mod k*`; the
/// centre's mass is split evenly among its copies and every coordinate is
/// moved by a uniform draw from `[-noise, noise]` (variances on the log
/// scale).
pub fn perturbed_init<R: Rng>(rng: &mut R, center: &MixingMeasurePair, k1: usize, k2: usize, noise: f64) -> MixingMeasurePair {
    let jitter = |rng: &mut R| if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
    let copies = |k: usize, k_star: usize, j: usize| (k / k_star + usize::from(j < k % k_star)) as f64;
    let (ks1, ks2) = (center.shared.len(), center.routed.len());
    let mut shared: Vec<SharedAtom> = (0..k1)
        .map(|i| {
            let c = &center.shared[i % ks1];
            SharedAtom {
                weight: c.weight / copies(k1, ks1, i % ks1) * (1.0 + 0.5 * jitter(rng)).max(0.05),
                expert_params: c.expert_params.iter().map(|v| v + jitter(rng)).collect(),
                variance: (c.variance * jitter(rng).exp()).max(VARIANCE_FLOOR),
            }
        })
        .collect();
    let total: f64 = shared.iter().map(|a| a.weight).sum();
    shared.iter_mut().for_each(|a| a.weight /= total);
    let routed = (0..k2)
        .map(|i| {
            let c = &center.routed[i % ks2];
            let m = copies(k2, ks2, i % ks2);
            let bias = match center.gating {
                GatingKind::NormalizedSigmoid => {
                    let p = sigmoid(c.gate_bias) / m;
                    (p / (1.0 - p)).ln()
                }
                _ => c.gate_bias - m.ln(),
            };
            RoutedAtom {
                gate_bias: bias + jitter(rng),
                gate_vector: c.gate_vector.iter().map(|v| v + jitter(rng)).collect(),
                expert_params: c.expert_params.iter().map(|v| v + jitter(rng)).collect(),
                variance: (c.variance * jitter(rng).exp()).max(VARIANCE_FLOOR),
            }
        })
        .collect();
    MixingMeasurePair {
        shared,
        routed,
        ..center.clone()
    }
}

/// Runs EM from each starting model and returns the run with the highest
/// final log-likelihood (earliest on ties).
pub fn fit_best_of(data: &Dataset, inits: &[MixingMeasurePair], cfg: &EMConfig) -> Result<FitResult> {
    cfg.validate()?;
    if inits.is_empty() {
        return Err(Error::invalid("inits", "need at least one starting model"));
    }
    let mut best: Option<FitResult> = None;
    for (restart, init) in inits.iter().enumerate() {
        check_compatible(init, data)?;
        let mut fit = run_em(data, init.clone(), cfg);
        fit.restart_index = restart;
        if best.as_ref().is_none_or(|b| fit.final_loglik() > b.final_loglik()) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Maximum-likelihood fit with `cfg.restarts` random initializations;
/// returns the run with the highest final log-likelihood.
pub fn fit_mle(
    data: &Dataset,
    k1: usize,
    k2: usize,
    shared_family: ExpertFamily,
    routed_family: ExpertFamily,
    gating: GatingKind,
    cfg: &EMConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    if k1 == 0 || k2 == 0 {
        return Err(Error::invalid("k", "need k1 >= 1 and k2 >= 1"));
    }
    if data.len() < k1 + k2 {
        return Err(Error::invalid("data", format!("need at least k1 + k2 = {} samples, got {}", k1 + k2, data.len())));
    }
    gating.validate(k2)?;
    let inits: Vec<MixingMeasurePair> = (0..cfg.restarts)
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x454d, restart as u64));
            random_init(&mut rng, data.input_dim(), k1, k2, shared_family, routed_family, gating, cfg.init_box_scale)
        })
        .collect();
    fit_best_of(data, &inits, cfg)
}
