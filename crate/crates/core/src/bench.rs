//! Convergence-rate experiments: ground-truth presets, repetition grids,
//! per-run loss records, log-log slope fits and a Monte-Carlo total
//! variation probe.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_best_of, fit_mle, perturbed_init, EMConfig};
use crate::error::{Error, Result};
use crate::expert::ExpertFamily;
use crate::gating::GatingKind;
use crate::model::{MixingMeasurePair, RoutedAtom, SharedAtom};
use crate::sampler::{derive_seed, sample_dataset, SamplerConfig};
use crate::voronoi::{align_gate_gauge, LossKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 8 log-spaced sample sizes in `[10², 10^4.5]`, 20 repetitions.
    Desk,
    /// 10 log-spaced sample sizes in `[10², 10⁵]`, 40 repetitions.
    Full,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::invalid("scale", format!("unknown scale `{s}` (desk, full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub truth: MixingMeasurePair,
    pub fitted_k1: usize,
    pub fitted_k2: usize,
    pub loss: LossKind,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    #[serde(default)]
    pub em: EMConfig,
    #[serde(default)]
    pub master_seed: u64,
    /// When set, EM starts from perturbed copies of the truth with this
    /// noise half-width instead of from the random initialization box.
    #[serde(default)]
    pub init_noise: Option<f64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.truth.validate()?;
        self.em.validate()?;
        if self.reps == 0 {
            return Err(Error::invalid("reps", "need at least one repetition"));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("n_grid", "must be non-empty and strictly increasing"));
        }
        if self.n_grid[0] < self.fitted_k1 + self.fitted_k2 {
            return Err(Error::invalid("n_grid", "smallest sample size is below k1 + k2"));
        }
        if self.fitted_k1 == 0 || self.fitted_k2 == 0 {
            return Err(Error::invalid("k", "fitted k1 and k2 must be positive"));
        }
        self.truth.gating.validate(self.fitted_k2)?;
        Ok(())
    }

    pub fn with_scale(mut self, scale: Scale) -> Self {
        let (hi, points, reps) = match scale {
            Scale::Desk => (4.5, 8, 20),
            Scale::Full => (5.0, 10, 40),
        };
        self.n_grid = log_grid(2.0, hi, points);
        self.reps = reps;
        self
    }
}

/// `points` sample sizes with exponents evenly spaced in `[lo, hi]` (base 10).
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<usize> {
    if points == 1 {
        return vec![10f64.powf(lo).round() as usize];
    }
    let mut grid: Vec<usize> = (0..points)
        .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (points - 1) as f64).round() as usize)
        .collect();
    grid.dedup();
    grid
}

fn shared_gelu() -> SharedAtom {
    SharedAtom {
        weight: 1.0,
        expert_params: vec![-8.0, 6.0, 0.0],
        variance: 0.25,
    }
}

fn routed(b0: f64, b1: f64, eta: [f64; 2]) -> RoutedAtom {
    RoutedAtom {
        gate_bias: b0,
        gate_vector: vec![b1],
        expert_params: eta.to_vec(),
        variance: 0.4,
    }
}

/// Ground truth and protocol of one of the four benchmark experiments, at
/// full scale.
pub fn preset_theorem(which: u8) -> Result<ExperimentConfig> {
    let (truth, loss) = match which {
        1 => (
            MixingMeasurePair::new(
                1,
                GatingKind::SoftmaxDense,
                ExpertFamily::GeluOuterInnerBias,
                ExpertFamily::GeluOuterInner,
                vec![shared_gelu()],
                vec![routed(-0.5, 5.0, [4.0, -12.0]), routed(0.5, 5.0, [4.0, 12.0])],
            )?,
            LossKind::D1,
        ),
        2 => (
            MixingMeasurePair::new(
                1,
                GatingKind::SoftmaxDense,
                ExpertFamily::Linear,
                ExpertFamily::Linear,
                vec![SharedAtom {
                    weight: 1.0,
                    expert_params: vec![2.0, 0.0],
                    variance: 0.2,
                }],
                vec![routed(-0.5, 5.0, [8.0, 2.0]), routed(0.5, 5.0, [-6.0, 1.0])],
            )?,
            LossKind::D2,
        ),
        3 => (
            MixingMeasurePair::new(
                1,
                GatingKind::NormalizedSigmoid,
                ExpertFamily::GeluOuterInnerBias,
                ExpertFamily::GeluOuterInner,
                vec![shared_gelu()],
                vec![routed(-0.5, 0.0, [4.0, -12.0]), routed(0.5, 0.0, [4.0, 12.0])],
            )?,
            LossKind::D3,
        ),
        4 => (
            MixingMeasurePair::new(
                1,
                GatingKind::NormalizedSigmoid,
                ExpertFamily::GeluOuterInnerBias,
                ExpertFamily::Linear,
                vec![shared_gelu()],
                vec![routed(-0.5, 5.0, [8.0, 2.0]), routed(0.5, 5.0, [-6.0, 1.0])],
            )?,
            LossKind::D4,
        ),
        _ => return Err(Error::invalid("theorem", format!("expected 1, 2, 3 or 4, got {which}"))),
    };
    Ok(ExperimentConfig {
        truth,
        fitted_k1: 2,
        fitted_k2: 3,
        loss,
        n_grid: Vec::new(),
        reps: 0,
        em: EMConfig {
            restarts: 1,
            param_bound: Some(20.0),
            ..EMConfig::default()
        },
        master_seed: 0,
        init_noise: Some(0.5),
    }
    .with_scale(Scale::Full))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n: usize,
    pub rep: usize,
    pub loss: f64,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
}

/// Samples, fits and scores one repetition.
pub fn run_single(cfg: &ExperimentConfig, n_index: usize, rep: usize) -> Result<RunRecord> {
    let n = cfg.n_grid[n_index];
    let seed = derive_seed(cfg.master_seed, n_index as u64, rep as u64);
    let data = sample_dataset(&cfg.truth, &SamplerConfig::new(n, seed))?;
    let em = EMConfig {
        seed: derive_seed(seed, 1, 0),
        ..cfg.em
    };
    let t = &cfg.truth;
    let fit = match cfg.init_noise {
        None => fit_mle(&data, cfg.fitted_k1, cfg.fitted_k2, t.shared_family, t.routed_family, t.gating, &em)?,
        Some(noise) => {
            let inits: Vec<MixingMeasurePair> = (0..em.restarts)
                .map(|r| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(em.seed, 2, r as u64));
                    perturbed_init(&mut rng, t, cfg.fitted_k1, cfg.fitted_k2, noise)
                })
                .collect();
            fit_best_of(&data, &inits, &em)?
        }
    };
    let aligned = align_gate_gauge(&fit.model, t)?;
    let loss = cfg.loss.evaluate(&aligned, t)?.loss;
    Ok(RunRecord {
        n,
        rep,
        loss,
        loglik: fit.final_loglik(),
        iterations: fit.iterations,
        converged: fit.converged,
        seed,
    })
}

/// Runs every `(n, rep)` pair, in parallel, returning records ordered by
/// `n` then repetition. A run that fails is recorded with a NaN loss and
/// `converged = false`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.n_grid.len()).flat_map(|i| (0..cfg.reps).map(move |r| (i, r))).collect();
    Ok(jobs
        .par_iter()
        .map(|&(i, r)| {
            run_single(cfg, i, r).unwrap_or_else(|_| RunRecord {
                n: cfg.n_grid[i],
                rep: r,
                loss: f64::NAN,
                loglik: f64::NAN,
                iterations: 0,
                converged: false,
                seed: derive_seed(cfg.master_seed, i as u64, r as u64),
            })
        })
        .collect())
}

/// Per-sample-size mean and standard deviation of finite losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(records: &[RunRecord]) -> Vec<LossSummary> {
    let mut ns: Vec<usize> = records.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .filter_map(|n| {
            let losses: Vec<f64> = records.iter().filter(|r| r.n == n && r.loss.is_finite()).map(|r| r.loss).collect();
            if losses.is_empty() {
                return None;
            }
            let k = losses.len() as f64;
            let mean = losses.iter().sum::<f64>() / k;
            let var = if losses.len() > 1 {
                losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (k - 1.0)
            } else {
                0.0
            };
            Some(LossSummary {
                n,
                mean,
                std: var.sqrt(),
                count: losses.len(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(log n, log mean loss)`, one point per
/// distinct `n`.
pub fn fit_loglog_slope(records: &[RunRecord]) -> Result<SlopeFit> {
    let points: Vec<(f64, f64)> = summarize(records)
        .into_iter()
        .filter(|s| s.mean > 0.0)
        .map(|s| ((s.n as f64).ln(), s.mean.ln()))
        .collect();
    if points.len() < 2 {
        return Err(Error::invalid("records", "need positive mean losses at two or more distinct sample sizes"));
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let stderr = if points.len() > 2 { (sse / (m - 2.0) / sxx).sqrt() } else { 0.0 };
    let r_squared = if syy > 0.0 { (1.0 - sse / syy).clamp(0.0, 1.0) } else { 1.0 };
    Ok(SlopeFit {
        slope,
        intercept,
        stderr,
        r_squared,
    })
}

/// Monte-Carlo estimate of `E_X[½∫|f_a(y|X) − f_b(y|X)| dy]` with `X`
/// uniform on `[-3, 3]ᵈ` and the inner integral computed by adaptive
/// Simpson quadrature on `[-y_halfwidth, y_halfwidth]`.
pub fn tv_distance(a: &MixingMeasurePair, b: &MixingMeasurePair, n_x: usize, y_halfwidth: f64, seed: u64) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    crate::error::check_len("input dimension", a.input_dim, b.input_dim)?;
    if n_x == 0 || !(y_halfwidth > 0.0) {
        return Err(Error::invalid("n_x", "need n_x >= 1 and a positive y half-width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut x = vec![0.0; a.input_dim];
    let mut sa = vec![0.0; a.num_components()];
    let mut sb = vec![0.0; b.num_components()];
    for _ in 0..n_x {
        x.iter_mut().for_each(|v| *v = rng.random_range(-3.0..3.0));
        let mut f = |y: f64| (a.log_density_unchecked(&x, y, &mut sa).exp() - b.log_density_unchecked(&x, y, &mut sb).exp()).abs();
        let panels = 400;
        let h = 2.0 * y_halfwidth / panels as f64;
        let mut integral = 0.0;
        for p in 0..panels {
            let lo = -y_halfwidth + p as f64 * h;
            integral += adaptive_simpson(&mut f, lo, lo + h, 1e-10, 30);
        }
        total += 0.5 * integral;
    }
    Ok((total / n_x as f64).clamp(0.0, 1.0))
}

fn adaptive_simpson(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Writes `n,rep,loss,loglik,iterations,converged,seed` rows.
pub fn export_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["n", "rep", "loss", "loglik", "iterations", "converged", "seed"])?;
    for r in records {
        w.write_record([
            r.n.to_string(),
            r.rep.to_string(),
            format!("{:.16e}", r.loss),
            format!("{:.16e}", r.loglik),
            r.iterations.to_string(),
            r.converged.to_string(),
            r.seed.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| Error::Parse {
            path: path.into(),
            line: row + 2,
            reason,
        };
        if rec.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", rec.len())));
        }
        let field = |i: usize| rec.get(i).unwrap_or_default().trim();
        let num = |i: usize| field(i).parse::<f64>().map_err(|_| bad(format!("invalid number `{}`", field(i))));
        let int = |i: usize| field(i).parse::<u64>().map_err(|_| bad(format!("invalid integer `{}`", field(i))));
        out.push(RunRecord {
            n: int(0)? as usize,
            rep: int(1)? as usize,
            loss: num(2)?,
            loglik: num(3)?,
            iterations: int(4)? as usize,
            converged: field(5).parse().map_err(|_| bad(format!("invalid flag `{}`", field(5))))?,
            seed: int(6)?,
        });
    }
    Ok(out)
}
