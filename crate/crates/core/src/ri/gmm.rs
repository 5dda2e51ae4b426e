//! One-dimensional Gaussian mixtures fitted by EM.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

pub const MAX_COMPONENTS: usize = 3;
pub const RESTARTS: usize = 5;
pub const MAX_ITER: usize = 500;
pub const TOL: f64 = 1e-8;
/// Smallest admissible mixing weight for k > 1.
pub const MIN_COMPONENT_WEIGHT: f64 = 0.1;
/// Smallest admissible effective count `n * weight` for k > 1.
pub const MIN_COMPONENT_COUNT: f64 = 3.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub weights: Vec<f64>,
    /// Component means, ascending.
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub loglik: f64,
    pub aic: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub model: GmmModel,
    /// Log-likelihood after every EM iteration of the winning restart.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub sd_floor: f64,
    pub warning: Option<String>,
}

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("k must be in 1..={MAX_COMPONENTS}, got {0}")]
    InvalidK(usize),
    #[error("degenerate fit: {n} values cannot support {k} components (need {need})", need = 3 * k)]
    Degenerate { n: usize, k: usize },
    #[error("non-finite input value")]
    NonFinite,
    #[error("every EM restart collapsed a component or left one below the minimum size")]
    Collapsed,
}

/// Free parameters of a 1-D mixture: k means, k SDs, k - 1 weights.
pub fn n_params(k: usize) -> usize {
    3 * k - 1
}

impl GmmModel {
    fn log_component(&self, j: usize, x: f64) -> f64 {
        let z = (x - self.means[j]) / self.sds[j];
        self.weights[j].ln() - self.sds[j].ln() - LN_SQRT_2PI - 0.5 * z * z
    }

    pub fn responsibilities(&self, x: f64) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.k).map(|j| self.log_component(j, x)).collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        logs.iter().map(|l| (l - m).exp() / s).collect()
    }

    /// Index of the maximum-responsibility component; ties go to the lower index.
    pub fn assign(&self, x: f64) -> usize {
        let r = self.responsibilities(x);
        let mut best = 0;
        for j in 1..self.k {
            if r[j] > r[best] {
                best = j;
            }
        }
        best
    }

    pub fn loglik_of(&self, xs: &[f64]) -> f64 {
        xs.iter()
            .map(|&x| {
                let logs: Vec<f64> = (0..self.k).map(|j| self.log_component(j, x)).collect();
                log_sum_exp(&logs)
            })
            .sum()
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

/// SD floor: `1e-4 * (range + eps)`, with `eps` a tiny fraction of the data
/// magnitude so the floor scales with the data.
pub fn sd_floor(xs: &[f64]) -> f64 {
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let absmax = lo.abs().max(hi.abs());
    let f = 1e-4 * ((hi - lo) + 1e-6 * absmax);
    if f > 0.0 {
        f
    } else {
        1e-10
    }
}

struct Params {
    weights: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
}

/// k-means++ seeding of the means; weights uniform, SDs at the pooled SD.
fn init_params<R: Rng>(xs: &[f64], k: usize, floor: f64, rng: &mut R) -> Params {
    let mut centers = vec![xs[rng.random_range(0..xs.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = xs
            .iter()
            .map(|&x| centers.iter().map(|c| (x - c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = xs.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..xs.len())
        };
        centers.push(xs[pick]);
    }
    let pooled = stats::sample_sd(xs).unwrap_or(0.0).max(floor);
    Params {
        weights: vec![1.0 / k as f64; k],
        means: centers,
        sds: vec![pooled; k],
    }
}

fn e_step(xs: &[f64], p: &Params, resp: &mut [Vec<f64>]) -> f64 {
    let k = p.means.len();
    let mut ll = 0.0;
    let mut logs = vec![0.0; k];
    for (i, &x) in xs.iter().enumerate() {
        for j in 0..k {
            let z = (x - p.means[j]) / p.sds[j];
            logs[j] = p.weights[j].ln() - p.sds[j].ln() - LN_SQRT_2PI - 0.5 * z * z;
        }
        let lse = log_sum_exp(&logs);
        ll += lse;
        for j in 0..k {
            resp[i][j] = (logs[j] - lse).exp();
        }
    }
    ll
}

/// Returns `false` when a component has lost all its mass.
fn m_step(xs: &[f64], resp: &[Vec<f64>], floor: f64, p: &mut Params) -> bool {
    let n = xs.len() as f64;
    for j in 0..p.means.len() {
        let nj: f64 = resp.iter().map(|r| r[j]).sum();
        if nj < 1e-10 {
            return false;
        }
        let mean = xs.iter().zip(resp).map(|(x, r)| r[j] * x).sum::<f64>() / nj;
        let var = xs.iter().zip(resp).map(|(x, r)| r[j] * (x - mean).powi(2)).sum::<f64>() / nj;
        p.weights[j] = nj / n;
        p.means[j] = mean;
        p.sds[j] = var.sqrt().max(floor);
    }
    true
}

struct Run {
    params: Params,
    loglik: f64,
    trace: Vec<f64>,
    converged: bool,
}

fn run_em<R: Rng>(xs: &[f64], k: usize, floor: f64, rng: &mut R) -> Option<Run> {
    let mut p = init_params(xs, k, floor, rng);
    let mut resp = vec![vec![0.0; k]; xs.len()];
    let mut prev = e_step(xs, &p, &mut resp);
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..MAX_ITER {
        if !m_step(xs, &resp, floor, &mut p) {
            return None;
        }
        let ll = e_step(xs, &p, &mut resp);
        debug_assert!(ll >= prev - 1e-9 * prev.abs().max(1.0), "EM loglik decreased: {prev} -> {ll}");
        trace.push(ll);
        let delta = ll - prev;
        prev = ll;
        if delta.abs() < TOL {
            converged = true;
            break;
        }
    }
    Some(Run {
        params: p,
        loglik: prev,
        trace,
        converged,
    })
}

/// Mixtures with a near-empty component are spikes on a handful of points
/// rather than structure; such restarts are discarded.
fn admissible(weights: &[f64], n: usize) -> bool {
    weights
        .iter()
        .all(|&w| w >= MIN_COMPONENT_WEIGHT && w * n as f64 >= MIN_COMPONENT_COUNT)
}

/// Fits a `k`-component mixture by EM, keeping the best of [`RESTARTS`]
/// k-means++ initializations by log-likelihood.
pub fn fit_gmm_em(values: &[f64], k: usize, seed: u64) -> Result<GmmFit, GmmError> {
    if !(1..=MAX_COMPONENTS).contains(&k) {
        return Err(GmmError::InvalidK(k));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GmmError::NonFinite);
    }
    let n = values.len();
    if n < 3 * k {
        return Err(GmmError::Degenerate { n, k });
    }
    let floor = sd_floor(values);

    if values.iter().all(|&v| v == values[0]) {
        let mut model = GmmModel {
            k: 1,
            weights: vec![1.0],
            means: vec![values[0]],
            sds: vec![floor],
            loglik: 0.0,
            aic: 0.0,
            n,
        };
        model.loglik = model.loglik_of(values);
        model.aic = 2.0 * n_params(1) as f64 - 2.0 * model.loglik;
        return Ok(GmmFit {
            model,
            trace: vec![],
            converged: true,
            sd_floor: floor,
            warning: Some(format!("all {n} values identical; single-point model with floored sd")),
        });
    }

    let mut best: Option<Run> = None;
    for r in 0..RESTARTS {
        let mut rng = stats::rng(stats::derive_seed(seed, r as u64));
        if let Some(run) = run_em(values, k, floor, &mut rng) {
            if k > 1 && !admissible(&run.params.weights, n) {
                continue;
            }
            if best.as_ref().is_none_or(|b| run.loglik > b.loglik) {
                best = Some(run);
            }
        }
    }
    let run = best.ok_or(GmmError::Collapsed)?;

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| run.params.means[a].total_cmp(&run.params.means[b]));
    let weights: Vec<f64> = order.iter().map(|&j| run.params.weights[j]).collect();
    let wsum: f64 = weights.iter().sum();
    let model = GmmModel {
        k,
        weights: weights.iter().map(|w| w / wsum).collect(),
        means: order.iter().map(|&j| run.params.means[j]).collect(),
        sds: order.iter().map(|&j| run.params.sds[j]).collect(),
        loglik: run.loglik,
        aic: 2.0 * n_params(k) as f64 - 2.0 * run.loglik,
        n,
    };
    Ok(GmmFit {
        model,
        trace: run.trace,
        converged: run.converged,
        sd_floor: floor,
        warning: None,
    })
}
