//! Cox proportional hazards with Breslow ties, Harrell's concordance and
//! cumulative/dynamic time-dependent AUC.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{bh_fdr, bootstrap_ci, EvalError};
use crate::stats;

pub const MAX_NEWTON_ITER: usize = 100;
pub const TD_AUC_YEARS: [f64; 4] = [1.0, 3.0, 5.0, 10.0];
pub const TRAIN_FRACTION: f64 = 0.6;
const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxRow {
    pub id: String,
    pub flag: bool,
    pub age: f64,
    pub male: bool,
    pub event: bool,
    pub time_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxModelFit {
    pub beta: Vec<f64>,
    pub se: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    /// Partial log-likelihood after every accepted step, starting at beta = 0.
    pub trace: Vec<f64>,
}

struct Eval {
    ll: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

/// Breslow partial log-likelihood with gradient and Hessian. `order` sorts
/// rows by decreasing time.
fn partial(x: &DMatrix<f64>, time: &[f64], event: &[bool], order: &[usize], beta: &DVector<f64>) -> Eval {
    let p = x.ncols();
    let eta = x * beta;
    let c = eta.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(p, p);
    let mut ll = 0.0;
    let mut grad = DVector::zeros(p);
    let mut hess = DMatrix::zeros(p, p);
    let mut i = 0;
    while i < order.len() {
        let t = time[order[i]];
        let mut j = i;
        while j < order.len() && time[order[j]] == t {
            let r = order[j];
            let w = (eta[r] - c).exp();
            let xr = x.row(r).transpose();
            s0 += w;
            s1 += &xr * w;
            s2 += &xr * xr.transpose() * w;
            j += 1;
        }
        let mut d = 0.0;
        for &r in &order[i..j] {
            if event[r] {
                d += 1.0;
                ll += eta[r];
                grad += x.row(r).transpose();
            }
        }
        if d > 0.0 {
            ll -= d * (s0.ln() + c);
            let m = &s1 / s0;
            grad -= &m * d;
            hess -= (&s2 / s0 - &m * m.transpose()) * d;
        }
        i = j;
    }
    Eval { ll, grad, hess }
}

/// Maximizes the partial likelihood by Newton-Raphson with step halving.
/// Covariates are centered internally; coefficients are unaffected.
pub fn cox_newton(rows: &[Vec<f64>], time: &[f64], event: &[bool]) -> Result<CoxModelFit, EvalError> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n == 0 || p == 0 || time.len() != n || event.len() != n {
        return Err(EvalError::Invalid("design, times and events must be non-empty and aligned".into()));
    }
    if event.iter().filter(|&&e| e).count() < 2 {
        return Err(EvalError::TooFew("need at least two events".into()));
    }
    let mut x = DMatrix::from_fn(n, p, |r, c| rows[r][c]);
    for c in 0..p {
        let m = x.column(c).mean();
        x.column_mut(c).add_scalar_mut(-m);
        if x.column(c).iter().all(|v| v.abs() <= 1e-12 * (1.0 + m.abs())) {
            return Err(EvalError::ConstantCovariate(format!("column {c}")));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]).then(a.cmp(&b)));

    let mut beta = DVector::zeros(p);
    let mut cur = partial(&x, time, event, &order, &beta);
    let mut trace = vec![cur.ll];
    for it in 1..=MAX_NEWTON_ITER {
        let info = -&cur.hess;
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&cur.grad),
            None => match info.lu().solve(&cur.grad) {
                Some(s) => s,
                None => {
                    return Err(EvalError::NonConvergence {
                        iterations: it,
                        grad_norm: cur.grad.norm(),
                    })
                }
            },
        };
        let mut scale = 1.0;
        let mut next;
        loop {
            let cand = &beta + &step * scale;
            next = partial(&x, time, event, &order, &cand);
            if next.ll.is_finite() && next.ll >= cur.ll {
                beta = cand;
                break;
            }
            scale *= 0.5;
            if scale < 1e-10 {
                // no ascent along the Newton direction: at the optimum to machine precision
                next = partial(&x, time, event, &order, &beta);
                break;
            }
        }
        let gain = next.ll - cur.ll;
        cur = next;
        trace.push(cur.ll);
        let small_step = step.amax() * scale < 1e-10;
        if gain.abs() <= 1e-12 * (1.0 + cur.ll.abs()) || small_step || cur.grad.amax() < 1e-10 {
            let info = -&cur.hess;
            let cov = info.clone().try_inverse().ok_or(EvalError::NonConvergence {
                iterations: it,
                grad_norm: cur.grad.norm(),
            })?;
            let se = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
            return Ok(CoxModelFit {
                beta: beta.iter().copied().collect(),
                se,
                loglik: cur.ll,
                iterations: it,
                trace,
            });
        }
    }
    Err(EvalError::NonConvergence {
        iterations: MAX_NEWTON_ITER,
        grad_norm: cur.grad.norm(),
    })
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn below(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

fn dense_ranks(v: &[f64]) -> (Vec<usize>, usize) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| a.total_cmp(b));
    u.dedup();
    let r = v
        .iter()
        .map(|x| u.partition_point(|y| y.total_cmp(x).is_lt()))
        .collect();
    (r, u.len())
}

/// Harrell's C: over pairs with `t_i < t_j` and an event at `t_i`, the
/// fraction where the earlier failure has the higher risk, risk ties ½.
pub fn concordance_index(time: &[f64], event: &[bool], risk: &[f64]) -> Option<f64> {
    let n = time.len();
    let (rank, k) = dense_ranks(risk);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let mut tree = Fenwick(vec![0; k + 1]);
    let mut counts = vec![0u64; k];
    let (mut conc, mut tied, mut comparable) = (0u64, 0u64, 0u64);
    let mut inserted = 0u64;
    let mut i = 0;
    while i < n {
        let t = time[order[i]];
        let mut j = i;
        while j < n && time[order[j]] == t {
            j += 1;
        }
        for &r in &order[i..j] {
            if event[r] {
                comparable += inserted;
                conc += tree.below(rank[r]);
                tied += counts[rank[r]];
            }
        }
        for &r in &order[i..j] {
            tree.add(rank[r]);
            counts[rank[r]] += 1;
            inserted += 1;
        }
        i = j;
    }
    (comparable > 0).then(|| (2 * conc + tied) as f64 / (2 * comparable) as f64)
}

/// Cumulative/dynamic AUC at `horizon_days`: cases fail by the horizon,
/// controls are still at risk after it, earlier censorings are left out.
pub fn td_auc(time: &[f64], event: &[bool], risk: &[f64], horizon_days: f64) -> Option<f64> {
    let mut controls: Vec<f64> = Vec::new();
    let mut cases: Vec<f64> = Vec::new();
    for i in 0..time.len() {
        if time[i] > horizon_days {
            controls.push(risk[i]);
        } else if event[i] {
            cases.push(risk[i]);
        }
    }
    if cases.is_empty() || controls.is_empty() {
        return None;
    }
    controls.sort_by(|a, b| a.total_cmp(b));
    let mut score = 0.0;
    for c in &cases {
        let below = controls.partition_point(|x| x < c);
        let upto = controls.partition_point(|x| x <= c);
        score += below as f64 + 0.5 * (upto - below) as f64;
    }
    Some(score / (cases.len() * controls.len()) as f64)
}

/// Train/test indices stratified by event status and one-year event-time
/// bin; inside a stratum rows are ordered by a seeded hash of the id.
pub fn stratified_split(rows: &[CoxRow], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut strata: BTreeMap<(bool, i64), Vec<usize>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let bin = (r.time_days / DAYS_PER_YEAR).floor() as i64;
        strata.entry((r.event, bin)).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for idx in strata.values_mut() {
        idx.sort_by_key(|&i| (stats::derive_seed(seed, stats::fnv1a(rows[i].id.as_bytes())), i));
        let cut = (TRAIN_FRACTION * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdAuc {
    pub years: f64,
    pub auc: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoxResult {
    pub analyte: String,
    pub outcome: String,
    /// Names of the fitted coefficients, the abnormality flag first.
    pub covariates: Vec<String>,
    pub beta: Vec<f64>,
    pub hr: f64,
    pub hr_ci: (f64, f64),
    pub p_value: f64,
    pub p_adjusted: Option<f64>,
    pub c_index: Option<f64>,
    pub c_index_ci: Option<(f64, f64)>,
    pub td_auc: Vec<TdAuc>,
    pub n_train: usize,
    pub n_test: usize,
    pub events_train: usize,
    pub events_test: usize,
}

/// Flag-plus-age-and-sex model fitted on the 60% split and scored on the
/// 40% split. Age or sex columns that are constant in the training split are
/// dropped; a constant flag is an error.
pub fn cox_fit(rows: &[CoxRow], analyte: &str, outcome: &str, seed: u64, resamples: usize) -> Result<CoxResult, EvalError> {
    if rows.iter().all(|r| r.flag == rows[0].flag) {
        return Err(EvalError::ConstantCovariate("flag".into()));
    }
    let (train, test) = stratified_split(rows, seed);
    let events = |idx: &[usize]| idx.iter().filter(|&&i| rows[i].event).count();
    let (events_train, events_test) = (events(&train), events(&test));
    if events_train == 0 {
        return Err(EvalError::NoEvents("train"));
    }
    if events_test == 0 {
        return Err(EvalError::NoEvents("test"));
    }
    let col = |r: &CoxRow, c: &str| match c {
        "flag" => f64::from(u8::from(r.flag)),
        "age" => r.age,
        _ => f64::from(u8::from(r.male)),
    };
    let mut covariates = vec!["flag".to_string()];
    for c in ["age", "male"] {
        let first = col(&rows[train[0]], c);
        if train.iter().any(|&i| col(&rows[i], c) != first) {
            covariates.push(c.into());
        } else {
            log::warn!("cox {analyte}/{outcome}: {c} constant in training split, dropped");
        }
    }
    if train.iter().all(|&i| rows[i].flag == rows[train[0]].flag) {
        return Err(EvalError::ConstantCovariate("flag".into()));
    }
    let design = |idx: &[usize]| -> Vec<Vec<f64>> {
        idx.iter()
            .map(|&i| covariates.iter().map(|c| col(&rows[i], c)).collect())
            .collect()
    };
    let fit = cox_newton(
        &design(&train),
        &train.iter().map(|&i| rows[i].time_days).collect::<Vec<_>>(),
        &train.iter().map(|&i| rows[i].event).collect::<Vec<_>>(),
    )?;
    let (b, se) = (fit.beta[0], fit.se[0]);
    let z = b / se;
    let p_value = statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2);

    let tx = design(&test);
    let risk: Vec<f64> = tx.iter().map(|x| x.iter().zip(&fit.beta).map(|(a, b)| a * b).sum()).collect();
    let time: Vec<f64> = test.iter().map(|&i| rows[i].time_days).collect();
    let event: Vec<bool> = test.iter().map(|&i| rows[i].event).collect();
    let pick = |idx: &[usize]| {
        (
            idx.iter().map(|&i| time[i]).collect::<Vec<_>>(),
            idx.iter().map(|&i| event[i]).collect::<Vec<_>>(),
            idx.iter().map(|&i| risk[i]).collect::<Vec<_>>(),
        )
    };
    let c_index = concordance_index(&time, &event, &risk);
    let c_index_ci = bootstrap_ci(test.len(), resamples, seed, |idx| {
        let (t, e, r) = pick(idx);
        concordance_index(&t, &e, &r)
    });
    let td = TD_AUC_YEARS
        .iter()
        .enumerate()
        .map(|(k, &years)| {
            let h = years * DAYS_PER_YEAR;
            TdAuc {
                years,
                auc: td_auc(&time, &event, &risk, h),
                ci: bootstrap_ci(test.len(), resamples, stats::derive_seed(seed, k as u64 + 1), |idx| {
                    let (t, e, r) = pick(idx);
                    td_auc(&t, &e, &r, h)
                }),
            }
        })
        .collect();
    Ok(CoxResult {
        analyte: analyte.into(),
        outcome: outcome.into(),
        covariates,
        beta: fit.beta.clone(),
        hr: b.exp(),
        hr_ci: ((b - 1.96 * se).exp(), (b + 1.96 * se).exp()),
        p_value,
        p_adjusted: None,
        c_index,
        c_index_ci,
        td_auc: td,
        n_train: train.len(),
        n_test: test.len(),
        events_train,
        events_test,
    })
}

/// Fills `p_adjusted` across `results` with Benjamini-Hochberg.
pub fn adjust_p_values(results: &mut [CoxResult]) {
    let p: Vec<f64> = results.iter().map(|r| r.p_value).collect();
    for (r, a) in results.iter_mut().zip(bh_fdr(&p)) {
        r.p_adjusted = Some(a);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_c(time: &[f64], event: &[bool], risk: &[f64]) -> Option<f64> {
        let (mut num, mut den) = (0u64, 0u64);
        for i in 0..time.len() {
            for j in 0..time.len() {
                if event[i] && time[i] < time[j] {
                    den += 2;
                    num += match risk[i].total_cmp(&risk[j]) {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        (den > 0).then(|| num as f64 / den as f64)
    }

    #[test]
    fn fenwick_c_matches_brute_force_with_ties() {
        let mut rng = stats::rng(4);
        for _ in 0..20 {
            let n = rng.random_range(2..200);
            let time: Vec<f64> = (0..n).map(|_| rng.random_range(0..30) as f64).collect();
            let event: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.6).collect();
            let risk: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
            assert_eq!(concordance_index(&time, &event, &risk), brute_c(&time, &event, &risk));
        }
    }

    #[test]
    fn newton_trace_non_decreasing() {
        let mut rng = stats::rng(8);
        let n = 300;
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![f64::from(rng.random::<bool>() as u8), rng.random_range(40.0..80.0)]).collect();
        let time: Vec<f64> = x.iter().map(|r| -rng.random::<f64>().ln() / (0.01 * (0.7 * r[0]).exp())).collect();
        let event: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
        let fit = cox_newton(&x, &time, &event).unwrap();
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(fit.se.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn constant_flag_is_rejected() {
        let rows: Vec<CoxRow> = (0..10)
            .map(|i| CoxRow {
                id: format!("p{i}"),
                flag: true,
                age: 50.0 + i as f64,
                male: i % 2 == 0,
                event: i % 2 == 1,
                time_days: 100.0 * i as f64,
            })
            .collect();
        assert!(matches!(cox_fit(&rows, "GLU", "death", 1, 10), Err(EvalError::ConstantCovariate(_))));
    }

    #[test]
    fn td_auc_perfect_and_split_sizes() {
        let time = [100.0, 200.0, 800.0, 900.0];
        let event = [true, true, false, true];
        let risk = [3.0, 2.0, 1.0, 0.0];
        assert_eq!(td_auc(&time, &event, &risk, 365.25), Some(1.0));
        let rows: Vec<CoxRow> = (0..100)
            .map(|i| CoxRow {
                id: format!("p{i}"),
                flag: i % 3 == 0,
                age: 50.0,
                male: true,
                event: i % 2 == 0,
                time_days: 10.0 * i as f64,
            })
            .collect();
        let (tr, te) = stratified_split(&rows, 3);
        assert_eq!(tr.len() + te.len(), 100);
        assert!((tr.len() as f64 - 60.0).abs() <= 4.0);
    }
}
