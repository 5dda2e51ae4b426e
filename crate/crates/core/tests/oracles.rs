use norma_core::analytes::AnalyteTable;
use norma_core::eval::{bh_fdr, concordance_index, confusion_metrics, cox_newton, individuality_index, wilson_interval, Confusion};
use norma_core::stats;
use norma_core::synth::{generate, CohortSpec};
use rand::Rng;
use rand_distr::{Distribution, Exp};

fn spec(json: serde_json::Value) -> CohortSpec {
    serde_json::from_value(json).unwrap()
}

#[test]
fn synthetic_patient_means_spread_with_the_between_sd() {
    let s = spec(serde_json::json!({
        "n_patients": 1000, "seed": 4,
        "analytes": [{"code": "GLU", "pop_mean": 95.0, "between_sd": 12.0, "within_sd": 3.0}],
        "count": {"min": 20, "max": 40}, "spacing_days": {"min": 30, "max": 90}
    }));
    let c = generate(AnalyteTable::shipped(), &s).unwrap();
    let means: Vec<f64> = c.series.iter().map(|s| stats::mean(&s.values()).unwrap()).collect();
    let sd = stats::sample_sd(&means).unwrap();
    assert!((sd / 12.0 - 1.0).abs() < 0.05, "sd of means {sd}");
}

#[test]
fn synthetic_event_rate_matches_the_analytic_rate() {
    for outcome in [
        serde_json::json!({"kind": "logistic", "name": "death", "intercept": -1.5, "drift_coef": 1.0, "setpoint_coef": 0.5, "follow_up_days": 3650}),
        serde_json::json!({"kind": "proportional_hazards", "name": "death", "base_rate_per_year": 0.05, "log_hr_drift": 0.7, "setpoint_coef": 0.3, "censor_max_days": 3650}),
    ] {
        let s = spec(serde_json::json!({
            "n_patients": 2000, "seed": 9,
            "analytes": [{"code": "HGB", "pop_mean": 14.0, "between_sd": 1.0, "within_sd": 0.5}],
            "count": {"min": 3, "max": 6}, "spacing_days": {"min": 60, "max": 120},
            "drift": {"fraction": 0.2, "slope_sd_per_year": 0.3},
            "outcome": outcome
        }));
        let c = generate(AnalyteTable::shipped(), &s).unwrap();
        let p = c.truth.expected_event_rate.unwrap();
        let n = c.outcomes.len() as f64;
        let events = c.outcomes.values().filter(|m| m["death"].event).count() as f64;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((events / n - p).abs() < 2.0 * se, "rate {} vs {p} (se {se})", events / n);
    }
}

#[test]
fn synthetic_individuality_index_is_recovered() {
    let s = spec(serde_json::json!({
        "n_patients": 800, "seed": 5,
        "analytes": [{"code": "ALB", "pop_mean": 100.0, "between_sd": 20.0, "within_sd": 4.0}],
        "count": {"min": 10, "max": 30}, "spacing_days": {"min": 30, "max": 200}
    }));
    let c = generate(AnalyteTable::shipped(), &s).unwrap();
    assert!((c.truth.individuality_index["ALB"] - 0.2).abs() < 1e-12);
    let vals: Vec<Vec<f64>> = c.series.iter().map(|s| s.values()).collect();
    let ii = individuality_index(&vals, 0, 1).unwrap();
    assert!((ii.ii - 0.2).abs() < 0.05, "II {}", ii.ii);
}

/// Breslow log partial likelihood of one covariate, evaluated directly by
/// scanning event times from the latest down.
fn breslow_loglik(beta: f64, x: &[f64], time: &[f64], event: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| time[b].total_cmp(&time[a]));
    let (mut ll, mut risk, mut k) = (0.0, 0.0, 0);
    while k < order.len() {
        let t = time[order[k]];
        let mut tied = k;
        while tied < order.len() && time[order[tied]] == t {
            risk += (beta * x[order[tied]]).exp();
            tied += 1;
        }
        for &i in &order[k..tied] {
            if event[i] {
                ll += beta * x[i] - risk.ln();
            }
        }
        k = tied;
    }
    ll
}

#[test]
fn cox_estimate_matches_a_grid_search_oracle() {
    let n = 2000;
    let mut rng = stats::rng(17);
    let (mut x, mut time, mut event) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let flag = rng.random_bool(0.5);
        let rate = 0.1 * if flag { 2.0 } else { 1.0 };
        let t: f64 = Exp::new(rate).unwrap().sample(&mut rng);
        let c: f64 = rng.random_range(0.0..14.0);
        x.push(if flag { 1.0 } else { 0.0 });
        // day resolution, so ties occur
        time.push((t.min(c) * 365.0).ceil());
        event.push(t <= c);
    }
    let censored = event.iter().filter(|e| !**e).count() as f64 / n as f64;
    assert!((0.3..0.5).contains(&censored), "censoring {censored}");

    let (mut best, mut best_ll) = (0.0, f64::NEG_INFINITY);
    for k in 0..=2000 {
        let b = k as f64 * 0.001;
        let ll = breslow_loglik(b, &x, &time, &event);
        if ll > best_ll {
            (best, best_ll) = (b, ll);
        }
    }
    let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
    let fit = cox_newton(&rows, &time, &event).unwrap();
    assert!((fit.beta[0] - best).abs() < 0.15, "newton {} grid {best}", fit.beta[0]);
    assert!((fit.beta[0] - best).abs() < 2e-3);
    assert!((fit.loglik - breslow_loglik(fit.beta[0], &x, &time, &event)).abs() < 1e-6 * best_ll.abs());
    assert!((best - 2f64.ln()).abs() < 0.15, "grid optimum {best}");
}

fn brute_c(time: &[f64], event: &[bool], risk: &[f64]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..time.len() {
        for j in 0..time.len() {
            if event[i] && time[i] < time[j] {
                den += 1.0;
                if risk[i] > risk[j] {
                    num += 1.0;
                } else if risk[i] == risk[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

#[test]
fn c_index_equals_pair_counting() {
    for seed in 0..20 {
        let mut rng = stats::rng(seed);
        let n = rng.random_range(2..=200);
        let time: Vec<f64> = (0..n).map(|_| rng.random_range(1..60) as f64).collect();
        let event: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let risk: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        assert_eq!(concordance_index(&time, &event, &risk), brute_c(&time, &event, &risk), "seed {seed}");
    }
}

#[test]
fn c_index_of_a_random_score_is_one_half() {
    // at n = 3000 the null SD is about 0.011; 20k keeps 0.03 beyond 5 SD
    let mut rng = stats::rng(3);
    let n = 20_000;
    let time: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1000.0)).collect();
    let event: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let risk: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let c = concordance_index(&time, &event, &risk).unwrap();
    assert!((c - 0.5).abs() < 0.03, "{c}");
}

#[test]
fn wilson_matches_the_score_quadratic() {
    for (k, n) in [(0usize, 10usize), (3, 10), (20, 100), (57, 60), (60, 60), (1, 1000)] {
        let z = 1.959963984540054;
        let p = k as f64 / n as f64;
        let nz = n as f64;
        // (p - P)^2 = z^2 P (1 - P) / n
        let a = 1.0 + z * z / nz;
        let b = -(2.0 * p + z * z / nz);
        let c = p * p;
        let disc = (b * b - 4.0 * a * c).sqrt();
        let (lo, hi) = ((-b - disc) / (2.0 * a), (-b + disc) / (2.0 * a));
        let (wl, wh) = wilson_interval(k, n, z).unwrap();
        assert!((wl - lo.max(0.0)).abs() < 1e-10, "{k}/{n}: {wl} vs {lo}");
        assert!((wh - hi.min(1.0)).abs() < 1e-10, "{k}/{n}: {wh} vs {hi}");
    }
}

#[test]
fn bh_matches_the_step_up_definition() {
    let p = [0.012, 0.3, 0.001, 0.04, 0.049, 0.6, 0.0105];
    let m = p.len() as f64;
    let adj = bh_fdr(&p);
    for i in 0..p.len() {
        // min over j with p_j >= p_i of p_j * m / rank_j
        let want = (0..p.len())
            .filter(|&j| p[j] >= p[i])
            .map(|j| {
                let rank = p.iter().filter(|&&q| q <= p[j]).count() as f64;
                p[j] * m / rank
            })
            .fold(1.0f64, f64::min);
        assert!((adj[i] - want).abs() < 1e-10, "{i}: {} vs {want}", adj[i]);
    }
}

#[test]
fn ppv_of_an_independent_flag_is_the_event_rate() {
    let mut rng = stats::rng(12);
    let n = 20_000;
    let pi = 0.15;
    let pairs: Vec<(bool, bool)> = (0..n).map(|_| (rng.random_bool(0.3), rng.random_bool(pi))).collect();
    let c = Confusion::from_pairs(pairs.iter().copied());
    let m = confusion_metrics(c);
    let flagged = (c.tp + c.fp) as f64;
    let se = (pi * (1.0 - pi) / flagged).sqrt();
    assert!((m.ppv.unwrap() - pi).abs() < 3.0 * se, "ppv {:?}", m.ppv);
    assert!((m.balanced_accuracy.unwrap() - 0.5).abs() < 0.03);
}
