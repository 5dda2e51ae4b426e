use serde::{Deserialize, Serialize};

use super::EvalError;

pub const Z95: f64 = 1.96;

/// Minimum observations per analyte for the deviation-mortality bins.
pub const MIN_DEVIATION_OBS: usize = 20;

/// Wilson score interval for `k` successes in `n` trials, clamped to `[0, 1]`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> Option<(f64, f64)> {
    if n == 0 || k > n {
        return None;
    }
    let (kf, nf) = (k as f64, n as f64);
    let z2 = z * z;
    let denom = nf + z2;
    let center = (kf + z2 / 2.0) / denom;
    let half = z / denom * (kf * (nf - kf) / nf + z2 / 4.0).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    Some((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRate {
    pub bin: usize,
    pub lower_edge: f64,
    pub upper_edge: f64,
    pub n: usize,
    pub events: usize,
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Equal-frequency bins of `scores` (deciles or quintiles) with the event
/// rate and Wilson interval per bin. Non-finite scores are dropped first.
pub fn deviation_mortality(scores: &[f64], events: &[bool], n_bins: usize) -> Result<Vec<BinRate>, EvalError> {
    if scores.len() != events.len() || n_bins == 0 {
        return Err(EvalError::Invalid("scores and events differ in length".into()));
    }
    let mut pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(events)
        .filter(|(s, _)| s.is_finite())
        .map(|(&s, &e)| (s, e))
        .collect();
    let n = pairs.len();
    if n < MIN_DEVIATION_OBS {
        return Err(EvalError::TooFew(format!("{n} observations, need {MIN_DEVIATION_OBS}")));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let bins = n_bins.min(n);
    Ok((0..bins)
        .map(|b| {
            let (s, e) = (b * n / bins, (b + 1) * n / bins);
            let slice = &pairs[s..e];
            let k = slice.iter().filter(|p| p.1).count();
            let (ci_low, ci_high) = wilson_interval(k, slice.len(), Z95).expect("non-empty bin");
            BinRate {
                bin: b,
                lower_edge: slice[0].0,
                upper_edge: slice[slice.len() - 1].0,
                n: slice.len(),
                events: k,
                rate: k as f64 / slice.len() as f64,
                ci_low,
                ci_high,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Confusion::default();
        for (flag, event) in pairs {
            match (flag, event) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }
}

/// Undefined cells (zero denominator) are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub ppv: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub counts: Confusion,
}

fn ratio(a: usize, b: usize) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

pub fn confusion_metrics(c: Confusion) -> ConfusionMetrics {
    let sensitivity = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    ConfusionMetrics {
        ppv: ratio(c.tp, c.tp + c.fp),
        sensitivity,
        specificity,
        balanced_accuracy: sensitivity.zip(specificity).map(|(a, b)| (a + b) / 2.0),
        counts: c,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson_interval(0, 10, Z95).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 0.2775).abs() < 5e-4, "{hi}");
        let (lo, hi) = wilson_interval(13, 100, Z95).unwrap();
        assert!((lo - 0.0776).abs() < 5e-4 && (hi - 0.2098).abs() < 5e-4, "{lo} {hi}");
        assert_eq!(wilson_interval(7, 7, Z95).unwrap().1, 1.0);
    }

    #[test]
    fn wilson_shrinks_with_n() {
        let w = |n: usize| {
            let (lo, hi) = wilson_interval(n / 5, n, Z95).unwrap();
            assert!(lo <= 0.2 && 0.2 <= hi && lo >= 0.0 && hi <= 1.0);
            hi - lo
        };
        assert!(w(10) > w(100) && w(100) > w(1000));
    }

    #[test]
    fn confusion_hand_table() {
        let m = confusion_metrics(Confusion { tp: 16, fp: 84, fn_: 48, tn: 352 });
        assert!((m.ppv.unwrap() - 0.16).abs() < 1e-12);
        assert!((m.sensitivity.unwrap() - 0.25).abs() < 1e-12);
        assert!((m.specificity.unwrap() - 352.0 / 436.0).abs() < 1e-12);
        assert!((m.specificity.unwrap() - 0.807).abs() < 1e-3);
        let perfect = confusion_metrics(Confusion::from_pairs([(true, true), (false, false)]));
        assert_eq!(perfect.balanced_accuracy, Some(1.0));
        assert_eq!(perfect.ppv, Some(1.0));
        let none = confusion_metrics(Confusion::from_pairs([(false, false)]));
        assert_eq!((none.ppv, none.sensitivity), (None, None));
    }

    #[test]
    fn decile_bins() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let events: Vec<bool> = (0..100).map(|i| i >= 90).collect();
        let bins = deviation_mortality(&scores, &events, 10).unwrap();
        assert_eq!(bins.len(), 10);
        assert!(bins.iter().all(|b| b.n == 10));
        assert_eq!(bins[9].rate, 1.0);
        assert_eq!(bins[9].ci_high, 1.0);
        assert_eq!(bins[0].events, 0);
        assert!(deviation_mortality(&scores[..19], &events[..19], 10).is_err());
    }
}
