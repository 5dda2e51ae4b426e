use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::stats;

pub const DEFAULT_AR_ORDER: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Last,
    PatientMean,
    Ar,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Last, BaselineKind::PatientMean, BaselineKind::Ar];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Last => "last",
            BaselineKind::PatientMean => "patient_mean",
            BaselineKind::Ar => "ar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineForecast {
    pub value: f64,
    /// The AR fit was not possible and the patient mean was used instead.
    pub fell_back: bool,
}

/// Conditional least squares AR(p) coefficients on the demeaned series,
/// without intercept. `None` with fewer than `p + 2` points; a singular
/// design gives all-zero coefficients.
pub fn fit_ar(values: &[f64], p: usize) -> Option<Vec<f64>> {
    let n = values.len();
    if p == 0 || n < p + 2 {
        return None;
    }
    let mu = stats::mean(values)?;
    let x: Vec<f64> = values.iter().map(|v| v - mu).collect();
    let rows = n - p;
    let design = DMatrix::from_fn(rows, p, |r, c| x[r + p - 1 - c]);
    let target = DVector::from_fn(rows, |r, _| x[r + p]);
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * target;
    let scale = xtx.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if scale <= 0.0 {
        return Some(vec![0.0; p]);
    }
    match xtx.cholesky() {
        Some(ch) => {
            let phi = ch.solve(&xty);
            if phi.iter().all(|v| v.is_finite()) {
                Some(phi.iter().copied().collect())
            } else {
                Some(vec![0.0; p])
            }
        }
        None => Some(vec![0.0; p]),
    }
}

/// One-step point forecast from a baseline series, treated as equally spaced.
pub fn baseline_predict(kind: BaselineKind, values: &[f64], ar_order: usize) -> Option<BaselineForecast> {
    let last = *values.last()?;
    let mean = stats::mean(values)?;
    let f = |value, fell_back| Some(BaselineForecast { value, fell_back });
    match kind {
        BaselineKind::Last => f(last, false),
        BaselineKind::PatientMean => f(mean, false),
        BaselineKind::Ar => match fit_ar(values, ar_order) {
            None => f(mean, true),
            Some(phi) => {
                let n = values.len();
                let pred = mean
                    + phi
                        .iter()
                        .enumerate()
                        .map(|(i, c)| c * (values[n - 1 - i] - mean))
                        .sum::<f64>();
                f(pred, false)
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn simple_baselines() {
        let v = [3.0, 5.0, 7.0];
        assert_eq!(baseline_predict(BaselineKind::Last, &v, 2).unwrap().value, 7.0);
        assert_eq!(baseline_predict(BaselineKind::PatientMean, &v, 2).unwrap().value, 5.0);
        let ar = baseline_predict(BaselineKind::Ar, &v, 2).unwrap();
        assert!(ar.fell_back);
        assert_eq!(ar.value, 5.0);
        assert!(baseline_predict(BaselineKind::Last, &[], 2).is_none());
    }

    #[test]
    fn constant_series_is_fixed_point() {
        let v = [42.0; 12];
        let ar = baseline_predict(BaselineKind::Ar, &v, 2).unwrap();
        assert!(!ar.fell_back);
        assert_eq!(ar.value, 42.0);
    }

    #[test]
    fn ar1_coefficient_recovered() {
        let mut rng = stats::rng(9);
        let e = Normal::new(0.0, 1.0).unwrap();
        let mut x = vec![0.0];
        for _ in 1..200 {
            let prev = *x.last().unwrap();
            x.push(0.8 * prev + e.sample(&mut rng));
        }
        let phi = fit_ar(&x, 1).unwrap()[0];
        // closed-form CLS on the demeaned series
        let m = stats::mean(&x).unwrap();
        let d: Vec<f64> = x.iter().map(|v| v - m).collect();
        let num: f64 = (1..d.len()).map(|t| d[t] * d[t - 1]).sum();
        let den: f64 = (1..d.len()).map(|t| d[t - 1] * d[t - 1]).sum();
        assert!((phi - num / den).abs() < 1e-10);
        assert!((phi - 0.8).abs() < 0.1, "{phi}");
    }
}
