use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    /// `None` when the actuals have zero variance.
    pub r2: Option<f64>,
    pub n: usize,
}

pub fn forecast_metrics(pred: &[f64], actual: &[f64]) -> Result<ForecastMetrics, EvalError> {
    if pred.len() != actual.len() {
        return Err(EvalError::Invalid(format!(
            "{} predictions for {} actuals",
            pred.len(),
            actual.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(EvalError::TooFew(format!("{n} prediction pairs, need 2")));
    }
    if actual.iter().any(|&a| !(a > 0.0)) {
        return Err(EvalError::Invalid("actual values must be positive".into()));
    }
    let nf = n as f64;
    let mae = pred.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / nf;
    let mape = 100.0 * pred.iter().zip(actual).map(|(p, a)| ((p - a) / a).abs()).sum::<f64>() / nf;
    let mean = actual.iter().sum::<f64>() / nf;
    let sst: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    let sse: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum();
    let r2 = (sst > 0.0).then(|| 1.0 - sse / sst);
    Ok(ForecastMetrics { mae, mape, r2, n })
}
