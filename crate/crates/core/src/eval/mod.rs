//! Metrics, tests and sweeps over predictions and three-way classifications.

pub mod binomial;
pub mod cox;
pub mod fdr;
pub mod forecast;
pub mod individuality;
pub mod prevalence;
pub mod sweep;

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::stats;

pub use binomial::{confusion_metrics, deviation_mortality, wilson_interval, BinRate, Confusion, ConfusionMetrics};
pub use cox::{
    adjust_p_values, concordance_index, cox_fit, cox_newton, stratified_split, td_auc, CoxModelFit, CoxResult, CoxRow, TdAuc,
    TD_AUC_YEARS,
};
pub use fdr::bh_fdr;
pub use forecast::{forecast_metrics, ForecastMetrics};
pub use individuality::{individuality_index, Individuality};
pub use prevalence::{lead_time, prevalence_reclassification, FlagRecord, LeadTime, Prevalence};
pub use sweep::{sensitivity_sweep, sweep_from_base, write_sweep, SweepBase, SweepFeature, SweepRecord};

pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Rendered in CSV cells whose value is undefined.
pub const UNDEFINED: &str = "---";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("not enough data: {0}")]
    TooFew(String),
    #[error("empty cohort")]
    Empty,
    #[error("constant covariate {0}")]
    ConstantCovariate(String),
    #[error("no events in the {0} split")]
    NoEvents(&'static str),
    #[error("Newton-Raphson did not converge in {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One metric for one analyte and framework or model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub analyte: String,
    pub model: String,
    pub metric: String,
    pub value: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub n: usize,
    pub n_events: Option<usize>,
}

impl MetricRow {
    pub fn new(analyte: &str, model: &str, metric: &str, value: Option<f64>, n: usize) -> Self {
        Self {
            analyte: analyte.into(),
            model: model.into(),
            metric: metric.into(),
            value,
            ci_low: None,
            ci_high: None,
            n,
            n_events: None,
        }
    }

    pub fn with_ci(mut self, ci: Option<(f64, f64)>) -> Self {
        if let Some((lo, hi)) = ci {
            self.ci_low = Some(lo);
            self.ci_high = Some(hi);
        }
        self
    }

    pub fn with_events(mut self, n_events: usize) -> Self {
        self.n_events = Some(n_events);
        self
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_nan() => UNDEFINED.to_string(),
        Some(x) => x.to_string(),
        None => UNDEFINED.to_string(),
    }
}

pub const METRIC_HEADER: [&str; 8] = ["analyte", "model", "metric", "value", "ci_low", "ci_high", "n", "n_events"];

pub fn write_metric_rows<W: Write>(writer: W, rows: &[MetricRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRIC_HEADER)?;
    for r in rows {
        w.write_record([
            r.analyte.clone(),
            r.model.clone(),
            r.metric.clone(),
            fmt_opt(r.value),
            fmt_opt(r.ci_low),
            fmt_opt(r.ci_high),
            r.n.to_string(),
            r.n_events.map_or_else(|| UNDEFINED.to_string(), |e| e.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Percentile 95% interval of `stat` over `resamples` with-replacement
/// resamples of `0..n`. Resample `b` draws from its own derived seed, so the
/// result does not depend on evaluation order. Undefined resamples are
/// skipped; `None` when fewer than half are defined.
pub fn bootstrap_ci<F>(n: usize, resamples: usize, seed: u64, mut stat: F) -> Option<(f64, f64)>
where
    F: FnMut(&[usize]) -> Option<f64>,
{
    use rand::Rng;
    if n == 0 || resamples == 0 {
        return None;
    }
    let mut idx = vec![0usize; n];
    let mut vals = Vec::with_capacity(resamples);
    for b in 0..resamples {
        let mut rng = stats::rng(stats::derive_seed(seed, b as u64));
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        if let Some(v) = stat(&idx).filter(|v| v.is_finite()) {
            vals.push(v);
        }
    }
    if vals.len() * 2 < resamples {
        return None;
    }
    Some((stats::quantile(&vals, 0.025)?, stats::quantile(&vals, 0.975)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn undefined_cells_render_dashes() {
        let rows = vec![MetricRow::new("GLU", "norma", "r2", None, 3)];
        let mut out = Vec::new();
        write_metric_rows(&mut out, &rows).unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s, "analyte,model,metric,value,ci_low,ci_high,n,n_events\nGLU,norma,r2,---,---,---,3,---\n");
    }

    #[test]
    fn bootstrap_of_mean_brackets_mean() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let (lo, hi) = bootstrap_ci(xs.len(), 500, 1, |idx| stats::mean(&idx.iter().map(|&i| xs[i]).collect::<Vec<_>>())).unwrap();
        assert!(lo < 49.5 && 49.5 < hi);
        assert!(hi - lo < 25.0);
        let again = bootstrap_ci(xs.len(), 500, 1, |idx| stats::mean(&idx.iter().map(|&i| xs[i]).collect::<Vec<_>>())).unwrap();
        assert_eq!((lo, hi), again);
    }
}
