//! One-at-a-time sensitivity sweeps of the model interval.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::analytes::{AnalyteTable, Sex};
use crate::cohort::{LabSeries, Measurement, Patient};
use crate::model::{predict, Checkpoint};
use crate::stats;

pub const BASE_AGE: f64 = 50.0;
pub const BASE_COUNT: usize = 10;
pub const BASE_SPACING_DAYS: f64 = 90.0;
pub const BASE_HORIZON_DAYS: f64 = 30.0;
pub const VARIABILITY_DRAWS: usize = 30;

pub const AGE_GRID: [f64; 13] = [20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 55.0, 60.0, 65.0, 70.0, 75.0, 80.0];
/// 0 = female, 1 = male.
pub const SEX_GRID: [f64; 2] = [0.0, 1.0];
pub const HISTORY_GRID: [f64; 12] = [2.0, 5.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 100.0, 150.0, 200.0, 300.0];
pub const HORIZON_GRID: [f64; 9] = [7.0, 14.0, 30.0, 90.0, 180.0, 365.0, 730.0, 1825.0, 3650.0];
pub const VARIABILITY_GRID: [f64; 13] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepFeature {
    Age,
    Sex,
    HistoryLength,
    Horizon,
    Variability,
}

impl SweepFeature {
    pub const ALL: [SweepFeature; 5] = [
        SweepFeature::Age,
        SweepFeature::Sex,
        SweepFeature::HistoryLength,
        SweepFeature::Horizon,
        SweepFeature::Variability,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SweepFeature::Age => "age",
            SweepFeature::Sex => "sex",
            SweepFeature::HistoryLength => "history_length",
            SweepFeature::Horizon => "horizon",
            SweepFeature::Variability => "variability",
        }
    }

    pub fn default_grid(self) -> &'static [f64] {
        match self {
            SweepFeature::Age => &AGE_GRID,
            SweepFeature::Sex => &SEX_GRID,
            SweepFeature::HistoryLength => &HISTORY_GRID,
            SweepFeature::Horizon => &HORIZON_GRID,
            SweepFeature::Variability => &VARIABILITY_GRID,
        }
    }
}

impl fmt::Display for SweepFeature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepFeature {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SweepFeature::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown sweep feature {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub analyte: String,
    pub feature: SweepFeature,
    pub value: f64,
    pub median: f64,
    pub width: f64,
    /// Percent width change against the base case; `None` for a zero-width base.
    pub pct_change: Option<f64>,
}

/// The case every sweep perturbs one feature of.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepBase {
    pub analyte: String,
    pub sex: Sex,
    pub age: f64,
    pub history: Vec<(DateTime<Utc>, f64)>,
    pub horizon_days: f64,
}

impl SweepBase {
    /// 50-year-old male, ten values at the male reference midpoint 90 days apart, 30-day horizon.
    pub fn synthetic(table: &AnalyteTable, analyte: &str) -> Result<Self, EvalError> {
        let b = table.get(analyte).map_err(crate::model::ModelError::from)?.ri_male;
        let mid = b
            .midpoint()
            .ok_or_else(|| EvalError::Invalid(format!("{analyte} has no upper reference bound")))?;
        let end = Utc.with_ymd_and_hms(2020, 1, 1, 8, 0, 0).unwrap();
        Ok(Self {
            analyte: analyte.into(),
            sex: Sex::Male,
            age: BASE_AGE,
            history: spaced(end, BASE_COUNT, BASE_SPACING_DAYS).into_iter().map(|t| (t, mid)).collect(),
            horizon_days: BASE_HORIZON_DAYS,
        })
    }

    fn series(&self, sex: Sex, age: f64, history: &[(DateTime<Utc>, f64)]) -> LabSeries {
        let patient = Patient {
            id: "sweep".into(),
            sex,
            age,
        };
        let ms = history
            .iter()
            .map(|&(time, value)| Measurement {
                time,
                value,
                analyte: self.analyte.clone(),
            })
            .collect();
        LabSeries::new(patient, self.analyte.clone(), ms)
    }

    fn mean_value(&self) -> f64 {
        let v: Vec<f64> = self.history.iter().map(|h| h.1).collect();
        stats::mean(&v).unwrap_or(0.0)
    }

    fn median_spacing(&self) -> f64 {
        let gaps: Vec<f64> = self
            .history
            .windows(2)
            .map(|w| (w[1].0 - w[0].0).num_seconds() as f64 / 86_400.0)
            .collect();
        stats::median(&gaps).unwrap_or(BASE_SPACING_DAYS)
    }
}

/// `n` timestamps `spacing` days apart ending at `end`.
fn spaced(end: DateTime<Utc>, n: usize, spacing: f64) -> Vec<DateTime<Utc>> {
    (0..n)
        .rev()
        .map(|k| end - Duration::seconds((k as f64 * spacing * 86_400.0).round() as i64))
        .collect()
}

fn run(table: &AnalyteTable, ckpt: &Checkpoint, series: &LabSeries, horizon: f64) -> Result<(f64, f64), EvalError> {
    let p = predict(table, &ckpt.params, &ckpt.config, series, horizon)?;
    Ok((p.point, p.interval.width().unwrap_or(0.0)))
}

/// Sweeps `feature` over `grid` around `base`. The variability entries average
/// over seeded histories whose values are drawn around the base mean with SD
/// `m * width / 10`, `width` the male reference width.
pub fn sweep_from_base(
    table: &AnalyteTable,
    ckpt: &Checkpoint,
    base: &SweepBase,
    feature: SweepFeature,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepRecord>, EvalError> {
    ckpt.require_trained()?;
    if base.history.is_empty() {
        return Err(EvalError::Invalid("sweep base needs a history".into()));
    }
    let spec = table.get(&base.analyte).map_err(crate::model::ModelError::from)?;
    let (_, w0) = run(table, ckpt, &base.series(base.sex, base.age, &base.history), base.horizon_days)?;
    let end = base.history.last().expect("non-empty").0;
    let mut out = Vec::with_capacity(grid.len());
    for (gi, &g) in grid.iter().enumerate() {
        let (median, width) = match feature {
            SweepFeature::Age => run(table, ckpt, &base.series(base.sex, g, &base.history), base.horizon_days)?,
            SweepFeature::Sex => {
                let sex = if g >= 0.5 { Sex::Male } else { Sex::Female };
                run(table, ckpt, &base.series(sex, base.age, &base.history), base.horizon_days)?
            }
            SweepFeature::HistoryLength => {
                let n = g.round().max(1.0) as usize;
                let mean = base.mean_value();
                let h: Vec<_> = spaced(end, n, base.median_spacing()).into_iter().map(|t| (t, mean)).collect();
                run(table, ckpt, &base.series(base.sex, base.age, &h), base.horizon_days)?
            }
            SweepFeature::Horizon => run(table, ckpt, &base.series(base.sex, base.age, &base.history), g)?,
            SweepFeature::Variability => {
                let width = spec.ri_male.width().unwrap_or(0.0);
                let center = base.mean_value();
                let sd = g * width / 10.0;
                let floor = 0.01 * center.abs();
                // zero spread: every draw is the same history
                let draws = if sd > 0.0 { VARIABILITY_DRAWS } else { 1 };
                let (mut sm, mut sw) = (0.0, 0.0);
                for d in 0..draws {
                    let mut rng = stats::rng(stats::derive_seed(stats::derive_seed(seed, gi as u64), d as u64));
                    let h: Vec<_> = base
                        .history
                        .iter()
                        .map(|&(t, _)| {
                            let v = if sd > 0.0 {
                                Normal::new(center, sd).expect("finite sd").sample(&mut rng)
                            } else {
                                center
                            };
                            (t, v.max(floor))
                        })
                        .collect();
                    let (m, w) = run(table, ckpt, &base.series(base.sex, base.age, &h), base.horizon_days)?;
                    sm += m;
                    sw += w;
                }
                let k = draws as f64;
                (sm / k, sw / k)
            }
        };
        out.push(SweepRecord {
            analyte: base.analyte.clone(),
            feature,
            value: g,
            median,
            width,
            pct_change: (w0 > 0.0).then(|| 100.0 * (width - w0) / w0),
        });
    }
    Ok(out)
}

/// Every feature over its default grid around the synthetic base case, for each analyte.
pub fn sensitivity_sweep(
    table: &AnalyteTable,
    ckpt: &Checkpoint,
    analytes: &[String],
    seed: u64,
) -> Result<Vec<SweepRecord>, EvalError> {
    ckpt.require_trained()?;
    let mut out = Vec::new();
    for a in analytes {
        let base = SweepBase::synthetic(table, a)?;
        for f in SweepFeature::ALL {
            out.extend(sweep_from_base(table, ckpt, &base, f, f.default_grid(), seed)?);
        }
    }
    Ok(out)
}

pub const SWEEP_HEADER: [&str; 6] = ["analyte", "feature", "value", "median", "width", "pct_change"];

pub fn write_sweep<W: std::io::Write>(writer: W, records: &[SweepRecord]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    for r in records {
        w.write_record([
            r.analyte.clone(),
            r.feature.to_string(),
            r.value.to_string(),
            r.median.to_string(),
            r.width.to_string(),
            super::fmt_opt(r.pct_change),
        ])?;
    }
    w.flush()?;
    Ok(())
}
