//! Seeded synthetic cohorts with known setpoints, noise, drift and outcomes.
//!
//! Each patient-analyte series is `setpoint + drift * years + noise`, with
//! setpoints drawn around the population mean and noise that is either
//! independent or an Ornstein-Uhlenbeck process sampled at the measurement
//! times. Per-patient noise scales can be spread log-uniformly to make the
//! cohort heteroscedastic.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytes::{AnalyteTable, Sex};
use crate::cohort::io::{write_outcomes, write_series, IoError};
use crate::cohort::{LabSeries, Measurement, OutcomeLabel, OutcomeTable, Patient};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyteGen {
    pub code: String,
    pub pop_mean: f64,
    pub between_sd: f64,
    pub within_sd: f64,
    /// Per-patient within-SD multipliers are log-uniform on
    /// `[1/sqrt(r), sqrt(r)]`; 1 keeps the cohort homoscedastic.
    #[serde(default = "one")]
    pub hetero_ratio: f64,
    /// Correlation time in days of Ornstein-Uhlenbeck noise; independent noise when absent.
    #[serde(default)]
    pub corr_days: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        if self.max > self.min {
            rng.random_range(self.min..=self.max)
        } else {
            self.min
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    /// Fraction of patient-analyte series carrying a linear drift.
    pub fraction: f64,
    /// Drift in canonical units per year, as a multiple of the analyte's between-person SD.
    pub slope_sd_per_year: f64,
    /// Years after the first measurement at which drift starts.
    #[serde(default)]
    pub onset_years: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeModel {
    /// `P(event) = logistic(intercept + drift_coef * drifting + setpoint_coef * z)`,
    /// `z` the patient's mean setpoint z-score across analytes.
    Logistic {
        name: String,
        intercept: f64,
        drift_coef: f64,
        setpoint_coef: f64,
        follow_up_days: f64,
    },
    /// Exponential event times with rate `base_rate_per_year * exp(log_hr_drift * drifting + setpoint_coef * z)`,
    /// uniform censoring on `[0, censor_max_days]` starting at the first measurement.
    ProportionalHazards {
        name: String,
        base_rate_per_year: f64,
        log_hr_drift: f64,
        setpoint_coef: f64,
        censor_max_days: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub n_patients: usize,
    pub seed: u64,
    pub analytes: Vec<AnalyteGen>,
    /// Measurements per series, inclusive bounds.
    pub count: Range,
    pub spacing_days: Range,
    #[serde(default)]
    pub drift: Option<DriftSpec>,
    #[serde(default)]
    pub outcome: Option<OutcomeModel>,
    #[serde(default = "default_age")]
    pub age: Range,
    #[serde(default = "half")]
    pub female_fraction: f64,
    #[serde(default = "default_start")]
    pub start: DateTime<Utc>,
}

fn default_age() -> Range {
    Range { min: 18.0, max: 90.0 }
}

fn half() -> f64 {
    0.5
}

fn default_start() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2010, 1, 1, 8, 0, 0).unwrap()
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid cohort spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("io: {0}")]
    File(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CohortSpec {
    pub fn validate(&self, table: &AnalyteTable) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Spec(m));
        if self.n_patients == 0 || self.analytes.is_empty() {
            return bad("need at least one patient and one analyte".into());
        }
        for a in &self.analytes {
            if table.get(&a.code).is_err() {
                return bad(format!("unknown analyte {}", a.code));
            }
            if !(a.pop_mean > 0.0 && a.between_sd >= 0.0 && a.within_sd >= 0.0 && a.hetero_ratio >= 1.0) {
                return bad(format!("{}: need pop_mean > 0, SDs >= 0, hetero_ratio >= 1", a.code));
            }
            if a.corr_days.is_some_and(|c| !(c > 0.0)) {
                return bad(format!("{}: corr_days must be positive", a.code));
            }
        }
        if !(self.count.min >= 1.0 && self.count.max >= self.count.min) {
            return bad("count range must satisfy 1 <= min <= max".into());
        }
        if !(self.spacing_days.min >= 0.0 && self.spacing_days.max >= self.spacing_days.min) {
            return bad("spacing range must satisfy 0 <= min <= max".into());
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return bad("female_fraction must be in [0, 1]".into());
        }
        if let Some(d) = &self.drift {
            if !(0.0..=1.0).contains(&d.fraction) {
                return bad("drift fraction must be in [0, 1]".into());
            }
        }
        Ok(())
    }
}

/// Generating values for one patient-analyte series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesTruth {
    pub patient_id: String,
    pub analyte: String,
    pub setpoint: f64,
    pub within_sd: f64,
    /// Canonical units per year; 0 without drift.
    pub drift_per_year: f64,
    pub drift_onset_years: f64,
    /// Lag-one noise correlation for each gap (empty for independent noise).
    pub gap_rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub drifting: bool,
    /// Probability of the event under the outcome model.
    pub event_probability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub series: Vec<SeriesTruth>,
    pub patients: Vec<PatientTruth>,
    /// `within_sd / between_sd` per analyte (the population mean cancels).
    pub individuality_index: BTreeMap<String, f64>,
    pub expected_event_rate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub patients: Vec<Patient>,
    pub series: Vec<LabSeries>,
    pub outcomes: OutcomeTable,
    pub truth: Truth,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn generate(table: &AnalyteTable, spec: &CohortSpec) -> Result<SynthCohort, SynthError> {
    spec.validate(table)?;
    let mut patients = Vec::with_capacity(spec.n_patients);
    let mut series = Vec::new();
    let mut truth_series = Vec::new();
    let mut truth_patients = Vec::new();
    let mut outcomes = OutcomeTable::new();
    let mut rate_sum = 0.0;
    let width = spec.n_patients.to_string().len().max(4);

    for p in 0..spec.n_patients {
        // every patient draws from its own stream so patients are independent of ordering
        let mut rng = stats::rng(stats::derive_seed(spec.seed, p as u64));
        let id = format!("s{:0width$}", p + 1);
        let sex = if rng.random::<f64>() < spec.female_fraction {
            Sex::Female
        } else {
            Sex::Male
        };
        let age = spec.age.draw(&mut rng).round();
        let patient = Patient {
            id: id.clone(),
            sex,
            age,
        };
        let offset_days = rng.random_range(0..365);
        let mut drifting = false;
        let mut z_sum = 0.0;

        for a in &spec.analytes {
            let sp = if a.between_sd > 0.0 {
                Normal::new(a.pop_mean, a.between_sd).expect("finite sd").sample(&mut rng)
            } else {
                a.pop_mean
            };
            z_sum += if a.between_sd > 0.0 { (sp - a.pop_mean) / a.between_sd } else { 0.0 };
            let mult = if a.hetero_ratio > 1.0 {
                let h = a.hetero_ratio.ln();
                rng.random_range(-0.5 * h..=0.5 * h).exp()
            } else {
                1.0
            };
            let sd = a.within_sd * mult;
            let (slope, onset) = match &spec.drift {
                Some(d) if rng.random::<f64>() < d.fraction => {
                    drifting = true;
                    (d.slope_sd_per_year * a.between_sd.max(a.within_sd), d.onset_years)
                }
                _ => (0.0, 0.0),
            };
            let n = spec.count.draw(&mut rng).round() as usize;
            let mut t = spec.start + Duration::days(offset_days);
            let mut times = Vec::with_capacity(n);
            for i in 0..n {
                if i > 0 {
                    let gap = spec.spacing_days.draw(&mut rng);
                    t += Duration::seconds((gap * 86_400.0).round() as i64);
                }
                times.push(t);
            }
            let noise = Normal::new(0.0, 1.0).expect("unit normal");
            let mut e = 0.0;
            let mut gap_rho = Vec::new();
            let floor = 0.01 * a.pop_mean;
            let mut ms = Vec::with_capacity(n);
            for (i, &ti) in times.iter().enumerate() {
                let z: f64 = noise.sample(&mut rng);
                e = match a.corr_days {
                    Some(tau) if i > 0 => {
                        let dt = (ti - times[i - 1]).num_seconds() as f64 / 86_400.0;
                        let rho = (-dt / tau).exp();
                        gap_rho.push(rho);
                        rho * e + (1.0 - rho * rho).sqrt() * sd * z
                    }
                    _ => sd * z,
                };
                let years = (ti - times[0]).num_seconds() as f64 / (86_400.0 * 365.25);
                let drift = slope * (years - onset).max(0.0);
                ms.push(Measurement {
                    time: ti,
                    value: (sp + drift + e).max(floor),
                    analyte: a.code.clone(),
                });
            }
            truth_series.push(SeriesTruth {
                patient_id: id.clone(),
                analyte: a.code.clone(),
                setpoint: sp,
                within_sd: sd,
                drift_per_year: slope,
                drift_onset_years: onset,
                gap_rho,
            });
            series.push(LabSeries::new(patient.clone(), a.code.clone(), ms));
        }

        let z = z_sum / spec.analytes.len() as f64;
        let d = if drifting { 1.0 } else { 0.0 };
        let prob = match &spec.outcome {
            None => None,
            Some(OutcomeModel::Logistic {
                name,
                intercept,
                drift_coef,
                setpoint_coef,
                follow_up_days,
            }) => {
                let pr = logistic(intercept + drift_coef * d + setpoint_coef * z);
                let event = rng.random::<f64>() < pr;
                outcomes.entry(id.clone()).or_default().insert(
                    name.clone(),
                    OutcomeLabel {
                        event,
                        time_days: *follow_up_days,
                    },
                );
                Some(pr)
            }
            Some(OutcomeModel::ProportionalHazards {
                name,
                base_rate_per_year,
                log_hr_drift,
                setpoint_coef,
                censor_max_days,
            }) => {
                let rate = base_rate_per_year / 365.25 * (log_hr_drift * d + setpoint_coef * z).exp();
                let t_event = Exp::new(rate).expect("positive rate").sample(&mut rng);
                let t_cens = rng.random::<f64>() * censor_max_days;
                let event = t_event <= t_cens;
                outcomes.entry(id.clone()).or_default().insert(
                    name.clone(),
                    OutcomeLabel {
                        event,
                        time_days: t_event.min(t_cens),
                    },
                );
                // P(T <= C) for C ~ U(0, c): 1 - (1 - exp(-rate c)) / (rate c)
                let rc = rate * censor_max_days;
                Some(1.0 + (-rc).exp_m1() / rc)
            }
        };
        if let Some(pr) = prob {
            rate_sum += pr;
        }
        truth_patients.push(PatientTruth {
            patient_id: id,
            drifting,
            event_probability: prob,
        });
        patients.push(patient);
    }

    let individuality_index = spec
        .analytes
        .iter()
        .map(|a| {
            let ii = if a.between_sd > 0.0 { a.within_sd / a.between_sd } else { f64::INFINITY };
            (a.code.clone(), ii)
        })
        .collect();
    Ok(SynthCohort {
        patients,
        series,
        outcomes,
        truth: Truth {
            series: truth_series,
            patients: truth_patients,
            individuality_index,
            expected_event_rate: spec.outcome.as_ref().map(|_| rate_sum / spec.n_patients as f64),
        },
    })
}

impl SynthCohort {
    /// `measurements.csv`, `outcomes.csv` (when an outcome model is set) and `truth.json`.
    pub fn write_dir(&self, table: &AnalyteTable, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_series(std::fs::File::create(dir.join("measurements.csv"))?, table, &self.series)?;
        if !self.outcomes.is_empty() {
            write_outcomes(std::fs::File::create(dir.join("outcomes.csv"))?, &self.outcomes)?;
        }
        let mut f = std::fs::File::create(dir.join("truth.json"))?;
        serde_json::to_writer_pretty(&mut f, &self.truth)?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(within: f64) -> CohortSpec {
        CohortSpec {
            n_patients: 50,
            seed: 3,
            analytes: vec![AnalyteGen {
                code: "GLU".into(),
                pop_mean: 100.0,
                between_sd: 10.0,
                within_sd: within,
                hetero_ratio: 1.0,
                corr_days: None,
            }],
            count: Range { min: 5.0, max: 12.0 },
            spacing_days: Range { min: 30.0, max: 120.0 },
            drift: None,
            outcome: None,
            age: default_age(),
            female_fraction: 0.5,
            start: default_start(),
        }
    }

    #[test]
    fn zero_within_sd_gives_constant_series() {
        let c = generate(AnalyteTable::shipped(), &spec(0.0)).unwrap();
        for (s, t) in c.series.iter().zip(&c.truth.series) {
            assert!(s.values().iter().all(|&v| v == t.setpoint.max(1.0)));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let table = AnalyteTable::shipped();
        let mut sp = spec(2.0);
        sp.outcome = Some(OutcomeModel::ProportionalHazards {
            name: "death".into(),
            base_rate_per_year: 0.1,
            log_hr_drift: 0.7,
            setpoint_coef: 0.0,
            censor_max_days: 3650.0,
        });
        let run = || {
            let c = generate(table, &sp).unwrap();
            let mut a = Vec::new();
            write_series(&mut a, table, &c.series).unwrap();
            let mut b = Vec::new();
            write_outcomes(&mut b, &c.outcomes).unwrap();
            (a, b)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn times_are_increasing_and_values_positive() {
        let mut sp = spec(30.0);
        sp.analytes[0].corr_days = Some(60.0);
        sp.analytes[0].hetero_ratio = 4.0;
        sp.drift = Some(DriftSpec {
            fraction: 0.5,
            slope_sd_per_year: 1.0,
            onset_years: 0.0,
        });
        let c = generate(AnalyteTable::shipped(), &sp).unwrap();
        for s in &c.series {
            assert!(s.measurements.windows(2).all(|w| w[0].time < w[1].time));
            assert!(s.values().iter().all(|&v| v > 0.0));
        }
        assert!(c.truth.patients.iter().any(|p| p.drifting));
        assert!(c.truth.series.iter().all(|t| t.within_sd >= 15.0 - 1e-9 && t.within_sd <= 60.0 + 1e-9));
    }

    #[test]
    fn invalid_specs() {
        let t = AnalyteTable::shipped();
        let mut s = spec(1.0);
        s.analytes[0].code = "XYZ".into();
        assert!(generate(t, &s).is_err());
        let mut s = spec(1.0);
        s.analytes[0].pop_mean = -1.0;
        assert!(generate(t, &s).is_err());
    }
}
