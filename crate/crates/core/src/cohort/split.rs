use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{days_between, LabSeries, Measurement};

fn default_min_count() -> usize {
    5
}
fn default_spacing() -> u32 {
    90
}
fn default_fraction() -> f64 {
    0.75
}
fn default_age_min() -> f64 {
    18.0
}
fn default_age_max() -> f64 {
    99.0
}

/// How a cleaned series is divided into a baseline and index measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Baseline before `baseline_cutoff`, index = first measurement in
    /// `[baseline_cutoff, index_window_end]`.
    Longitudinal {
        #[serde(default = "default_min_count")]
        min_count: usize,
        #[serde(default = "default_spacing")]
        min_spacing_days: u32,
        baseline_cutoff: DateTime<Utc>,
        index_window_end: DateTime<Utc>,
        #[serde(default = "default_age_min")]
        age_min: f64,
        #[serde(default = "default_age_max")]
        age_max: f64,
    },
    /// Baseline = first `ceil(fraction * n)` measurements, index = the rest.
    Fraction {
        #[serde(default = "default_min_count")]
        min_count: usize,
        #[serde(default = "default_fraction")]
        baseline_fraction: f64,
        #[serde(default = "default_age_min")]
        age_min: f64,
        #[serde(default = "default_age_max")]
        age_max: f64,
    },
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Fraction {
            min_count: default_min_count(),
            baseline_fraction: default_fraction(),
            age_min: default_age_min(),
            age_max: default_age_max(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("baseline_fraction must lie in (0, 1), got {0}")]
    Fraction(f64),
    #[error("min_count must be at least 2, got {0}")]
    MinCount(usize),
    #[error("index window ends before the baseline cutoff")]
    Window,
    #[error("age_min {0} exceeds age_max {1}")]
    AgeRange(f64, f64),
}

impl SplitPolicy {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let (min_count, age_min, age_max) = match *self {
            SplitPolicy::Longitudinal {
                min_count,
                baseline_cutoff,
                index_window_end,
                age_min,
                age_max,
                ..
            } => {
                if index_window_end < baseline_cutoff {
                    return Err(PolicyError::Window);
                }
                (min_count, age_min, age_max)
            }
            SplitPolicy::Fraction {
                min_count,
                baseline_fraction,
                age_min,
                age_max,
            } => {
                if !(baseline_fraction > 0.0 && baseline_fraction < 1.0) {
                    return Err(PolicyError::Fraction(baseline_fraction));
                }
                (min_count, age_min, age_max)
            }
        };
        if min_count < 2 {
            return Err(PolicyError::MinCount(min_count));
        }
        if age_min > age_max {
            return Err(PolicyError::AgeRange(age_min, age_max));
        }
        Ok(())
    }

    pub fn min_count(&self) -> usize {
        match self {
            SplitPolicy::Longitudinal { min_count, .. } | SplitPolicy::Fraction { min_count, .. } => *min_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ineligible {
    Age,
    TooFew,
    Spacing,
    NoIndex,
}

impl Ineligible {
    pub fn as_str(self) -> &'static str {
        match self {
            Ineligible::Age => "age",
            Ineligible::TooFew => "too-few",
            Ineligible::Spacing => "spacing",
            Ineligible::NoIndex => "no-index",
        }
    }
}

impl fmt::Display for Ineligible {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub baseline: LabSeries,
    pub index: Vec<Measurement>,
}

/// Length of the greedy earliest-first chain whose consecutive gaps are all
/// at least `spacing_days`.
fn spaced_chain_len(ms: &[Measurement], spacing_days: f64) -> usize {
    let mut it = ms.iter();
    let Some(first) = it.next() else {
        return 0;
    };
    let mut last = first.time;
    let mut len = 1;
    for m in it {
        if days_between(last, m.time) >= spacing_days {
            last = m.time;
            len += 1;
        }
    }
    len
}

/// Divides a cleaned, time-sorted series according to `policy`. Ineligible
/// series come back as an explicit reason, never silently dropped.
pub fn split_baseline_index(series: &LabSeries, policy: &SplitPolicy) -> Result<Split, Ineligible> {
    let age = series.patient.age;
    match *policy {
        SplitPolicy::Longitudinal {
            min_count,
            min_spacing_days,
            baseline_cutoff,
            index_window_end,
            age_min,
            age_max,
        } => {
            if !(age_min..=age_max).contains(&age) {
                return Err(Ineligible::Age);
            }
            let n_before = series
                .measurements
                .iter()
                .take_while(|m| m.time < baseline_cutoff)
                .count();
            if n_before < min_count {
                return Err(Ineligible::TooFew);
            }
            if spaced_chain_len(&series.measurements[..n_before], f64::from(min_spacing_days)) < min_count {
                return Err(Ineligible::Spacing);
            }
            let index = series.measurements[n_before..]
                .iter()
                .find(|m| m.time <= index_window_end)
                .cloned()
                .ok_or(Ineligible::NoIndex)?;
            Ok(Split {
                baseline: series.slice(0..n_before),
                index: vec![index],
            })
        }
        SplitPolicy::Fraction {
            min_count,
            baseline_fraction,
            age_min,
            age_max,
        } => {
            if !(age_min..=age_max).contains(&age) {
                return Err(Ineligible::Age);
            }
            let n = series.len();
            if n < min_count {
                return Err(Ineligible::TooFew);
            }
            let b = ((baseline_fraction * n as f64).ceil() as usize).min(n);
            if b == n {
                return Err(Ineligible::NoIndex);
            }
            Ok(Split {
                baseline: series.slice(0..b),
                index: series.measurements[b..].to_vec(),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytes::Sex;
    use crate::cohort::Patient;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2015, 1, 1, 0, 0, 0).unwrap()
    }

    fn series_at(days: &[i64]) -> LabSeries {
        let ms = days
            .iter()
            .map(|&d| Measurement {
                time: t0() + chrono::Duration::days(d),
                value: 90.0,
                analyte: "GLU".into(),
            })
            .collect();
        LabSeries::new(
            Patient {
                id: "p".into(),
                sex: Sex::Female,
                age: 60.0,
            },
            "GLU",
            ms,
        )
    }

    fn longitudinal() -> SplitPolicy {
        SplitPolicy::Longitudinal {
            min_count: 5,
            min_spacing_days: 90,
            baseline_cutoff: t0() + chrono::Duration::days(500),
            index_window_end: t0() + chrono::Duration::days(900),
            age_min: 18.0,
            age_max: 99.0,
        }
    }

    #[test]
    fn fraction_eight_gives_six_two() {
        let s = series_at(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let sp = split_baseline_index(&s, &SplitPolicy::default()).unwrap();
        assert_eq!(sp.baseline.len(), 6);
        assert_eq!(sp.index.len(), 2);
        assert_eq!(sp.index[0], s.measurements[6]);
    }

    #[test]
    fn longitudinal_eligible() {
        let s = series_at(&[0, 90, 180, 270, 360, 600, 700]);
        let sp = split_baseline_index(&s, &longitudinal()).unwrap();
        assert_eq!(sp.baseline.len(), 5);
        assert_eq!(sp.index, vec![s.measurements[5].clone()]);
    }

    #[test]
    fn longitudinal_spacing_violated() {
        let s = series_at(&[0, 1, 2, 3, 4, 600]);
        assert_eq!(split_baseline_index(&s, &longitudinal()), Err(Ineligible::Spacing));
    }

    #[test]
    fn longitudinal_other_reasons() {
        let s = series_at(&[0, 90, 180, 270]);
        assert_eq!(split_baseline_index(&s, &longitudinal()), Err(Ineligible::TooFew));
        let s = series_at(&[0, 90, 180, 270, 360, 1200]);
        assert_eq!(split_baseline_index(&s, &longitudinal()), Err(Ineligible::NoIndex));
        let mut s = series_at(&[0, 90, 180, 270, 360, 600]);
        s.patient.age = 17.0;
        assert_eq!(split_baseline_index(&s, &longitudinal()), Err(Ineligible::Age));
    }

    #[test]
    fn greedy_chain_skips_close_points() {
        let s = series_at(&[0, 30, 90, 100, 180, 200, 270, 360]);
        assert_eq!(spaced_chain_len(&s.measurements, 90.0), 5);
    }

    #[test]
    fn policy_validation_and_json() {
        let bad = SplitPolicy::Fraction {
            min_count: 5,
            baseline_fraction: 1.0,
            age_min: 18.0,
            age_max: 99.0,
        };
        assert_eq!(bad.validate(), Err(PolicyError::Fraction(1.0)));
        let p: SplitPolicy = serde_json::from_str(r#"{"kind":"fraction"}"#).unwrap();
        assert_eq!(p, SplitPolicy::default());
        assert!(p.validate().is_ok());
        let l: SplitPolicy = serde_json::from_str(
            r#"{"kind":"longitudinal","baseline_cutoff":"2019-01-01T00:00:00Z","index_window_end":"2020-01-01T00:00:00Z"}"#,
        )
        .unwrap();
        assert_eq!(l.min_count(), 5);
        assert!(l.validate().is_ok());
    }

    proptest::proptest! {
        #[test]
        fn fraction_partitions(n in 5usize..60, frac in 0.05f64..0.95) {
            let days: Vec<i64> = (0..n as i64).map(|d| d * 7).collect();
            let s = series_at(&days);
            let policy = SplitPolicy::Fraction { min_count: 5, baseline_fraction: frac, age_min: 18.0, age_max: 99.0 };
            match split_baseline_index(&s, &policy) {
                Ok(sp) => {
                    let mut joined = sp.baseline.measurements.clone();
                    joined.extend(sp.index.iter().cloned());
                    proptest::prop_assert_eq!(&joined, &s.measurements);
                    proptest::prop_assert!(sp.baseline.measurements.last().unwrap().time < sp.index[0].time);
                }
                Err(e) => proptest::prop_assert_eq!(e, Ineligible::NoIndex),
            }
        }
    }
}
