//! Canonical data model for longitudinal lab series: ingestion, cleaning,
//! eligibility filtering and baseline/index splitting.

mod clean;
mod ingest;
pub mod io;
mod split;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::analytes::{AnalyteTable, Sex};
use crate::ri::{pop::popri_classify, LabState};
use crate::stats;

pub use clean::{clean_cohort, clean_series, CleanOutput};
pub use ingest::{parse_measurements, Ingested, RawRow, RejectReason, Rejection};
pub use split::{split_baseline_index, Ineligible, PolicyError, Split, SplitPolicy};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

/// Whole and fractional days from `a` to `b`.
pub fn days_between(a: DateTime<Utc>, b: DateTime<Utc>) -> f64 {
    (b - a).num_seconds() as f64 / SECONDS_PER_DAY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patient {
    pub id: String,
    pub sex: Sex,
    /// Age in years at the reference date.
    pub age: f64,
}

/// A single lab result in the analyte's canonical unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub time: DateTime<Utc>,
    pub value: f64,
    pub analyte: String,
}

/// One patient's time-ordered measurements for one analyte, with the
/// population-interval state of every value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSeries {
    pub patient: Patient,
    pub analyte: String,
    pub measurements: Vec<Measurement>,
    pub states: Vec<LabState>,
}

impl LabSeries {
    /// Builds a series, sorting by time and deriving states from the shipped
    /// population table. Unknown analytes classify every value as normal.
    pub fn new(patient: Patient, analyte: impl Into<String>, mut measurements: Vec<Measurement>) -> Self {
        let analyte = analyte.into();
        measurements.sort_by_key(|m| m.time);
        let table = AnalyteTable::shipped();
        let states = measurements
            .iter()
            .map(|m| popri_classify(table, m.value, &analyte, patient.sex).unwrap_or(LabState::Normal))
            .collect();
        Self {
            patient,
            analyte,
            measurements,
            states,
        }
    }

    pub fn len(&self) -> usize {
        self.measurements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn values(&self) -> Vec<f64> {
        self.measurements.iter().map(|m| m.value).collect()
    }

    pub fn times(&self) -> Vec<DateTime<Utc>> {
        self.measurements.iter().map(|m| m.time).collect()
    }

    /// The subseries of positions `range`, states carried along.
    pub fn slice(&self, range: std::ops::Range<usize>) -> LabSeries {
        LabSeries {
            patient: self.patient.clone(),
            analyte: self.analyte.clone(),
            measurements: self.measurements[range.clone()].to_vec(),
            states: self.states[range].to_vec(),
        }
    }
}

/// Absolute z-score of an index value relative to the baseline mean and
/// sample SD. `None` when the baseline has fewer than two values or zero
/// spread (the deviation is undefined and the row is dropped downstream).
pub fn deviation_zscore(index: &Measurement, baseline: &LabSeries) -> Option<f64> {
    let values = baseline.values();
    let mu = stats::mean(&values)?;
    let sd = stats::sample_sd(&values)?;
    // spread at the rounding level of the mean counts as zero
    if sd <= 1e-12 * mu.abs() || sd == 0.0 {
        return None;
    }
    Some((index.value - mu).abs() / sd)
}

/// Externally supplied outcome label for one patient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLabel {
    pub event: bool,
    /// Days from the patient's first measurement to the event or censoring.
    pub time_days: f64,
}

/// patient id -> outcome name -> label
pub type OutcomeTable = BTreeMap<String, BTreeMap<String, OutcomeLabel>>;

/// One patient-analyte row feeding the statistics engine.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortRow {
    pub patient_id: String,
    pub analyte: String,
    pub index: Measurement,
    pub baseline: LabSeries,
    /// Outcome labels re-anchored at the index date; rows whose event or
    /// censoring precedes the index date are left out of the map.
    pub outcomes: BTreeMap<String, OutcomeLabel>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortFrame {
    pub rows: Vec<CohortRow>,
}
