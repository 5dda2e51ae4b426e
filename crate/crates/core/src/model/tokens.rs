use serde::{Deserialize, Serialize};

use super::config::{AgeEncoding, ModelConfig, StateEncoding, TimeEncoding, ValueEncoding};
use super::ModelError;
use crate::analytes::{AnalyteTable, Sex};
use crate::cohort::{days_between, LabSeries};
use crate::ri::LabState;
use crate::stats;

pub const N_AGE_BINS: usize = 8;
const DAYS_PER_YEAR: f64 = 365.25;

/// Decade bins `[18, 29], [30, 39], ..., [90, 99]`; ages outside are clamped.
pub fn age_bin(age: f64) -> usize {
    if age < 30.0 {
        0
    } else {
        ((age / 10.0).floor() as usize - 2).min(N_AGE_BINS - 1)
    }
}

pub fn state_index(state: LabState, encoding: StateEncoding) -> usize {
    match (encoding, state) {
        (StateEncoding::Binary, LabState::Normal) => 0,
        (StateEncoding::Binary, _) => 1,
        (StateEncoding::Ternary, LabState::Low) => 0,
        (StateEncoding::Ternary, LabState::Normal) => 1,
        (StateEncoding::Ternary, LabState::High) => 2,
    }
}

/// Affine map between model space and the analyte's canonical unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Denorm {
    pub shift: f64,
    pub scale: f64,
}

impl Denorm {
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.shift) / self.scale
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        self.shift + self.scale * y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryToken {
    /// Value in model space, before any learnable affine.
    pub value: f64,
    pub state: usize,
    /// Input to the history time encoder.
    pub time: f64,
}

/// Model inputs for one query, before embedding. Attention is causal over
/// context, history, query in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub analyte_id: usize,
    pub sex: usize,
    pub age: f64,
    pub age_bin: usize,
    pub history: Vec<HistoryToken>,
    pub query_state: LabState,
    pub query_state_index: usize,
    /// Input to the horizon encoder.
    pub horizon: f64,
    pub denorm: Denorm,
    /// Oldest measurements dropped to fit `max_seq_len`.
    pub truncated: usize,
}

impl TokenSequence {
    pub fn len(&self, config: &ModelConfig) -> usize {
        config.seq_len(self.history.len())
    }
}

/// Fixed per-analyte affine used when values enter the model unnormalized:
/// centre on the population midpoint, scale by a quarter of the width.
fn analyte_affine(table: &AnalyteTable, analyte: &str) -> Result<Denorm, ModelError> {
    let b = table.get(analyte)?.bounds(Sex::Male);
    let width = b.width().unwrap_or(1.0).max(1e-9);
    Ok(Denorm {
        shift: b.midpoint().unwrap_or(0.0),
        scale: width / 4.0,
    })
}

/// Lower bound on the within-sequence scale, as a fraction of the population width.
pub const WITHIN_SD_FLOOR: f64 = 0.05;

/// Sequence mean and sample SD, the SD floored at a fraction of the
/// population width so near-constant histories keep a usable scale. A
/// single value has no spread and takes the population scale (width / 4).
fn within_sequence(table: &AnalyteTable, analyte: &str, values: &[f64]) -> Result<Denorm, ModelError> {
    let width = table.get(analyte)?.bounds(Sex::Male).width().unwrap_or(1.0).max(1e-9);
    let shift = stats::mean(values).ok_or(ModelError::EmptyHistory)?;
    let scale = match stats::sample_sd(values) {
        Some(sd) => sd.max(WITHIN_SD_FLOOR * width),
        None => width / 4.0,
    };
    Ok(Denorm { shift, scale })
}

pub fn build_tokens(
    table: &AnalyteTable,
    series: &LabSeries,
    query_state: LabState,
    horizon_days: f64,
    config: &ModelConfig,
) -> Result<TokenSequence, ModelError> {
    if series.is_empty() {
        return Err(ModelError::EmptyHistory);
    }
    if !(horizon_days.is_finite() && horizon_days >= 0.0) {
        return Err(ModelError::BadHorizon(horizon_days));
    }
    let analyte_id = table.id(&series.analyte)?;
    let truncated = series.len().saturating_sub(config.max_seq_len);
    let ms = &series.measurements[truncated..];
    let states = &series.states[truncated..];
    let values: Vec<f64> = ms.iter().map(|m| m.value).collect();

    let denorm = match config.value_encoding {
        ValueEncoding::Raw => analyte_affine(table, &series.analyte)?,
        ValueEncoding::WithinSequenceNorm => within_sequence(table, &series.analyte, &values)?,
    };

    let t0 = ms[0].time;
    let history = ms
        .iter()
        .zip(states)
        .enumerate()
        .map(|(i, (m, &s))| {
            let time = match config.time_encoding {
                TimeEncoding::Time2vec => days_between(t0, m.time) / DAYS_PER_YEAR,
                TimeEncoding::LogDeltaT if i == 0 => 0.0,
                TimeEncoding::LogDeltaT => days_between(ms[i - 1].time, m.time).max(0.0).ln_1p(),
            };
            HistoryToken {
                value: denorm.normalize(m.value),
                state: state_index(s, config.state_encoding),
                time,
            }
        })
        .collect();
    let horizon = match config.time_encoding {
        TimeEncoding::Time2vec => horizon_days / DAYS_PER_YEAR,
        TimeEncoding::LogDeltaT => horizon_days.ln_1p(),
    };
    let age = series.patient.age;
    Ok(TokenSequence {
        analyte_id,
        sex: series.patient.sex.index(),
        age: match config.age_encoding {
            AgeEncoding::RawLinear => age / 100.0,
            AgeEncoding::DecadeBins => 0.0,
        },
        age_bin: age_bin(age),
        history,
        query_state,
        query_state_index: state_index(query_state, config.state_encoding),
        horizon,
        denorm,
        truncated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Measurement, Patient};
    use chrono::{Duration, TimeZone, Utc};

    fn series(analyte: &str, vals: &[f64], gap_days: i64) -> LabSeries {
        let t0 = Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap();
        let ms = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| Measurement {
                time: t0 + Duration::days(gap_days * i as i64),
                value: v,
                analyte: analyte.into(),
            })
            .collect();
        LabSeries::new(
            Patient {
                id: "p".into(),
                sex: Sex::Male,
                age: 50.0,
            },
            analyte,
            ms,
        )
    }

    #[test]
    fn single_history_token() {
        let cfg = ModelConfig::eicu_default();
        let t = build_tokens(AnalyteTable::shipped(), &series("GLU", &[90.0], 1), LabState::Normal, 30.0, &cfg).unwrap();
        assert_eq!(t.history.len(), 1);
        assert_eq!(t.len(&cfg), 3);
        assert_eq!(t.history[0].time, 0.0);
        let mut merged = cfg.clone();
        merged.context_token = super::super::ContextToken::MergedIntoFirst;
        assert_eq!(t.len(&merged), 2);
    }

    #[test]
    fn ternary_states_for_glucose() {
        let cfg = ModelConfig::eicu_default();
        let t = build_tokens(AnalyteTable::shipped(), &series("GLU", &[60.0, 85.0, 120.0], 10), LabState::Normal, 1.0, &cfg)
            .unwrap();
        let s: Vec<usize> = t.history.iter().map(|h| h.state).collect();
        assert_eq!(s, vec![0, 1, 2]);
        let mut bin = cfg.clone();
        bin.state_encoding = StateEncoding::Binary;
        let t = build_tokens(AnalyteTable::shipped(), &series("GLU", &[60.0, 85.0, 120.0], 10), LabState::High, 1.0, &bin)
            .unwrap();
        let s: Vec<usize> = t.history.iter().map(|h| h.state).collect();
        assert_eq!(s, vec![1, 0, 1]);
        assert_eq!(t.query_state_index, 1);
    }

    #[test]
    fn within_sequence_normalization_two_points() {
        let cfg = ModelConfig::eicu_default();
        let t = build_tokens(AnalyteTable::shipped(), &series("GLU", &[80.0, 120.0], 90), LabState::Normal, 90.0, &cfg)
            .unwrap();
        let sd = (800.0f64).sqrt();
        assert!((t.history[0].value - (-20.0 / sd)).abs() < 1e-12);
        assert!((t.history[1].value - 20.0 / sd).abs() < 1e-12);
        assert!((t.history[0].value + 0.7071).abs() < 1e-4);
        for x in [80.0, 97.5, 120.0] {
            assert!((t.denorm.denormalize(t.denorm.normalize(x)) - x).abs() < 1e-10);
        }
        assert!((t.history[1].time - 91.0f64.ln()).abs() < 1e-12);
        assert!((t.horizon - 91.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let mut cfg = ModelConfig::eicu_default();
        cfg.max_seq_len = 3;
        let t = build_tokens(AnalyteTable::shipped(), &series("GLU", &[80.0, 81.0, 82.0, 83.0, 84.0], 30), LabState::Normal, 0.0, &cfg)
            .unwrap();
        assert_eq!(t.truncated, 2);
        assert_eq!(t.history.len(), 3);
        assert_eq!(t.denorm.shift, 83.0);
    }

    #[test]
    fn errors() {
        let cfg = ModelConfig::eicu_default();
        let table = AnalyteTable::shipped();
        let empty = series("GLU", &[], 1);
        assert_eq!(build_tokens(table, &empty, LabState::Normal, 1.0, &cfg), Err(ModelError::EmptyHistory));
        let s = series("GLU", &[90.0], 1);
        assert!(matches!(build_tokens(table, &s, LabState::Normal, -1.0, &cfg), Err(ModelError::BadHorizon(_))));
        let unk = series("XYZ", &[1.0], 1);
        assert!(matches!(build_tokens(table, &unk, LabState::Normal, 1.0, &cfg), Err(ModelError::Analyte(_))));
    }

    #[test]
    fn decade_bins() {
        assert_eq!(age_bin(18.0), 0);
        assert_eq!(age_bin(29.9), 0);
        assert_eq!(age_bin(30.0), 1);
        assert_eq!(age_bin(55.0), 3);
        assert_eq!(age_bin(90.0), 7);
        assert_eq!(age_bin(99.0), 7);
        assert_eq!(age_bin(105.0), 7);
    }
}
