//! Request and response bodies, and the handlers' logic without the HTTP layer.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use norma_core::analytes::{AnalyteSpec, AnalyteTable, Bounds, Sex};
use norma_core::cohort::{days_between, LabSeries, Measurement, Patient};
use norma_core::eval::{sweep_from_base, SweepBase, SweepFeature, SweepRecord};
use norma_core::model::{predict, Checkpoint, ModelConfig};
use norma_core::ri::{
    classify_three_way, perri_seed, perri_setpoint_valid, popri_classify, popri_interval, select_perri_values, Flag,
    Framework, LabState, PerRiError, ReferenceInterval,
};

use crate::ApiError;

/// Patient id used to seed the personalized fit when the request has none.
pub const ANONYMOUS_PATIENT: &str = "anonymous";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub timestamp: DateTime<Utc>,
    pub value: f64,
    /// Defaults to the analyte's canonical unit.
    #[serde(default)]
    pub unit: Option<String>,
}

fn all_frameworks() -> Vec<Framework> {
    Framework::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretRequest {
    pub sex: String,
    pub age: f64,
    pub analyte: String,
    #[serde(default)]
    pub history: Vec<HistoryPoint>,
    /// The result to interpret. When absent, the latest history point is
    /// interpreted against the ones before it.
    #[serde(default)]
    pub value: Option<HistoryPoint>,
    /// Forecast horizon for the model interval; defaults to the gap between
    /// the last history point and `value`.
    #[serde(default)]
    pub horizon_days: Option<f64>,
    #[serde(default = "all_frameworks")]
    pub frameworks: Vec<Framework>,
    /// Preset the caller expects the loaded checkpoint to follow.
    #[serde(default)]
    pub config: Option<String>,
    #[serde(default)]
    pub patient_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalPoint {
    pub timestamp: DateTime<Utc>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameworkResult {
    pub interval: ReferenceInterval,
    /// Flag for the interpreted value; absent without a value or when withheld.
    pub flag: Option<Flag>,
    /// Model point forecast (median or mean).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub point: Option<f64>,
    /// Whether the personalized setpoint lies inside the population interval.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub setpoint_valid: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpretResponse {
    pub analyte: String,
    pub unit: String,
    pub sex: Sex,
    pub age: f64,
    /// Baseline in canonical units, time-ordered, duplicates averaged.
    pub history: Vec<CanonicalPoint>,
    pub value: Option<CanonicalPoint>,
    pub pop_state: Option<LabState>,
    pub horizon_days: Option<f64>,
    pub pop: Option<FrameworkResult>,
    pub per: Option<FrameworkResult>,
    pub norma: Option<FrameworkResult>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRequest {
    pub analyte: String,
    pub sex: String,
    pub age: f64,
    pub history: Vec<HistoryPoint>,
    pub horizon_days: f64,
    pub feature: String,
    /// Defaults to the feature's standard grid.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResponse {
    pub analyte: String,
    pub feature: SweepFeature,
    pub records: Vec<SweepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyteInfo {
    pub code: String,
    pub name: String,
    pub unit: String,
    pub ri_female: Bounds,
    pub ri_male: Bounds,
    pub sex_stratified: bool,
    /// Accepted alternative units and their multipliers into `unit`.
    pub units: BTreeMap<String, f64>,
}

impl AnalyteInfo {
    pub fn new(table: &AnalyteTable, spec: &AnalyteSpec) -> Self {
        Self {
            code: spec.code.clone(),
            name: spec.name.clone(),
            unit: spec.unit.clone(),
            ri_female: spec.ri_female,
            ri_male: spec.ri_male,
            sex_stratified: spec.sex_stratified,
            units: table.units(&spec.code).into_iter().collect(),
        }
    }
}

pub fn analytes(table: &AnalyteTable) -> Vec<AnalyteInfo> {
    table.iter().map(|s| AnalyteInfo::new(table, s)).collect()
}

pub fn analyte(table: &AnalyteTable, code: &str) -> Result<AnalyteInfo, ApiError> {
    let spec = table
        .get(code)
        .map_err(|e| ApiError::not_found("unknown_analyte", e.to_string()))?;
    Ok(AnalyteInfo::new(table, spec))
}

fn parse_sex(s: &str) -> Result<Sex, ApiError> {
    s.parse().map_err(|e: norma_core::analytes::ParseSexError| ApiError::bad_request("invalid_sex", e.to_string()))
}

fn check_age(age: f64) -> Result<(), ApiError> {
    if age.is_finite() && (0.0..=130.0).contains(&age) {
        Ok(())
    } else {
        Err(ApiError::bad_request("invalid_age", format!("age {age} outside [0, 130]")))
    }
}

fn canonical(table: &AnalyteTable, analyte: &str, p: &HistoryPoint) -> Result<CanonicalPoint, ApiError> {
    let spec = table.get(analyte).map_err(|e| ApiError::bad_request("unknown_analyte", e.to_string()))?;
    let unit = p.unit.as_deref().unwrap_or(&spec.unit);
    let value = table
        .to_canonical(analyte, unit, p.value)
        .map_err(|e| ApiError::bad_request("unit_unmapped", e.to_string()))?;
    if !(value.is_finite() && value > 0.0) {
        return Err(ApiError::bad_request("non_positive", format!("value {} must be positive", p.value)));
    }
    Ok(CanonicalPoint {
        timestamp: p.timestamp,
        value,
    })
}

/// Canonical units, time order, identical timestamps replaced by their mean.
pub fn normalize_history(table: &AnalyteTable, analyte: &str, history: &[HistoryPoint]) -> Result<Vec<CanonicalPoint>, ApiError> {
    let mut by_time: BTreeMap<DateTime<Utc>, (f64, usize)> = BTreeMap::new();
    for p in history {
        let c = canonical(table, analyte, p)?;
        let e = by_time.entry(c.timestamp).or_insert((0.0, 0));
        e.0 += c.value;
        e.1 += 1;
    }
    Ok(by_time
        .into_iter()
        .map(|(timestamp, (s, n))| CanonicalPoint {
            timestamp,
            value: s / n as f64,
        })
        .collect())
}

fn series(patient_id: &str, sex: Sex, age: f64, analyte: &str, points: &[CanonicalPoint]) -> LabSeries {
    let patient = Patient {
        id: patient_id.into(),
        sex,
        age,
    };
    let ms = points
        .iter()
        .map(|p| Measurement {
            time: p.timestamp,
            value: p.value,
            analyte: analyte.into(),
        })
        .collect();
    LabSeries::new(patient, analyte, ms)
}

fn same_encodings(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.time_encoding == b.time_encoding
        && a.state_encoding == b.state_encoding
        && a.value_encoding == b.value_encoding
        && a.age_encoding == b.age_encoding
        && a.context_token == b.context_token
        && a.head == b.head
}

fn require_model<'a>(ckpt: Option<&'a Checkpoint>, preset: Option<&str>) -> Result<&'a Checkpoint, ApiError> {
    let c = ckpt.ok_or_else(|| ApiError::unavailable("no_checkpoint", "no trained checkpoint is loaded"))?;
    if let Some(name) = preset {
        let want = ModelConfig::preset(name).map_err(|e| ApiError::bad_request("unknown_preset", e.to_string()))?;
        if !same_encodings(&want, &c.config) {
            return Err(ApiError::unprocessable(
                "preset_mismatch",
                format!("the loaded checkpoint does not follow preset {name:?}"),
            ));
        }
    }
    Ok(c)
}

/// Pop, Per and model intervals for one result against its history.
pub fn interpret(table: &AnalyteTable, ckpt: Option<&Checkpoint>, req: &InterpretRequest) -> Result<InterpretResponse, ApiError> {
    let spec = table
        .get(&req.analyte)
        .map_err(|e| ApiError::bad_request("unknown_analyte", e.to_string()))?;
    let sex = parse_sex(&req.sex)?;
    check_age(req.age)?;
    if let Some(h) = req.horizon_days {
        if !(h.is_finite() && h >= 0.0) {
            return Err(ApiError::bad_request("invalid_horizon", format!("horizon_days {h} must be non-negative")));
        }
    }
    let mut history = normalize_history(table, &req.analyte, &req.history)?;
    let value = match &req.value {
        Some(v) => Some(canonical(table, &req.analyte, v)?),
        None => history.pop(),
    };
    if let (Some(v), Some(last)) = (&value, history.last()) {
        if v.timestamp <= last.timestamp {
            return Err(ApiError::bad_request(
                "value_precedes_history",
                "the interpreted value must be later than every history point",
            ));
        }
    }
    let wants = |f: Framework| req.frameworks.contains(&f);
    let mut warnings = Vec::new();

    let pop_state = value
        .as_ref()
        .map(|v| popri_classify(table, v.value, &req.analyte, sex))
        .transpose()
        .map_err(|e| ApiError::bad_request("unknown_analyte", e.to_string()))?;

    let mut per_ri: Option<ReferenceInterval> = None;
    let mut per_valid = None;
    if wants(Framework::Per) {
        let pid = req.patient_id.as_deref().unwrap_or(ANONYMOUS_PATIENT);
        let values: Vec<f64> = history.iter().map(|p| p.value).collect();
        let per = select_perri_values(&values, perri_seed(pid, &req.analyte)).map_err(|e| match e {
            PerRiError::Ineligible(_) => ApiError::unprocessable("history_too_short", e.to_string()),
            PerRiError::Gmm(_) => ApiError::unprocessable("per_fit_failed", e.to_string()),
        })?;
        let ok = perri_setpoint_valid(table, &per, &req.analyte, sex).map_err(|e| ApiError::bad_request("unknown_analyte", e.to_string()))?;
        if !ok {
            warnings.push("personalized setpoint lies outside the population interval; the Per flag is withheld".into());
        }
        per_valid = Some(ok);
        per_ri = Some(per.interval);
    }

    let mut norma_ri: Option<ReferenceInterval> = None;
    let mut norma_point = None;
    let mut horizon = req.horizon_days;
    if wants(Framework::Norma) {
        let c = require_model(ckpt, req.config.as_deref())?;
        let Some(last) = history.last() else {
            return Err(ApiError::unprocessable("history_empty", "the model interval needs at least one prior value"));
        };
        let h = match (req.horizon_days, &value) {
            (Some(h), _) => h,
            (None, Some(v)) => days_between(last.timestamp, v.timestamp),
            (None, None) => {
                return Err(ApiError::bad_request("horizon_required", "give horizon_days or a value to interpret"));
            }
        };
        horizon = Some(h);
        let pid = req.patient_id.as_deref().unwrap_or(ANONYMOUS_PATIENT);
        let s = series(pid, sex, req.age, &req.analyte, &history);
        let p = predict(table, &c.params, &c.config, &s, h).map_err(|e| ApiError::unprocessable("model_error", e.to_string()))?;
        if p.degenerate {
            warnings.push("model interval has zero width".into());
        }
        if p.truncated > 0 {
            warnings.push(format!("{} oldest history point(s) beyond the model context were ignored", p.truncated));
        }
        norma_point = Some(p.point);
        norma_ri = Some(p.interval);
    }

    let flags = match (&value, pop_state) {
        (Some(v), Some(state)) => {
            let per_for_flag = per_ri.as_ref().filter(|_| per_valid == Some(true));
            Some(classify_three_way(v.value, state, per_for_flag, norma_ri.as_ref()))
        }
        _ => None,
    };

    let pop = if wants(Framework::Pop) {
        let interval = popri_interval(table, &req.analyte, sex).map_err(|e| ApiError::bad_request("unknown_analyte", e.to_string()))?;
        Some(FrameworkResult {
            interval,
            flag: flags.map(|f| f.pop),
            point: None,
            setpoint_valid: None,
        })
    } else {
        None
    };
    let per = per_ri.map(|interval| FrameworkResult {
        interval,
        flag: flags.and_then(|f| f.per),
        point: None,
        setpoint_valid: per_valid,
    });
    let norma = norma_ri.map(|interval| FrameworkResult {
        interval,
        flag: flags.and_then(|f| f.norma),
        point: norma_point,
        setpoint_valid: None,
    });

    Ok(InterpretResponse {
        analyte: spec.code.clone(),
        unit: spec.unit.clone(),
        sex,
        age: req.age,
        history,
        value,
        pop_state,
        horizon_days: horizon,
        pop,
        per,
        norma,
        warnings,
    })
}

/// Seed used when a sweep request gives none.
pub const DEFAULT_SWEEP_SEED: u64 = 0;

/// One-at-a-time sweep around the caller's own case.
pub fn sweep(table: &AnalyteTable, ckpt: Option<&Checkpoint>, req: &SweepRequest) -> Result<SweepResponse, ApiError> {
    let feature: SweepFeature = req.feature.parse().map_err(|e: String| ApiError::bad_request("unknown_feature", e))?;
    table
        .get(&req.analyte)
        .map_err(|e| ApiError::bad_request("unknown_analyte", e.to_string()))?;
    let sex = parse_sex(&req.sex)?;
    check_age(req.age)?;
    if !(req.horizon_days.is_finite() && req.horizon_days >= 0.0) {
        return Err(ApiError::bad_request("invalid_horizon", "horizon_days must be non-negative"));
    }
    let grid = req.grid.clone().unwrap_or_else(|| feature.default_grid().to_vec());
    if grid.is_empty() || grid.iter().any(|g| !g.is_finite()) {
        return Err(ApiError::bad_request("invalid_grid", "grid must be a non-empty list of finite numbers"));
    }
    let history = normalize_history(table, &req.analyte, &req.history)?;
    if history.is_empty() {
        return Err(ApiError::unprocessable("history_empty", "a sweep needs at least one history point"));
    }
    let c = require_model(ckpt, None)?;
    let base = SweepBase {
        analyte: req.analyte.clone(),
        sex,
        age: req.age,
        history: history.iter().map(|p| (p.timestamp, p.value)).collect(),
        horizon_days: req.horizon_days,
    };
    let records = sweep_from_base(table, c, &base, feature, &grid, req.seed.unwrap_or(DEFAULT_SWEEP_SEED))
        .map_err(|e| ApiError::unprocessable("sweep_failed", e.to_string()))?;
    Ok(SweepResponse {
        analyte: req.analyte.clone(),
        feature,
        records,
    })
}
