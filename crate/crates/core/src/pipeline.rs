//! Glue from cleaned series to framework classifications and evaluation tables.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytes::{AnalyteTable, Sex};
use crate::cohort::io::{format_time, read_raw_rows, IoError};
use crate::cohort::{
    clean_cohort, days_between, deviation_zscore, parse_measurements, split_baseline_index, CleanOutput, CohortFrame,
    CohortRow, Ineligible, Ingested, LabSeries, OutcomeTable,
};
use crate::eval::{
    self, bootstrap_ci, forecast_metrics, individuality_index, BinRate, CoxRow, EvalError, FlagRecord, MetricRow,
};
use crate::model::{forward, predict, Checkpoint, ModelError, PredictiveDistribution};
use crate::ri::{
    classify_three_way, perri_setpoint_valid, popri_classify, select_perri, Framework, LabState, ReferenceInterval,
    ThreeWayFlags,
};
use crate::train::{baseline_predict, example_tokens, BaselineKind, DEFAULT_AR_ORDER};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Analyte(#[from] crate::analytes::AnalyteError),
    #[error(transparent)]
    Policy(#[from] crate::cohort::PolicyError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    StdIo(#[from] std::io::Error),
}

/// Reads a measurement CSV, canonicalizes units and cleans every analyte.
pub fn load_series<R: Read>(table: &AnalyteTable, reader: R) -> Result<(Ingested, CleanOutput), PipelineError> {
    let rows = read_raw_rows(reader)?;
    let ingested = parse_measurements(table, &rows);
    let cleaned = clean_cohort(&ingested);
    Ok((ingested, cleaned))
}

/// Series that failed the eligibility policy, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub patient_id: String,
    pub analyte: String,
    pub reason: Ineligible,
}

/// One row per index measurement. Outcomes are re-anchored to the index
/// date: `time_days` counts from the index measurement, and labels ending on
/// or before it are dropped.
pub fn build_frame(
    series: &[LabSeries],
    outcomes: &OutcomeTable,
    policy: &crate::cohort::SplitPolicy,
) -> Result<(CohortFrame, Vec<Excluded>), PipelineError> {
    policy.validate()?;
    let mut first_seen: BTreeMap<&str, DateTime<Utc>> = BTreeMap::new();
    for s in series {
        if let Some(m) = s.measurements.first() {
            let e = first_seen.entry(&s.patient.id).or_insert(m.time);
            *e = (*e).min(m.time);
        }
    }
    let mut frame = CohortFrame::default();
    let mut excluded = Vec::new();
    for s in series {
        let split = match split_baseline_index(s, policy) {
            Ok(sp) => sp,
            Err(reason) => {
                excluded.push(Excluded {
                    patient_id: s.patient.id.clone(),
                    analyte: s.analyte.clone(),
                    reason,
                });
                continue;
            }
        };
        let origin = first_seen[s.patient.id.as_str()];
        for index in split.index {
            let offset = days_between(origin, index.time);
            let labels = outcomes
                .get(&s.patient.id)
                .map(|m| {
                    m.iter()
                        .filter(|(_, l)| l.time_days > offset)
                        .map(|(k, l)| {
                            let mut l = *l;
                            l.time_days -= offset;
                            (k.clone(), l)
                        })
                        .collect()
                })
                .unwrap_or_default();
            frame.rows.push(CohortRow {
                patient_id: s.patient.id.clone(),
                analyte: s.analyte.clone(),
                index,
                baseline: split.baseline.clone(),
                outcomes: labels,
            });
        }
    }
    Ok((frame, excluded))
}

/// Why a framework interval is missing for a test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Missing {
    /// The baseline was too short or EM failed.
    PerUnavailable,
    /// The personalized setpoint lies outside the population interval.
    PerSetpointInvalid,
    NoModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedTest {
    pub patient_id: String,
    pub analyte: String,
    pub sex: Sex,
    pub age: f64,
    pub time: DateTime<Utc>,
    pub value: f64,
    /// First index measurement of its series.
    pub first_index: bool,
    pub pop_state: LabState,
    pub per: Option<ReferenceInterval>,
    pub norma: Option<ReferenceInterval>,
    pub norma_point: Option<f64>,
    pub missing: Vec<Missing>,
    pub flags: ThreeWayFlags,
    pub deviation: Option<f64>,
    pub outcomes: BTreeMap<String, crate::cohort::OutcomeLabel>,
}

/// Pop, Per and NORMA classification of every index measurement. The
/// personalized interval comes from the baseline and is dropped when its
/// setpoint falls outside the population interval; the model interval is
/// the normal-state forecast from the baseline to the index date.
pub fn classify_frame(
    table: &AnalyteTable,
    frame: &CohortFrame,
    ckpt: Option<&Checkpoint>,
) -> Result<Vec<ClassifiedTest>, PipelineError> {
    if let Some(c) = ckpt {
        c.require_trained()?;
    }
    let mut out = Vec::with_capacity(frame.rows.len());
    // baselines repeat across the index rows of one series
    let mut per_cache: BTreeMap<(String, String), Option<Result<ReferenceInterval, Missing>>> = BTreeMap::new();
    let mut seen: std::collections::BTreeSet<(String, String)> = Default::default();
    for row in &frame.rows {
        let b = &row.baseline;
        let sex = b.patient.sex;
        let key = (row.patient_id.clone(), row.analyte.clone());
        let per_res = per_cache
            .entry(key.clone())
            .or_insert_with(|| {
                Some(match select_perri(b) {
                    Err(_) => Err(Missing::PerUnavailable),
                    Ok(per) => match perri_setpoint_valid(table, &per, &row.analyte, sex) {
                        Ok(true) => Ok(per.interval),
                        _ => Err(Missing::PerSetpointInvalid),
                    },
                })
            })
            .clone()
            .expect("filled");
        let mut missing = Vec::new();
        let per = match per_res {
            Ok(ri) => Some(ri),
            Err(m) => {
                missing.push(m);
                None
            }
        };
        let (norma, norma_point) = match ckpt {
            Some(c) => {
                let last = b.measurements.last().expect("eligible baseline is non-empty").time;
                let horizon = days_between(last, row.index.time).max(0.0);
                let p = predict(table, &c.params, &c.config, b, horizon)?;
                (Some(p.interval), Some(p.point))
            }
            None => {
                missing.push(Missing::NoModel);
                (None, None)
            }
        };
        let pop_state = popri_classify(table, row.index.value, &row.analyte, sex)?;
        let flags = classify_three_way(row.index.value, pop_state, per.as_ref(), norma.as_ref());
        out.push(ClassifiedTest {
            patient_id: row.patient_id.clone(),
            analyte: row.analyte.clone(),
            sex,
            age: b.patient.age,
            time: row.index.time,
            value: row.index.value,
            first_index: seen.insert(key),
            pop_state,
            per,
            norma,
            norma_point,
            missing,
            flags,
            deviation: deviation_zscore(&row.index, b),
            outcomes: row.outcomes.clone(),
        });
    }
    Ok(out)
}

pub fn flag_records(tests: &[ClassifiedTest]) -> Vec<FlagRecord> {
    tests
        .iter()
        .map(|t| FlagRecord {
            patient_id: t.patient_id.clone(),
            analyte: t.analyte.clone(),
            time: t.time,
            value: t.value,
            flags: t.flags,
        })
        .collect()
}

fn fmt_bound(ri: &Option<ReferenceInterval>, upper: bool) -> String {
    let v = ri.as_ref().and_then(|r| if upper { r.upper } else { r.lower });
    eval::fmt_opt(v)
}

fn fmt_flag(f: Option<crate::ri::Flag>) -> &'static str {
    match f {
        Some(crate::ri::Flag::Abnormal) => "abnormal",
        Some(crate::ri::Flag::Normal) => "normal",
        None => eval::UNDEFINED,
    }
}

pub const CLASSIFIED_HEADER: [&str; 16] = [
    "patient_id",
    "analyte",
    "sex",
    "age",
    "timestamp",
    "value",
    "first_index",
    "pop_state",
    "per_lower",
    "per_upper",
    "norma_lower",
    "norma_upper",
    "norma_point",
    "pop_flag",
    "per_flag",
    "norma_flag",
];

pub fn write_classified<W: Write>(writer: W, tests: &[ClassifiedTest]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CLASSIFIED_HEADER)?;
    for t in tests {
        w.write_record([
            t.patient_id.clone(),
            t.analyte.clone(),
            t.sex.as_code().to_string(),
            t.age.to_string(),
            format_time(&t.time),
            t.value.to_string(),
            u8::from(t.first_index).to_string(),
            t.pop_state.as_str().to_string(),
            fmt_bound(&t.per, false),
            fmt_bound(&t.per, true),
            fmt_bound(&t.norma, false),
            fmt_bound(&t.norma, true),
            eval::fmt_opt(t.norma_point),
            fmt_flag(Some(t.flags.pop)).to_string(),
            fmt_flag(t.flags.per).to_string(),
            fmt_flag(t.flags.norma).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn by_analyte<'a>(tests: &'a [ClassifiedTest]) -> BTreeMap<&'a str, Vec<&'a ClassifiedTest>> {
    let mut m: BTreeMap<&str, Vec<&ClassifiedTest>> = BTreeMap::new();
    for t in tests {
        m.entry(t.analyte.as_str()).or_default().push(t);
    }
    m
}

fn flag_of(t: &ClassifiedTest, fw: Framework) -> Option<bool> {
    match fw {
        Framework::Pop => Some(t.flags.pop.is_abnormal()),
        Framework::Per => t.flags.per.map(|f| f.is_abnormal()),
        Framework::Norma => t.flags.norma.map(|f| f.is_abnormal()),
    }
}

/// Prevalence per framework and reclassification among population-normal
/// tests, per analyte and pooled as `"all"`.
pub fn prevalence_rows(tests: &[ClassifiedTest]) -> Result<Vec<MetricRow>, PipelineError> {
    let mut groups = by_analyte(tests);
    groups.insert("all", tests.iter().collect());
    let mut rows = Vec::new();
    for (analyte, ts) in groups {
        let recs: Vec<FlagRecord> = flag_records(&ts.into_iter().cloned().collect::<Vec<_>>());
        let p = match eval::prevalence_reclassification(&recs) {
            Ok(p) => p,
            Err(EvalError::Empty) => continue,
            Err(e) => return Err(e.into()),
        };
        for (fw, v) in &p.prevalence {
            rows.push(MetricRow::new(analyte, fw.as_str(), "prevalence", Some(*v), p.n_tests));
        }
        for (fw, v) in &p.reclassification {
            rows.push(MetricRow::new(analyte, fw.as_str(), "reclassification", *v, p.n_pop_normal));
        }
    }
    Ok(rows)
}

pub fn lead_time_rows(tests: &[ClassifiedTest]) -> Vec<MetricRow> {
    let mut groups = by_analyte(tests);
    groups.insert("all", tests.iter().collect());
    let mut rows = Vec::new();
    for (analyte, ts) in groups {
        let recs = flag_records(&ts.into_iter().cloned().collect::<Vec<_>>());
        let lt = eval::lead_time(&recs);
        let iqr = lt.q1_days.zip(lt.q3_days);
        rows.push(MetricRow::new(analyte, "norma", "flags", Some(lt.n_flags as f64), lt.n_flags));
        rows.push(MetricRow::new(analyte, "norma", "confirmed", Some(lt.n_confirmed as f64), lt.n_flags));
        rows.push(MetricRow::new(analyte, "norma", "median_lead_days", lt.median_days, lt.n_confirmed).with_ci(iqr));
    }
    rows
}

/// Decile (deviation) or quintile (raw value) mortality bins per analyte;
/// analytes below the minimum count are skipped.
pub fn deviation_rows(tests: &[ClassifiedTest], outcome: &str, raw_values: bool) -> Vec<(String, Vec<BinRate>)> {
    let mut out = Vec::new();
    for (analyte, ts) in by_analyte(tests) {
        let ts: Vec<&&ClassifiedTest> = ts.iter().filter(|t| t.outcomes.contains_key(outcome)).collect();
        let scores: Vec<f64> = ts
            .iter()
            .map(|t| if raw_values { t.value } else { t.deviation.unwrap_or(f64::NAN) })
            .collect();
        let events: Vec<bool> = ts.iter().map(|t| t.outcomes[outcome].event).collect();
        match eval::deviation_mortality(&scores, &events, if raw_values { 5 } else { 10 }) {
            Ok(bins) => out.push((analyte.to_string(), bins)),
            Err(e) => log::warn!("{analyte}: {e}"),
        }
    }
    out
}

pub const BIN_HEADER: [&str; 9] = ["analyte", "bin", "lower_edge", "upper_edge", "n", "events", "rate", "ci_low", "ci_high"];

pub fn write_bins<W: Write>(writer: W, bins: &[(String, Vec<BinRate>)]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(BIN_HEADER)?;
    for (a, bs) in bins {
        for b in bs {
            w.write_record([
                a.clone(),
                b.bin.to_string(),
                b.lower_edge.to_string(),
                b.upper_edge.to_string(),
                b.n.to_string(),
                b.events.to_string(),
                b.rate.to_string(),
                b.ci_low.to_string(),
                b.ci_high.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// PPV, sensitivity, specificity and balanced accuracy on population-normal
/// tests with a label for `outcome`.
pub fn confusion_rows(tests: &[ClassifiedTest], outcome: &str) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (analyte, ts) in by_analyte(tests) {
        for fw in [Framework::Per, Framework::Norma] {
            let pairs: Vec<(bool, bool)> = ts
                .iter()
                .filter(|t| !t.flags.pop.is_abnormal())
                .filter_map(|t| Some((flag_of(t, fw)?, t.outcomes.get(outcome)?.event)))
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let m = eval::confusion_metrics(eval::Confusion::from_pairs(pairs.iter().copied()));
            let n = pairs.len();
            let ev = pairs.iter().filter(|p| p.1).count();
            for (name, v) in [
                ("ppv", m.ppv),
                ("sensitivity", m.sensitivity),
                ("specificity", m.specificity),
                ("balanced_accuracy", m.balanced_accuracy),
            ] {
                rows.push(MetricRow::new(analyte, fw.as_str(), name, v, n).with_events(ev));
            }
        }
    }
    rows
}

/// Cox models of `outcome` on each framework's flag for the first index
/// test of every series, per analyte, with BH adjustment across all fits.
pub fn cox_results(
    tests: &[ClassifiedTest],
    outcome: &str,
    seed: u64,
    resamples: usize,
) -> Vec<(Framework, Result<eval::CoxResult, EvalError>)> {
    let mut out = Vec::new();
    for (analyte, ts) in by_analyte(tests) {
        for fw in Framework::ALL {
            let rows: Vec<CoxRow> = ts
                .iter()
                .filter(|t| t.first_index)
                .filter_map(|t| {
                    let l = t.outcomes.get(outcome)?;
                    Some(CoxRow {
                        id: t.patient_id.clone(),
                        flag: flag_of(t, fw)?,
                        age: t.age,
                        male: t.sex == Sex::Male,
                        event: l.event,
                        time_days: l.time_days,
                    })
                })
                .collect();
            if rows.is_empty() {
                continue;
            }
            out.push((fw, eval::cox_fit(&rows, analyte, outcome, seed, resamples)));
        }
    }
    let mut fitted: Vec<eval::CoxResult> = out.iter().filter_map(|(_, r)| r.as_ref().ok().cloned()).collect();
    eval::adjust_p_values(&mut fitted);
    let mut it = fitted.into_iter();
    for (_, r) in out.iter_mut() {
        if let Ok(res) = r {
            *res = it.next().expect("same count");
        }
    }
    out
}

pub const COX_HEADER: [&str; 18] = [
    "analyte",
    "framework",
    "outcome",
    "hr",
    "hr_ci_low",
    "hr_ci_high",
    "p_value",
    "p_adjusted",
    "c_index",
    "c_ci_low",
    "c_ci_high",
    "auc_1y",
    "auc_3y",
    "auc_5y",
    "auc_10y",
    "n_train",
    "n_test",
    "events_train_test",
];

pub fn write_cox<W: Write>(writer: W, results: &[(Framework, Result<eval::CoxResult, EvalError>)]) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COX_HEADER)?;
    for (fw, r) in results {
        let Ok(r) = r else { continue };
        let auc = |i: usize| eval::fmt_opt(r.td_auc.get(i).and_then(|a| a.auc));
        w.write_record([
            r.analyte.clone(),
            fw.as_str().to_string(),
            r.outcome.clone(),
            r.hr.to_string(),
            r.hr_ci.0.to_string(),
            r.hr_ci.1.to_string(),
            r.p_value.to_string(),
            eval::fmt_opt(r.p_adjusted),
            eval::fmt_opt(r.c_index),
            eval::fmt_opt(r.c_index_ci.map(|c| c.0)),
            eval::fmt_opt(r.c_index_ci.map(|c| c.1)),
            auc(0),
            auc(1),
            auc(2),
            auc(3),
            r.n_train.to_string(),
            r.n_test.to_string(),
            format!("{}/{}", r.events_train, r.events_test),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Within/between CV and individuality index per analyte from full series.
pub fn individuality_rows(series: &[LabSeries], resamples: usize, seed: u64) -> Vec<MetricRow> {
    let mut groups: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for s in series {
        groups.entry(&s.analyte).or_default().push(s.values());
    }
    let mut rows = Vec::new();
    for (analyte, vals) in groups {
        match individuality_index(&vals, resamples, seed) {
            Ok(r) => {
                let n = r.n_patients;
                rows.push(MetricRow::new(analyte, "cohort", "cv_intra", Some(r.cv_intra), n).with_ci(r.cv_intra_ci));
                rows.push(MetricRow::new(analyte, "cohort", "cv_inter", Some(r.cv_inter), n).with_ci(r.cv_inter_ci));
                rows.push(MetricRow::new(analyte, "cohort", "ii", Some(r.ii), n).with_ci(r.ii_ci));
            }
            Err(e) => log::warn!("{analyte}: {e}"),
        }
    }
    rows
}

/// Next-value distribution for `series[target]` conditioned on its observed state.
pub fn forecast_next(
    table: &AnalyteTable,
    ckpt: &Checkpoint,
    series: &LabSeries,
    target: usize,
) -> Result<PredictiveDistribution, ModelError> {
    let (tokens, _) = example_tokens(table, &ckpt.config, series, target)?;
    forward(&ckpt.params, &ckpt.config, &tokens)
}

/// Last-value forecasting on held-out series: NORMA (conditioned on the
/// observed state of the target) against the last-value, patient-mean and
/// AR baselines. MAE carries a bootstrap CI; NORMA also reports the coverage
/// of its interval.
pub fn forecast_rows(
    table: &AnalyteTable,
    ckpt: Option<&Checkpoint>,
    series: &[LabSeries],
    resamples: usize,
    seed: u64,
) -> Result<Vec<MetricRow>, PipelineError> {
    let mut groups: BTreeMap<String, Vec<&LabSeries>> = BTreeMap::new();
    for s in series.iter().filter(|s| s.len() >= 2) {
        groups.entry(s.analyte.clone()).or_default().push(s);
        groups.entry("all".into()).or_default().push(s);
    }
    let mut rows = Vec::new();
    for (analyte, ss) in groups {
        let actual: Vec<f64> = ss.iter().map(|s| s.measurements[s.len() - 1].value).collect();
        let mut preds: Vec<(&str, Vec<f64>)> = Vec::new();
        let mut covered = Vec::new();
        if let Some(c) = ckpt {
            let mut p = Vec::with_capacity(ss.len());
            for (s, y) in ss.iter().zip(&actual) {
                let d = forecast_next(table, c, s, s.len() - 1)?;
                let (lo, hi) = d.dist.band();
                covered.push(lo <= *y && *y <= hi);
                p.push(d.point());
            }
            preds.push(("norma", p));
        }
        for kind in BaselineKind::ALL {
            let p = ss
                .iter()
                .map(|s| {
                    let h = s.values();
                    baseline_predict(kind, &h[..h.len() - 1], DEFAULT_AR_ORDER)
                        .expect("non-empty history")
                        .value
                })
                .collect();
            preds.push((kind.as_str(), p));
        }
        for (model, p) in &preds {
            let Ok(m) = forecast_metrics(p, &actual) else { continue };
            let mae_ci = bootstrap_ci(actual.len(), resamples, seed, |idx| {
                Some(idx.iter().map(|&i| (p[i] - actual[i]).abs()).sum::<f64>() / idx.len() as f64)
            });
            rows.push(MetricRow::new(&analyte, model, "mae", Some(m.mae), m.n).with_ci(mae_ci));
            rows.push(MetricRow::new(&analyte, model, "mape", Some(m.mape), m.n));
            rows.push(MetricRow::new(&analyte, model, "r2", m.r2, m.n));
        }
        if !covered.is_empty() {
            let k = covered.iter().filter(|c| **c).count();
            rows.push(
                MetricRow::new(&analyte, "norma", "coverage", Some(k as f64 / covered.len() as f64), covered.len())
                    .with_ci(eval::wilson_interval(k, covered.len(), 1.96)),
            );
        }
    }
    Ok(rows)
}
