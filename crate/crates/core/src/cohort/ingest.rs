use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{Measurement, Patient};
use crate::analytes::{AnalyteError, AnalyteTable, Sex};

/// One input row exactly as read, before any parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub patient_id: String,
    pub sex: String,
    pub age: String,
    pub analyte: String,
    pub unit: String,
    pub value: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    UnknownAnalyte,
    UnitUnmapped,
    NonPositive,
    MalformedValue,
    MalformedTimestamp,
    MalformedSex,
    MalformedAge,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::UnknownAnalyte => "unknown-analyte",
            RejectReason::UnitUnmapped => "unit-unmapped",
            RejectReason::NonPositive => "non-positive",
            RejectReason::MalformedValue => "malformed-value",
            RejectReason::MalformedTimestamp => "malformed-timestamp",
            RejectReason::MalformedSex => "malformed-sex",
            RejectReason::MalformedAge => "malformed-age",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// Zero-based position of the row in the input.
    pub row: usize,
    pub reason: RejectReason,
}

/// Accepted measurements keyed by patient, plus the rejection report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingested {
    pub patients: BTreeMap<String, Patient>,
    /// `(patient id, measurement)` in input order.
    pub measurements: Vec<(String, Measurement)>,
    pub rejections: Vec<Rejection>,
}

impl Ingested {
    pub fn accepted(&self) -> usize {
        self.measurements.len()
    }
}

/// Parses and canonicalizes raw rows. Every row either yields one
/// measurement or exactly one rejection; the first failing check wins.
/// Demographics are taken from a patient's first accepted row.
pub fn parse_measurements(table: &AnalyteTable, rows: &[RawRow]) -> Ingested {
    let mut out = Ingested::default();
    for (i, row) in rows.iter().enumerate() {
        match parse_row(table, row) {
            Ok((patient, m)) => {
                out.patients.entry(patient.id.clone()).or_insert(patient);
                out.measurements.push((row.patient_id.clone(), m));
            }
            Err(reason) => out.rejections.push(Rejection { row: i, reason }),
        }
    }
    out
}

fn parse_row(table: &AnalyteTable, row: &RawRow) -> Result<(Patient, Measurement), RejectReason> {
    let analyte = row.analyte.trim();
    let factor = table.conversion(analyte, &row.unit).map_err(|e| match e {
        AnalyteError::Unknown(_) => RejectReason::UnknownAnalyte,
        AnalyteError::UnitUnmapped { .. } => RejectReason::UnitUnmapped,
    })?;
    let raw: f64 = row
        .value
        .trim()
        .parse()
        .map_err(|_| RejectReason::MalformedValue)?;
    if !raw.is_finite() {
        return Err(RejectReason::MalformedValue);
    }
    if raw <= 0.0 {
        return Err(RejectReason::NonPositive);
    }
    let time = DateTime::parse_from_rfc3339(row.timestamp.trim())
        .map_err(|_| RejectReason::MalformedTimestamp)?
        .with_timezone(&Utc);
    let sex: Sex = row.sex.parse().map_err(|_| RejectReason::MalformedSex)?;
    let age: f64 = row
        .age
        .trim()
        .parse()
        .ok()
        .filter(|a: &f64| a.is_finite() && *a >= 0.0)
        .ok_or(RejectReason::MalformedAge)?;
    Ok((
        Patient {
            id: row.patient_id.clone(),
            sex,
            age,
        },
        Measurement {
            time,
            value: raw * factor,
            analyte: analyte.to_string(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(analyte: &str, unit: &str, value: &str, ts: &str) -> RawRow {
        RawRow {
            patient_id: "p1".into(),
            sex: "M".into(),
            age: "50".into(),
            analyte: analyte.into(),
            unit: unit.into(),
            value: value.into(),
            timestamp: ts.into(),
        }
    }

    const T0: &str = "2020-01-01T00:00:00Z";

    #[test]
    fn identity_unit() {
        let out = parse_measurements(AnalyteTable::shipped(), &[raw("GLU", "mg/dL", "85", T0)]);
        assert!(out.rejections.is_empty());
        let (_, m) = &out.measurements[0];
        assert_eq!(m.value, 85.0);
        assert_eq!(m.analyte, "GLU");
        assert_eq!(m.time.to_rfc3339(), "2020-01-01T00:00:00+00:00");
    }

    #[test]
    fn non_positive_rejected() {
        let out = parse_measurements(AnalyteTable::shipped(), &[raw("GLU", "mg/dL", "-3", T0)]);
        assert!(out.measurements.is_empty());
        assert_eq!(
            out.rejections,
            vec![Rejection {
                row: 0,
                reason: RejectReason::NonPositive
            }]
        );
        let zero = parse_measurements(AnalyteTable::shipped(), &[raw("GLU", "mg/dL", "0", T0)]);
        assert_eq!(zero.rejections[0].reason, RejectReason::NonPositive);
    }

    #[test]
    fn mmol_glucose_converted() {
        let out = parse_measurements(AnalyteTable::shipped(), &[raw("GLU", "mmol/L", "5.0", T0)]);
        let v = out.measurements[0].1.value;
        assert!((v - 90.09).abs() < 1e-9, "{v}");
    }

    #[test]
    fn rejection_reasons() {
        let rows = vec![
            raw("XYZ", "mg/dL", "1", T0),
            raw("GLU", "g/furlong", "1", T0),
            raw("GLU", "mg/dL", "abc", T0),
            raw("GLU", "mg/dL", "80", "yesterday"),
            raw("GLU", "mg/dL", "80", T0),
        ];
        let out = parse_measurements(AnalyteTable::shipped(), &rows);
        let reasons: Vec<_> = out.rejections.iter().map(|r| (r.row, r.reason.as_str())).collect();
        assert_eq!(
            reasons,
            vec![
                (0, "unknown-analyte"),
                (1, "unit-unmapped"),
                (2, "malformed-value"),
                (3, "malformed-timestamp"),
            ]
        );
        assert_eq!(out.accepted(), 1);
    }

    proptest::proptest! {
        #[test]
        fn every_row_accounted_once(
            specs in proptest::collection::vec((0usize..4, -50.0f64..500.0, proptest::bool::ANY), 0..40)
        ) {
            let analytes = ["GLU", "HGB", "NOPE", "K"];
            let rows: Vec<RawRow> = specs
                .iter()
                .map(|(a, v, good_ts)| raw(analytes[*a], if *a == 1 { "g/dL" } else { "mg/dL" }, &v.to_string(), if *good_ts { T0 } else { "bad" }))
                .collect();
            let out = parse_measurements(AnalyteTable::shipped(), &rows);
            proptest::prop_assert_eq!(out.accepted() + out.rejections.len(), rows.len());
            let mut seen: Vec<usize> = out.rejections.iter().map(|r| r.row).collect();
            seen.dedup();
            proptest::prop_assert_eq!(seen.len(), out.rejections.len());
        }
    }
}
