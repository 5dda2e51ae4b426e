//! CSV schemas: raw/canonical measurements, outcomes and rejection reports.

use std::io::{Read, Write};

use chrono::SecondsFormat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Ingested, LabSeries, OutcomeLabel, OutcomeTable, RawRow, Rejection};
use crate::analytes::AnalyteTable;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("outcomes row {row}: {msg}")]
    Outcome { row: usize, msg: String },
}

pub const MEASUREMENT_HEADER: [&str; 7] = ["patient_id", "sex", "age", "analyte", "unit", "value", "timestamp"];

/// Reads raw rows; every field is kept as a string so that malformed cells
/// turn into per-row rejections instead of a failed read.
pub fn read_raw_rows<R: Read>(reader: R) -> Result<Vec<RawRow>, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(IoError::from)).collect()
}

pub fn format_time(t: &chrono::DateTime<chrono::Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Writes measurements in the input schema using canonical units.
pub fn write_canonical<W: Write>(writer: W, table: &AnalyteTable, ingested: &Ingested) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MEASUREMENT_HEADER)?;
    for (pid, m) in &ingested.measurements {
        let p = &ingested.patients[pid];
        let unit = table.get(&m.analyte).map(|s| s.unit.as_str()).unwrap_or("");
        w.write_record([
            pid.as_str(),
            p.sex.as_code(),
            &p.age.to_string(),
            &m.analyte,
            unit,
            &m.value.to_string(),
            &format_time(&m.time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes cleaned series in the measurement schema.
pub fn write_series<W: Write>(writer: W, table: &AnalyteTable, series: &[LabSeries]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MEASUREMENT_HEADER)?;
    for s in series {
        let unit = table.get(&s.analyte).map(|a| a.unit.as_str()).unwrap_or("");
        for m in &s.measurements {
            w.write_record([
                s.patient.id.as_str(),
                s.patient.sex.as_code(),
                &s.patient.age.to_string(),
                &s.analyte,
                unit,
                &m.value.to_string(),
                &format_time(&m.time),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_rejections<W: Write>(writer: W, rejections: &[Rejection]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row", "reason"])?;
    for r in rejections {
        w.write_record([r.row.to_string().as_str(), r.reason.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OutcomeRecord {
    patient_id: String,
    outcome: String,
    event: String,
    time_days: f64,
}

fn parse_event(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

pub fn read_outcomes<R: Read>(reader: R) -> Result<OutcomeTable, IoError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut table = OutcomeTable::new();
    for (i, rec) in rdr.deserialize::<OutcomeRecord>().enumerate() {
        let rec = rec?;
        let event = parse_event(&rec.event).ok_or_else(|| IoError::Outcome {
            row: i,
            msg: format!("event {:?} is not 0/1", rec.event),
        })?;
        if !(rec.time_days.is_finite() && rec.time_days >= 0.0) {
            return Err(IoError::Outcome {
                row: i,
                msg: "time_days must be non-negative".into(),
            });
        }
        table.entry(rec.patient_id).or_default().insert(
            rec.outcome,
            OutcomeLabel {
                event,
                time_days: rec.time_days,
            },
        );
    }
    Ok(table)
}

pub fn write_outcomes<W: Write>(writer: W, outcomes: &OutcomeTable) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["patient_id", "outcome", "event", "time_days"])?;
    for (pid, m) in outcomes {
        for (name, label) in m {
            w.write_record([
                pid.as_str(),
                name.as_str(),
                if label.event { "1" } else { "0" },
                &label.time_days.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::parse_measurements;

    #[test]
    fn raw_roundtrip_to_canonical() {
        let input = "patient_id,sex,age,analyte,unit,value,timestamp\n\
                     p1,F,44,GLU,mmol/L,5.0,2020-01-01T08:00:00Z\n\
                     p1,F,44,GLU,mg/dL,-1,2020-02-01T08:00:00Z\n";
        let rows = read_raw_rows(input.as_bytes()).unwrap();
        let table = AnalyteTable::shipped();
        let ing = parse_measurements(table, &rows);
        let mut out = Vec::new();
        write_canonical(&mut out, table, &ing).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "patient_id,sex,age,analyte,unit,value,timestamp\np1,F,44,GLU,mg/dL,90.09,2020-01-01T08:00:00Z\n"
        );
        let mut rej = Vec::new();
        write_rejections(&mut rej, &ing.rejections).unwrap();
        assert_eq!(String::from_utf8(rej).unwrap(), "row,reason\n1,non-positive\n");
    }

    #[test]
    fn outcomes_parse() {
        let input = "patient_id,outcome,event,time_days\np1,death,1,400\np2,death,0,3650.5\n";
        let t = read_outcomes(input.as_bytes()).unwrap();
        assert!(t["p1"]["death"].event);
        assert_eq!(t["p2"]["death"].time_days, 3650.5);
        let bad = "patient_id,outcome,event,time_days\np1,death,maybe,1\n";
        assert!(read_outcomes(bad.as_bytes()).is_err());
    }
}
