use super::{Framework, LabState, ReferenceInterval};
use crate::analytes::{AnalyteError, AnalyteTable, Sex};

/// Classifies a value against the sex-specific population range; bounds are
/// inclusive and an absent bound never flags.
pub fn popri_classify(table: &AnalyteTable, value: f64, analyte: &str, sex: Sex) -> Result<LabState, AnalyteError> {
    let b = table.get(analyte)?.bounds(sex);
    Ok(match (b.lower, b.upper) {
        (Some(lo), _) if value < lo => LabState::Low,
        (_, Some(hi)) if value > hi => LabState::High,
        _ => LabState::Normal,
    })
}

pub fn popri_interval(table: &AnalyteTable, analyte: &str, sex: Sex) -> Result<ReferenceInterval, AnalyteError> {
    let b = table.get(analyte)?.bounds(sex);
    Ok(ReferenceInterval::new(b.lower, b.upper, Framework::Pop, format!("population {}", sex.as_code())))
}
