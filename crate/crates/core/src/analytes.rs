//! The shipped 30-analyte table: canonical units, population reference
//! bounds (sex-stratified where applicable) and unit conversion multipliers.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const ANALYTES_JSON: &str = include_str!("../data/analytes.json");
const UNITS_JSON: &str = include_str!("../data/units.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn index(self) -> usize {
        match self {
            Sex::Female => 0,
            Sex::Male => 1,
        }
    }

    pub fn as_code(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_code())
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("unrecognized sex {0:?}")]
pub struct ParseSexError(pub String);

impl FromStr for Sex {
    type Err = ParseSexError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" => Ok(Sex::Female),
            "m" | "male" => Ok(Sex::Male),
            _ => Err(ParseSexError(s.to_string())),
        }
    }
}

/// A closed reference band; either side may be absent (one-sided ranges).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl Bounds {
    pub fn new(lower: Option<f64>, upper: Option<f64>) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower.is_none_or(|lo| v >= lo) && self.upper.is_none_or(|hi| v <= hi)
    }

    /// Lower bound with an absent side read as zero; lab values are positive.
    pub fn lower_or_zero(&self) -> f64 {
        self.lower.unwrap_or(0.0)
    }

    /// Range width, with a missing lower bound read as zero. `None` when the
    /// upper bound is missing.
    pub fn width(&self) -> Option<f64> {
        self.upper.map(|hi| hi - self.lower_or_zero())
    }

    pub fn midpoint(&self) -> Option<f64> {
        self.upper.map(|hi| 0.5 * (hi + self.lower_or_zero()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyteSpec {
    pub code: String,
    pub name: String,
    pub unit: String,
    pub ri_female: Bounds,
    pub ri_male: Bounds,
    pub sex_stratified: bool,
}

impl AnalyteSpec {
    pub fn bounds(&self, sex: Sex) -> Bounds {
        match sex {
            Sex::Female => self.ri_female,
            Sex::Male => self.ri_male,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum AnalyteError {
    #[error("unknown analyte {0:?}")]
    Unknown(String),
    #[error("unit {unit:?} is not mapped for analyte {analyte}")]
    UnitUnmapped { analyte: String, unit: String },
}

/// Analyte lookup plus the per-analyte unit multiplier table.
#[derive(Debug)]
pub struct AnalyteTable {
    specs: Vec<AnalyteSpec>,
    index: BTreeMap<String, usize>,
    // analyte -> normalized unit -> multiplier into the canonical unit
    units: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Lower-case and fold micro signs so `µmol/L`, `umol/l` and `μmol/L` match.
fn normalize_unit(unit: &str) -> String {
    unit.trim()
        .replace(['µ', 'μ'], "u")
        .to_ascii_lowercase()
}

impl AnalyteTable {
    /// The shipped table (parsed once, shared).
    pub fn shipped() -> &'static AnalyteTable {
        static TABLE: OnceLock<AnalyteTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            let specs: Vec<AnalyteSpec> =
                serde_json::from_str(ANALYTES_JSON).expect("shipped analyte table is valid JSON");
            let units: BTreeMap<String, BTreeMap<String, f64>> =
                serde_json::from_str(UNITS_JSON).expect("shipped unit map is valid JSON");
            AnalyteTable::new(specs, units)
        })
    }

    pub fn new(specs: Vec<AnalyteSpec>, units: BTreeMap<String, BTreeMap<String, f64>>) -> Self {
        let index = specs
            .iter()
            .enumerate()
            .map(|(i, s)| (s.code.clone(), i))
            .collect();
        let units = units
            .into_iter()
            .map(|(code, m)| {
                let m = m.into_iter().map(|(u, f)| (normalize_unit(&u), f)).collect();
                (code, m)
            })
            .collect();
        Self { specs, index, units }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AnalyteSpec> {
        self.specs.iter()
    }

    pub fn get(&self, code: &str) -> Result<&AnalyteSpec, AnalyteError> {
        self.index
            .get(code)
            .map(|&i| &self.specs[i])
            .ok_or_else(|| AnalyteError::Unknown(code.to_string()))
    }

    /// Stable integer id of an analyte (its row in the table), used as the
    /// embedding index.
    pub fn id(&self, code: &str) -> Result<usize, AnalyteError> {
        self.index
            .get(code)
            .copied()
            .ok_or_else(|| AnalyteError::Unknown(code.to_string()))
    }

    /// Multiplier taking a value in `unit` to the analyte's canonical unit.
    pub fn conversion(&self, code: &str, unit: &str) -> Result<f64, AnalyteError> {
        let spec = self.get(code)?;
        let key = normalize_unit(unit);
        if key == normalize_unit(&spec.unit) {
            return Ok(1.0);
        }
        self.units
            .get(code)
            .and_then(|m| m.get(&key))
            .copied()
            .ok_or_else(|| AnalyteError::UnitUnmapped {
                analyte: code.to_string(),
                unit: unit.to_string(),
            })
    }

    /// Accepted non-canonical units and their multipliers, in normalized spelling.
    pub fn units(&self, code: &str) -> Vec<(String, f64)> {
        self.units
            .get(code)
            .map(|m| m.iter().map(|(u, f)| (u.clone(), *f)).collect())
            .unwrap_or_default()
    }

    pub fn to_canonical(&self, code: &str, unit: &str, value: f64) -> Result<f64, AnalyteError> {
        Ok(value * self.conversion(code, unit)?)
    }
}
