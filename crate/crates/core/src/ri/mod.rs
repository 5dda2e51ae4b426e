//! Reference-interval frameworks and the three-way abnormality semantics.

pub mod classify;
pub mod gmm;
pub mod perri;
pub mod pop;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use classify::{classify_three_way, Flag, ThreeWayFlags};
pub use gmm::{fit_gmm_em, GmmError, GmmFit, GmmModel};
pub use perri::{perri_seed, perri_setpoint_valid, select_perri, select_perri_values, PerRi, PerRiError, MIN_BASELINE};
pub use pop::{popri_classify, popri_interval};

/// State of a value relative to the population interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabState {
    Low,
    Normal,
    High,
}

impl LabState {
    pub fn as_str(self) -> &'static str {
        match self {
            LabState::Low => "low",
            LabState::Normal => "normal",
            LabState::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Pop,
    Per,
    Norma,
}

impl Framework {
    pub const ALL: [Framework; 3] = [Framework::Pop, Framework::Per, Framework::Norma];

    pub fn as_str(self) -> &'static str {
        match self {
            Framework::Pop => "pop",
            Framework::Per => "per",
            Framework::Norma => "norma",
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Framework {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pop" => Ok(Framework::Pop),
            "per" => Ok(Framework::Per),
            "norma" => Ok(Framework::Norma),
            other => Err(format!("unknown framework {other:?}")),
        }
    }
}

/// A closed band `[lower, upper]` with the framework that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceInterval {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub framework: Framework,
    /// Free-form origin, e.g. `"gmm k=2 component=0"` or a model config id.
    pub provenance: String,
}

impl ReferenceInterval {
    pub fn new(lower: Option<f64>, upper: Option<f64>, framework: Framework, provenance: impl Into<String>) -> Self {
        Self {
            lower,
            upper,
            framework,
            provenance: provenance.into(),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower.is_none_or(|lo| v >= lo) && self.upper.is_none_or(|hi| v <= hi)
    }

    pub fn width(&self) -> Option<f64> {
        Some(self.upper? - self.lower?)
    }
}
