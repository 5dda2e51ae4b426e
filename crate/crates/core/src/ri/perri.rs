//! Personalized intervals: dominant mixture component of the baseline,
//! order chosen by AIC, interval = mean ± 2 SD.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::gmm::{fit_gmm_em, GmmError, GmmModel, MAX_COMPONENTS};
use super::{Framework, ReferenceInterval};
use crate::analytes::{AnalyteError, AnalyteTable, Sex};
use crate::cohort::LabSeries;
use crate::stats;

pub const MIN_BASELINE: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum PerRiError {
    #[error("baseline has {0} measurements, need at least {MIN_BASELINE}")]
    Ineligible(usize),
    #[error(transparent)]
    Gmm(#[from] GmmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerRi {
    pub interval: ReferenceInterval,
    pub model: GmmModel,
    /// Index of the dominant component within `model`.
    pub component: usize,
    /// `(k, aic)` for every order that was fitted.
    pub candidates: Vec<(usize, f64)>,
}

impl PerRi {
    pub fn setpoint(&self) -> f64 {
        self.model.means[self.component]
    }
}

/// Seed for a patient-analyte fit, stable across runs and platforms.
pub fn perri_seed(patient_id: &str, analyte: &str) -> u64 {
    stats::hash_parts(&[patient_id, analyte])
}

/// Fits the personalized interval for a baseline series, seeding EM from
/// the patient id and analyte.
pub fn select_perri(baseline: &LabSeries) -> Result<PerRi, PerRiError> {
    select_perri_values(&baseline.values(), perri_seed(&baseline.patient.id, &baseline.analyte))
}

/// Fits k = 1..3 (skipping orders with n < 3k), keeps the minimum-AIC model
/// (ties to the smaller k), and reads the interval off the component that
/// wins the most hard assignments. Assignment ties go to the larger weight,
/// then the lower index.
pub fn select_perri_values(values: &[f64], seed: u64) -> Result<PerRi, PerRiError> {
    let n = values.len();
    if n < MIN_BASELINE {
        return Err(PerRiError::Ineligible(n));
    }
    let mut best: Option<GmmModel> = None;
    let mut candidates = Vec::new();
    for k in 1..=MAX_COMPONENTS {
        if n < 3 * k {
            break;
        }
        let fit = match fit_gmm_em(values, k, stats::derive_seed(seed, k as u64)) {
            Ok(f) => f,
            // no admissible restart: this order is not a candidate
            Err(GmmError::Collapsed) if k > 1 => continue,
            Err(e) => return Err(e.into()),
        };
        candidates.push((k, fit.model.aic));
        if best.as_ref().is_none_or(|b| fit.model.aic < b.aic) {
            best = Some(fit.model);
        }
    }
    let model = best.expect("k = 1 is always fitted for n >= 5");

    let mut counts = vec![0usize; model.k];
    for &x in values {
        counts[model.assign(x)] += 1;
    }
    let mut component = 0;
    for j in 1..model.k {
        let better = counts[j] > counts[component]
            || (counts[j] == counts[component] && model.weights[j] > model.weights[component]);
        if better {
            component = j;
        }
    }
    let (mu, sd) = (model.means[component], model.sds[component]);
    let interval = ReferenceInterval::new(
        Some(mu - 2.0 * sd),
        Some(mu + 2.0 * sd),
        Framework::Per,
        format!("gmm k={} component={}", model.k, component),
    );
    Ok(PerRi {
        interval,
        model,
        component,
        candidates,
    })
}

/// Whether the dominant-component mean lies inside the closed population
/// interval. Patients failing this are excluded from personalized analyses.
pub fn perri_setpoint_valid(table: &AnalyteTable, per: &PerRi, analyte: &str, sex: Sex) -> Result<bool, AnalyteError> {
    Ok(table.get(analyte)?.bounds(sex).contains(per.setpoint()))
}
