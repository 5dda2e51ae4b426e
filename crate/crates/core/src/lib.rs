//! Reference-interval engine for longitudinal blood-biomarker series.
//!
//! Three interval frameworks are provided:
//!
//! - population intervals from a fixed 30-analyte table ([`analytes`], [`ri::pop`]),
//! - personalized intervals from Gaussian-mixture setpoints ([`ri::gmm`], [`ri::perri`]),
//! - model-based intervals from a conditional decoder transformer ([`model`]),
//!
//! together with the data model and cleaning rules ([`cohort`]), a small
//! reverse-mode autodiff engine ([`tensor`]), training and baselines
//! ([`train`]), the statistical evaluation toolkit ([`eval`]), and a seeded
//! synthetic cohort generator ([`synth`]).

pub mod analytes;
pub mod cohort;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod ri;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod train;

pub use analytes::{AnalyteSpec, AnalyteTable, Bounds, Sex};
pub use cohort::{LabSeries, Measurement, Patient};
pub use ri::{Framework, LabState, ReferenceInterval};
