//! Calibration assessment for multistate risk-prediction models.
//!
//! The library estimates how well predicted transition probabilities out of
//! the initial state of a progressive multistate model agree with observed
//! outcomes, in the presence of right censoring. Four methods are provided:
//!
//! * grouped Aalen-Johansen contrasts ([`aalen_johansen`]),
//! * jackknife pseudo-values regressed with a loess smoother,
//! * binary logistic recalibration with inverse-probability-of-censoring
//!   weights (BLR-IPCW),
//! * multinomial logistic recalibration on log-ratio scores (MLR-IPCW),
//!
//! all in [`calibration`]. The [`dgm`] module simulates cohorts from
//! competing exponential hazards with controlled informative censoring,
//! [`truth`] computes the exact transition probabilities of such a process by
//! recursive adaptive quadrature, and [`experiment`] orchestrates the
//! large-sample and repeated small-sample bias studies.

pub mod aalen_johansen;
pub mod calibration;
pub mod data;
pub mod dgm;
pub mod experiment;
pub mod ipcw;
mod linalg;
pub mod smoothers;
pub mod truth;

pub use aalen_johansen::{aalen_johansen, OccupationEstimate, RiskGrouping};
pub use calibration::{CalibrationResult, Method, PseudoValueMatrix};
pub use data::{
    Cohort, DataError, HorizonState, PredictionMatrix, SubjectHistory, TransitionStructure,
};
pub use dgm::{DgmConfig, Scenario};
pub use ipcw::{CoxModel, WeightVector};
pub use truth::{Estimand, TrueProbs};
