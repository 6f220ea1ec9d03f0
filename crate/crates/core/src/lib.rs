//! Simultaneous inference for treatment effects across a total population,
//! (possibly overlapping) subgroups and several endpoints.
//!
//! The central idea is to fit one small marginal model per hypothesis, stack
//! the per-subject influence terms of all models, and use their empirical
//! covariance as the joint correlation of the test statistics. Max-type
//! adjusted p-values and simultaneous intervals then come from multivariate
//! normal or t rectangle probabilities.
//!
//! Module map:
//!
//! * [`data`]: subject-level [`Dataset`] and its CSV form.
//! * [`linmodels`]: OLS and binomial-logit marginal models with influence terms.
//! * [`mvdist`]: multivariate normal / t rectangle probabilities and
//!   equicoordinate quantiles (randomized lattice rules).
//! * [`mmm`]: model stacking, adjusted p-values and simultaneous intervals.
//! * [`contrasts`]: the two-way cell-means multiple contrast test.
//! * [`simulator`]: data generation and familywise error / power estimation.
//! * [`casestudy`]: the AVERROES count-table reanalysis.
//! * [`report`]: inference reports (JSON, text table, SVG forest plot).
//! * [`published`]: reference tables shipped with the crate.

pub mod casestudy;
pub mod contrasts;
pub mod data;
mod error;
pub mod linmodels;
pub mod mmm;
pub mod mvdist;
pub mod published;
pub mod report;
pub mod simulator;

pub use data::Dataset;
pub use error::{Error, Result};
pub use linmodels::{Alternative, Family, MarginalModel, ModelSpec};
pub use mmm::{DfMode, MmmFit};
pub use mvdist::{CorrelationMatrix, QuadratureSettings};
pub use report::InferenceReport;
pub use simulator::{Method, Scenario, SimResult};
