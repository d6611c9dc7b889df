//! Application pipelines: the adaptive MMD test, JIVE2 and the series
//! estimator with their decompositions, and the separately exchangeable
//! array with the gluing check.

mod estimators;
mod mmd;
mod sep;

pub use estimators::{
    iv_blocks, jive2, plm, plm_blocks, regime_tag, Components, EstimatorResult, IvBlock, IvTruth, PlmBlock, PlmTruth,
    CASE_III_RATIO, CASE_I_RATIO,
};
pub use mmd::{mmd_adaptive_test, Decision, MmdTestResult};
pub use sep::{sep_exchangeable_pipeline, Averaged, GluingOptions, GluingReport};
