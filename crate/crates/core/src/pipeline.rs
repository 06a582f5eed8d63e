//! Nuisances, contrast and rule learning chained together for one weighting.

use serde::{Deserialize, Serialize};

use crate::data::{ExperimentalSample, TransferWeights};
use crate::error::Result;
use crate::nuisance::{
    contrast, fit_nuisance, ContrastEstimates, ContrastEstimator, NuisanceFit, PropensityMode,
};
use crate::policy::{learn_rule, DcFitReport, LearnOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineOptions {
    pub propensity: PropensityMode,
    pub estimator: ContrastEstimator,
    pub learn: LearnOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            propensity: PropensityMode::Constant,
            estimator: ContrastEstimator::Aipw,
            learn: LearnOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedRule {
    pub report: DcFitReport,
    pub nuisance: NuisanceFit,
    pub contrast: ContrastEstimates,
}

/// Fit nuisances with `w`, estimate the per-row contrast and learn the rule.
pub fn fit_rule(
    exp: &ExperimentalSample,
    w: &TransferWeights,
    opts: &PipelineOptions,
) -> Result<FittedRule> {
    let nuisance = fit_nuisance(exp, w, opts.propensity)?;
    let tau = contrast(exp, &nuisance, opts.estimator)?;
    let report = learn_rule(exp, w, &tau, &opts.learn)?;
    Ok(FittedRule {
        report,
        nuisance,
        contrast: tau,
    })
}
