//! Learning interpretable linear treatment rules from a randomized experiment
//! and transporting them to a target population described by real-world
//! covariate data.
//!
//! The pipeline is: estimate transfer weights ([`weights`]), fit weighted
//! nuisance models and per-row contrasts ([`nuisance`]), minimize the weighted
//! smoothed-ramp classification risk by difference-of-convex iterations
//! ([`policy`]), and evaluate or select rules by weighted AIPW value
//! ([`evaluation`], [`selection`]). [`bench`] runs the Monte Carlo study.

pub mod bench;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod nuisance;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod selection;
pub mod weights;

pub use data::{
    ExperimentalSample, LinearRule, Matrix, PopulationDraw, SamplingAlpha, Setting,
    SimulationConfig, TargetSample, TransferWeights, WeightMethod, WeightNormalization,
};
pub use error::{Error, ErrorCategory, Result};

#[inline]
pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
#[inline]
pub(crate) fn log1pexp(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numeric text form used by every file writer: 17 significant digits.
pub fn fmt_num(v: f64) -> String {
    format!("{v:.16e}")
}
