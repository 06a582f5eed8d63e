//! Value estimation for fitted rules and population-level metrics on
//! simulated draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    simulate_population, ExperimentalSample, LinearRule, Matrix, PopulationDraw, SamplingAlpha,
    Setting, SimulationConfig, TransferWeights,
};
use crate::error::{Error, Result};
use crate::nuisance::NuisanceFit;
use crate::pipeline::{fit_rule, PipelineOptions};
use crate::weights::{effective_sample_size, fit_weights_tuned};

/// Sign of the outcome-regression term in the value estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Augmentation {
    /// `... + Q(X, d)`, the usual augmented estimator.
    #[default]
    Plus,
    /// `... - Q(X, d)`.
    Verbatim,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    /// Kish effective sample size of the weights behind the estimate.
    pub ess: f64,
}

/// `sum_i w_i ( [A d / pi + (1 - A)(1 - d)/(1 - pi)] (Y - Q(X, d)) + Q(X, d) )`.
pub fn value_aipw_weighted(
    rule: &LinearRule,
    exp: &ExperimentalSample,
    w: &TransferWeights,
    fit: &NuisanceFit,
    augmentation: Augmentation,
) -> Result<ValueEstimate> {
    w.check_len(exp.n())?;
    if !w.is_sum_to_one() {
        return Err(Error::InvalidConfig(
            "value estimation needs sum-to-one weights".into(),
        ));
    }
    if rule.p() != exp.p() {
        return Err(Error::DimensionMismatch {
            expected: exp.p(),
            got: rule.p(),
        });
    }
    fit.check(exp.p())?;
    let sign = match augmentation {
        Augmentation::Plus => 1.0,
        Augmentation::Verbatim => -1.0,
    };
    let value = (0..exp.n())
        .map(|i| {
            let x = exp.x(i);
            let (a, y) = (exp.a(i), exp.outcome()[i]);
            let d = f64::from(rule.decide(x));
            let pi = fit.propensity_at(x);
            let q = fit.q(x, d);
            let ipw = a * d / pi + (1.0 - a) * (1.0 - d) / (1.0 - pi);
            w.as_slice()[i] * (ipw * (y - q) + sign * q)
        })
        .sum();
    Ok(ValueEstimate {
        value,
        ess: effective_sample_size(w),
    })
}

/// The equally weighted form of [`value_aipw_weighted`].
pub fn value_aipw_unweighted(
    rule: &LinearRule,
    exp: &ExperimentalSample,
    fit: &NuisanceFit,
    augmentation: Augmentation,
) -> Result<ValueEstimate> {
    value_aipw_weighted(
        rule,
        exp,
        &TransferWeights::uniform(exp.n()),
        fit,
        augmentation,
    )
}

/// `N^-1 sum (Y*(d(X)) - Y*(1{tau(X) > 0}))^2` over the whole population.
pub fn value_mse(rule: &LinearRule, draw: &PopulationDraw) -> Result<f64> {
    if rule.p() != draw.covariates.ncols() {
        return Err(Error::DimensionMismatch {
            expected: draw.covariates.ncols(),
            got: rule.p(),
        });
    }
    let total: f64 = draw
        .covariates
        .rows()
        .zip(&draw.potential_outcomes)
        .zip(&draw.contrast)
        .map(|((x, y), t)| {
            let d = rule.decide(x) as usize;
            let best = usize::from(*t > 0.0);
            (y[d] - y[best]).powi(2)
        })
        .sum();
    Ok(total / draw.population_size() as f64)
}

/// One record of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub setting: String,
    pub replicate: usize,
    pub value: f64,
    pub value_mse: f64,
    pub ess: f64,
}

impl MetricRecord {
    pub const CSV_HEADER: [&'static str; 6] = [
        "method",
        "setting",
        "replicate",
        "value",
        "value_mse",
        "ess",
    ];

    pub fn csv_fields(&self) -> [String; 6] {
        [
            self.method.clone(),
            self.setting.clone(),
            self.replicate.to_string(),
            crate::fmt_num(self.value),
            crate::fmt_num(self.value_mse),
            crate::fmt_num(self.ess),
        ]
    }
}

/// Covariates from the simulation law together with their true contrast.
#[derive(Debug, Clone)]
pub struct RiskPopulation {
    pub covariates: Matrix,
    pub contrast: Vec<f64>,
}

impl RiskPopulation {
    pub fn simulate(setting: Setting, size: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(2 * size);
        let mut contrast = Vec::with_capacity(size);
        for _ in 0..size {
            let x1: f64 = 1.0 + rng.sample::<f64, _>(StandardNormal);
            let x2: f64 = 1.0 + rng.sample::<f64, _>(StandardNormal);
            contrast.push(setting.contrast(&[x1, x2]));
            data.extend_from_slice(&[x1, x2]);
        }
        Ok(Self {
            covariates: Matrix::new(size, 2, data)?,
            contrast,
        })
    }

    /// `mean |tau(X)| 1{d(X) != 1(tau(X) > 0)}`.
    pub fn risk(&self, rule: &LinearRule) -> f64 {
        let total: f64 = self
            .covariates
            .rows()
            .zip(&self.contrast)
            .filter(|(x, t)| rule.decide(x) != u8::from(**t > 0.0))
            .map(|(_, t)| t.abs())
            .sum();
        total / self.contrast.len().max(1) as f64
    }

    /// Smallest risk over rules whose coefficients lie on a regular grid in
    /// `[-1, 1]^(p+1)` with `resolution` points per axis.
    pub fn grid_minimum(&self, resolution: usize) -> (LinearRule, f64) {
        let k = self.covariates.ncols() + 1;
        let r = resolution.max(2);
        let total = r.pow(k as u32);
        let axis = |i: usize| -1.0 + 2.0 * i as f64 / (r - 1) as f64;
        (0..total)
            .into_par_iter()
            .filter_map(|mut code| {
                let mut eta = Vec::with_capacity(k);
                for _ in 0..k {
                    eta.push(axis(code % r));
                    code /= r;
                }
                if eta.iter().all(|v| *v == 0.0) {
                    return None;
                }
                let rule = LinearRule::new(eta).ok()?;
                let risk = self.risk(&rule);
                Some((rule, risk))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("grid has a nonzero point")
    }
}

/// The default sampling design is milder than the simulation default: at
/// `N = 1e3` the latter selects one or two rows and nothing can be fitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOptions {
    pub replicates: usize,
    /// RWD size as a fraction of `N`.
    pub rwd_fraction: f64,
    pub sampling_alpha: SamplingAlpha,
    /// Size of the fixed covariate sample the risks are computed on.
    pub eval_size: usize,
    pub grid_resolution: usize,
    pub pipeline: PipelineOptions,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            replicates: 20,
            rwd_fraction: 0.1,
            sampling_alpha: SamplingAlpha {
                intercept: -3.0,
                slopes: vec![0.5, -1.0],
            },
            eval_size: 20_000,
            grid_resolution: 41,
            pipeline: PipelineOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub setting: String,
    pub population_size: usize,
    pub replicates: usize,
    pub failures: usize,
    pub oracle_risk: f64,
    pub mean_risk: f64,
    pub mean_gap: f64,
    pub gap_se: f64,
}

/// For each setting and population size, learn rules with tuned
/// nonparametric weights on independent draws and report the gap between
/// their population risk and the grid minimum.
pub fn risk_consistency_probe(
    settings: &[Setting],
    sizes: &[usize],
    seed: u64,
    opts: &ProbeOptions,
) -> Result<Vec<ProbeRow>> {
    let mut rows = Vec::new();
    for &setting in settings {
        let eval = RiskPopulation::simulate(setting, opts.eval_size, seed ^ 0x9e37_79b9_7f4a_7c15)?;
        let (_, oracle) = eval.grid_minimum(opts.grid_resolution);
        for (k, &size) in sizes.iter().enumerate() {
            let risks: Vec<Option<f64>> = (0..opts.replicates)
                .into_par_iter()
                .map(|r| {
                    let rep_seed = derive_seed(seed, &[setting.index(), k as u64, r as u64]);
                    let mut config = SimulationConfig::new(
                        setting,
                        size,
                        ((size as f64 * opts.rwd_fraction).round() as usize).max(2),
                        rep_seed,
                    );
                    config.sampling_alpha = opts.sampling_alpha.clone();
                    let fitted = (|| {
                        let draw = simulate_population(&config)?;
                        let exp = draw.experimental_sample()?;
                        let rwd = draw.target_sample()?;
                        let w = fit_weights_tuned(&exp, &rwd)?.fit.weights;
                        let mut pipe = opts.pipeline;
                        pipe.learn.seed = rep_seed;
                        fit_rule(&exp, &w, &pipe)
                    })();
                    match fitted {
                        Ok(f) => Some(eval.risk(&f.report.eta)),
                        Err(e) => {
                            log::warn!("probe replicate {r} at N={size} failed: {e}");
                            None
                        }
                    }
                })
                .collect();
            let ok: Vec<f64> = risks.iter().flatten().copied().collect();
            let failures = risks.len() - ok.len();
            let (mean, se) = mean_se(&ok);
            rows.push(ProbeRow {
                setting: setting.as_str().to_string(),
                population_size: size,
                replicates: opts.replicates,
                failures,
                oracle_risk: oracle,
                mean_risk: mean,
                mean_gap: mean - oracle,
                gap_se: se,
            });
        }
    }
    Ok(rows)
}

/// Sample mean and its standard error; NaN for an empty slice.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mix a base seed with a path of indices (SplitMix64 finalizer per step).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut z = base;
    for &p in path {
        z = z
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::WeightMethod;
    use crate::nuisance::Propensity;

    fn zero_fit(p: usize, pi: f64) -> NuisanceFit {
        NuisanceFit {
            beta: vec![0.0; 2 * (p + 1)],
            propensity: Propensity::Constant(pi),
            weights: WeightMethod::Uniform,
            clipped: 0,
        }
    }

    fn two_rows() -> ExperimentalSample {
        ExperimentalSample::new(
            Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            vec![1, 0],
            vec![4.0, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn hand_two_row_value() {
        let exp = two_rows();
        let rule = LinearRule::new(vec![1.0, 0.0]).unwrap();
        let fit = zero_fit(1, 0.5);
        let v = value_aipw_unweighted(&rule, &exp, &fit, Augmentation::Plus).unwrap();
        assert!((v.value - 4.0).abs() < 1e-14);
        assert!((v.ess - 2.0).abs() < 1e-14);
        let vw = value_aipw_weighted(
            &rule,
            &exp,
            &TransferWeights::uniform(2),
            &fit,
            Augmentation::Plus,
        )
        .unwrap();
        assert_eq!(v, vw);
    }

    #[test]
    fn residual_free_value_is_weighted_q() {
        let exp = ExperimentalSample::new(
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap(),
            vec![1, 0, 1],
            vec![0.0; 3],
        )
        .unwrap();
        // Q(x, a) = 1 + x + a(2 - x)
        let mut fit = zero_fit(1, 0.3);
        fit.beta = vec![1.0, 1.0, 2.0, -1.0];
        let y: Vec<f64> = (0..3).map(|i| fit.q(exp.x(i), exp.a(i))).collect();
        let exp =
            ExperimentalSample::new(exp.covariates().clone(), exp.treatment().to_vec(), y).unwrap();
        let w = TransferWeights::normalized(&[0.5, 0.2, 0.3], WeightMethod::Nonparametric).unwrap();
        let rule = LinearRule::new(vec![1.5, -1.0]).unwrap();
        let expected: f64 = (0..3)
            .map(|i| w.as_slice()[i] * fit.q(exp.x(i), f64::from(rule.decide(exp.x(i)))))
            .sum();
        let v = value_aipw_weighted(&rule, &exp, &w, &fit, Augmentation::Plus).unwrap();
        assert!((v.value - expected).abs() < 1e-14);
        let neg = value_aipw_weighted(&rule, &exp, &w, &fit, Augmentation::Verbatim).unwrap();
        assert!((neg.value + expected).abs() < 1e-14);
    }

    #[test]
    fn inverse_score_weights_rejected() {
        let exp = two_rows();
        let w = TransferWeights::new(
            vec![3.0, 1.0],
            crate::data::WeightNormalization::InverseScore,
            WeightMethod::Mle,
        )
        .unwrap();
        let r = value_aipw_weighted(
            &LinearRule::zeros(1),
            &exp,
            &w,
            &zero_fit(1, 0.5),
            Augmentation::Plus,
        );
        assert!(r.is_err());
    }

    fn toy_draw() -> PopulationDraw {
        // tau = (1, -2, 0.5, -0.1); shared noise so Y*(1) - Y*(0) = tau
        let x = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let base = [0.3, -0.7, 1.1, 0.0];
        let tau = [1.0, -2.0, 0.5, -0.1];
        PopulationDraw {
            config: SimulationConfig::new(Setting::III, 4, 2, 0),
            covariates: x,
            potential_outcomes: base.iter().zip(&tau).map(|(b, t)| [*b, b + t]).collect(),
            contrast: tau.to_vec(),
            selection: vec![true; 4],
            experimental_rows: vec![0, 1, 2, 3],
            treatment: vec![0, 1, 0, 1],
            target_rows: vec![0, 1],
        }
    }

    #[test]
    fn value_mse_enumeration() {
        let draw = toy_draw();
        // treat everyone: wrong on rows 1 and 3
        let all = LinearRule::new(vec![1.0, 0.0, 0.0]).unwrap();
        let expected = (4.0 + 0.01) / 4.0;
        assert!((value_mse(&all, &draw).unwrap() - expected).abs() < 1e-15);
        // oracle: treat iff x1 = 0
        let oracle = LinearRule::new(vec![0.5, -1.0, 0.0]).unwrap();
        assert_eq!(value_mse(&oracle, &draw).unwrap(), 0.0);
    }

    #[test]
    fn true_boundary_has_zero_mse() {
        let draw = simulate_population(&SimulationConfig::new(Setting::III, 2000, 50, 3))
            .unwrap_or_else(|_| {
                let mut c = SimulationConfig::new(Setting::III, 2000, 50, 3);
                c.sampling_alpha.intercept = 0.0;
                simulate_population(&c).unwrap()
            });
        let rule = LinearRule::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(value_mse(&rule, &draw).unwrap(), 0.0);
    }

    #[test]
    fn oracle_rule_has_zero_population_risk() {
        let pop = RiskPopulation::simulate(Setting::III, 500, 1).unwrap();
        let rule = LinearRule::new(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(pop.risk(&rule), 0.0);
        let (_, best) = pop.grid_minimum(9);
        assert!(best >= 0.0);
        // (1/3, 2/3, 1) lies on the 7-point grid
        let (_, exact) = pop.grid_minimum(7);
        assert_eq!(exact, 0.0);
    }

    #[test]
    fn seeds_differ_by_path() {
        assert_ne!(derive_seed(7, &[0, 1]), derive_seed(7, &[1, 0]));
        assert_eq!(derive_seed(7, &[2, 3]), derive_seed(7, &[2, 3]));
    }

    #[test]
    fn mean_se_small() {
        let (m, s) = mean_se(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
