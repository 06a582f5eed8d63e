//! Choosing a learning method by repeated half-splits: train every candidate
//! on one half, score every trained rule by weighted value on the other half,
//! average over splits and refit the winner on all data.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ExperimentalSample, LinearRule, TargetSample, TransferWeights};
use crate::error::{Error, Result};
use crate::evaluation::{derive_seed, value_aipw_weighted, Augmentation};
use crate::nuisance::{fit_nuisance, PropensityMode};
use crate::pipeline::{fit_rule, PipelineOptions};
use crate::weights::{
    fit_sampling_ee, fit_sampling_mle, fit_weights_tuned, weights_from_score, ScoreFeatures,
};

/// Shuffle `0..size` and cut it in two; the first part gets the extra row
/// when `size` is odd. Both parts are returned sorted.
pub fn split_halves(size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if size < 2 {
        return Err(Error::InvalidSample(format!(
            "cannot split {size} rows into two halves"
        )));
    }
    let mut idx: Vec<usize> = (0..size).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test = idx.split_off(size.div_ceil(2));
    idx.sort_unstable();
    test.sort_unstable();
    Ok((idx, test))
}

/// A way of turning an experimental sample and RWD into a rule.
pub trait CandidateMethod: Send + Sync {
    fn name(&self) -> &str;

    /// Whether training uses the target population size.
    fn needs_population_size(&self) -> bool {
        false
    }

    fn train(
        &self,
        exp: &ExperimentalSample,
        rwd: &TargetSample,
        population_size: Option<f64>,
        seed: u64,
    ) -> Result<LinearRule>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    Nonparametric,
    Mle(ScoreFeatures),
    Ee(ScoreFeatures),
    Unweighted,
}

/// Weights of the given kind; parametric kinds need the population size.
pub fn compute_weights(
    kind: WeightKind,
    exp: &ExperimentalSample,
    rwd: &TargetSample,
    population_size: Option<f64>,
) -> Result<TransferWeights> {
    let need_n = || {
        population_size.ok_or_else(|| {
            Error::InvalidConfig("parametric weights need the target population size".into())
        })
    };
    Ok(match kind {
        WeightKind::Nonparametric => fit_weights_tuned(exp, rwd)?.fit.weights,
        WeightKind::Mle(f) => {
            let model = fit_sampling_mle(exp, rwd, need_n()?, f)?;
            weights_from_score(&model, exp)?.weights
        }
        WeightKind::Ee(f) => {
            let model = fit_sampling_ee(exp, rwd, need_n()?, f)?;
            weights_from_score(&model, exp)?.weights
        }
        WeightKind::Unweighted => TransferWeights::uniform(exp.n()),
    })
}

/// Weight the sample, then run the shared nuisance/contrast/rule pipeline.
#[derive(Debug, Clone)]
pub struct WeightedRuleMethod {
    pub name: String,
    pub kind: WeightKind,
    pub pipeline: PipelineOptions,
}

impl WeightedRuleMethod {
    pub fn new(kind: WeightKind, pipeline: PipelineOptions) -> Self {
        let name = match kind {
            WeightKind::Nonparametric => "np",
            WeightKind::Mle(_) => "mle",
            WeightKind::Ee(_) => "ee",
            WeightKind::Unweighted => "unweighted",
        };
        Self {
            name: name.to_string(),
            kind,
            pipeline,
        }
    }
}

impl CandidateMethod for WeightedRuleMethod {
    fn name(&self) -> &str {
        &self.name
    }

    fn needs_population_size(&self) -> bool {
        matches!(self.kind, WeightKind::Mle(_) | WeightKind::Ee(_))
    }

    fn train(
        &self,
        exp: &ExperimentalSample,
        rwd: &TargetSample,
        population_size: Option<f64>,
        seed: u64,
    ) -> Result<LinearRule> {
        let w = compute_weights(self.kind, exp, rwd, population_size)?;
        let mut opts = self.pipeline;
        opts.learn.seed = seed;
        Ok(fit_rule(exp, &w, &opts)?.report.eta)
    }
}

/// Ordered candidate list.
pub struct MethodCatalog {
    methods: Vec<Box<dyn CandidateMethod>>,
    population_size: Option<f64>,
}

impl MethodCatalog {
    pub fn new(
        methods: Vec<Box<dyn CandidateMethod>>,
        population_size: Option<f64>,
    ) -> Result<Self> {
        if methods.is_empty() {
            return Err(Error::InvalidConfig("method catalog is empty".into()));
        }
        if population_size.is_none() {
            if let Some(m) = methods.iter().find(|m| m.needs_population_size()) {
                return Err(Error::InvalidConfig(format!(
                    "method `{}` needs the target population size",
                    m.name()
                )));
            }
        }
        if let Some(n) = population_size {
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::InvalidConfig(
                    "population size must be positive".into(),
                ));
            }
        }
        Ok(Self {
            methods,
            population_size,
        })
    }

    /// Nonparametric, then MLE and EE when `N` is known, then unweighted.
    pub fn standard(
        population_size: Option<f64>,
        features: ScoreFeatures,
        pipeline: PipelineOptions,
    ) -> Self {
        let mut kinds = vec![WeightKind::Nonparametric];
        if population_size.is_some() {
            kinds.push(WeightKind::Mle(features));
            kinds.push(WeightKind::Ee(features));
        }
        kinds.push(WeightKind::Unweighted);
        let methods = kinds
            .into_iter()
            .map(|k| Box::new(WeightedRuleMethod::new(k, pipeline)) as Box<dyn CandidateMethod>)
            .collect();
        Self::new(methods, population_size).expect("standard catalog is valid")
    }

    pub fn len(&self) -> usize {
        self.methods.len()
    }

    pub fn is_empty(&self) -> bool {
        self.methods.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.methods.iter().map(|m| m.name().to_string()).collect()
    }

    pub fn population_size(&self) -> Option<f64> {
        self.population_size
    }
}

/// Scores trained rules on a held-out half.
pub trait SplitEvaluator: Sync {
    /// One entry per rule; `None` rules (failed training) stay `None`.
    fn evaluate(
        &self,
        split: usize,
        exp: &ExperimentalSample,
        rwd: &TargetSample,
        rules: &[Option<LinearRule>],
    ) -> Result<Vec<Option<f64>>>;
}

/// Tuned nonparametric weights and nuisances refitted on the held-out half,
/// then the weighted augmented value of each rule.
#[derive(Debug, Clone, Copy, Default)]
pub struct WeightedValueEvaluator {
    pub propensity: PropensityMode,
    pub augmentation: Augmentation,
}

impl SplitEvaluator for WeightedValueEvaluator {
    fn evaluate(
        &self,
        _split: usize,
        exp: &ExperimentalSample,
        rwd: &TargetSample,
        rules: &[Option<LinearRule>],
    ) -> Result<Vec<Option<f64>>> {
        let w = fit_weights_tuned(exp, rwd)?.fit.weights;
        let fit = fit_nuisance(exp, &w, self.propensity)?;
        rules
            .iter()
            .map(|r| match r {
                Some(rule) => Ok(Some(
                    value_aipw_weighted(rule, exp, &w, &fit, self.augmentation)?.value,
                )),
                None => Ok(None),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub methods: Vec<String>,
    pub winner: String,
    pub winner_index: usize,
    /// Mean over the splits where the method produced a value.
    pub mean_values: Vec<Option<f64>>,
    /// `values[b][g]`: split `b`, method `g`.
    pub values: Vec<Vec<Option<f64>>>,
    pub disqualified: Vec<String>,
    pub seed: u64,
    pub split_seeds: Vec<u64>,
    pub rule: LinearRule,
}

impl SelectionReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Value matrix with one row per split; missing entries are `NA`.
    pub fn matrix_csv(&self) -> String {
        let mut s = String::from("split");
        for m in &self.methods {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for (b, row) in self.values.iter().enumerate() {
            let _ = write!(s, "{}", b + 1);
            for v in row {
                s.push(',');
                match v {
                    Some(v) => s.push_str(&crate::fmt_num(*v)),
                    None => s.push_str("NA"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("selection.json");
        std::fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("selection_values.csv");
        std::fs::write(&path, self.matrix_csv()).map_err(|e| Error::io(&path, e))
    }
}

/// Multi-split cross-validation over `catalog`.
pub fn cross_validate(
    exp: &ExperimentalSample,
    rwd: &TargetSample,
    catalog: &MethodCatalog,
    splits: usize,
    seed: u64,
    evaluator: &dyn SplitEvaluator,
) -> Result<SelectionReport> {
    if splits == 0 {
        return Err(Error::InvalidConfig("need at least one split".into()));
    }
    if exp.n() < 4 || rwd.m() < 4 {
        return Err(Error::InvalidSample(
            "cross-validation needs at least 4 experimental and 4 RWD rows".into(),
        ));
    }
    rwd.check_paired(exp)?;
    let half_n = catalog.population_size.map(|n| n / 2.0);
    let split_seeds: Vec<u64> = (0..splits)
        .map(|b| derive_seed(seed, &[b as u64]))
        .collect();

    let values: Vec<Vec<Option<f64>>> = split_seeds
        .par_iter()
        .enumerate()
        .map(|(b, &s)| -> Vec<Option<f64>> {
            let missing = vec![None; catalog.len()];
            let halves = (|| {
                let (exp_train, exp_test) = split_halves(exp.n(), derive_seed(s, &[0]))?;
                let (rwd_train, rwd_test) = split_halves(rwd.m(), derive_seed(s, &[1]))?;
                Ok::<_, Error>((
                    exp.subset(&exp_train)?,
                    exp.subset(&exp_test)?,
                    rwd.subset(&rwd_train)?,
                    rwd.subset(&rwd_test)?,
                ))
            })();
            let (exp_tr, exp_te, rwd_tr, rwd_te) = match halves {
                Ok(h) => h,
                Err(e) => {
                    log::warn!("split {}: {e}", b + 1);
                    return missing;
                }
            };
            let rules: Vec<Option<LinearRule>> = catalog
                .methods
                .iter()
                .enumerate()
                .map(|(g, m)| {
                    match m.train(&exp_tr, &rwd_tr, half_n, derive_seed(s, &[2, g as u64])) {
                        Ok(r) => Some(r),
                        Err(e) => {
                            log::warn!("split {}: method `{}` failed: {e}", b + 1, m.name());
                            None
                        }
                    }
                })
                .collect();
            match evaluator.evaluate(b, &exp_te, &rwd_te, &rules) {
                Ok(v) if v.len() == rules.len() => v,
                Ok(_) => {
                    log::warn!(
                        "split {}: evaluator returned the wrong number of values",
                        b + 1
                    );
                    missing
                }
                Err(e) => {
                    log::warn!("split {}: evaluation failed: {e}", b + 1);
                    missing
                }
            }
        })
        .collect();

    let names = catalog.names();
    let mut mean_values = Vec::with_capacity(catalog.len());
    let mut disqualified = Vec::new();
    for (g, name) in names.iter().enumerate() {
        let got: Vec<f64> = values.iter().filter_map(|row| row[g]).collect();
        let missing = splits - got.len();
        if 2 * missing > splits || got.is_empty() {
            log::warn!("method `{name}` disqualified: missing on {missing} of {splits} splits");
            disqualified.push(name.clone());
            mean_values.push(None);
        } else {
            mean_values.push(Some(got.iter().sum::<f64>() / got.len() as f64));
        }
    }
    let mut winner: Option<(usize, f64)> = None;
    for (g, v) in mean_values.iter().enumerate() {
        if let Some(v) = *v {
            if winner.is_none_or(|(_, best)| v > best) {
                winner = Some((g, v));
            }
        }
    }
    let (winner_index, _) =
        winner.ok_or_else(|| Error::Selection("every candidate method was disqualified".into()))?;
    let rule = catalog.methods[winner_index].train(
        exp,
        rwd,
        catalog.population_size,
        derive_seed(seed, &[u64::MAX]),
    )?;
    Ok(SelectionReport {
        winner: names[winner_index].clone(),
        methods: names,
        winner_index,
        mean_values,
        values,
        disqualified,
        seed,
        split_seeds,
        rule,
    })
}
