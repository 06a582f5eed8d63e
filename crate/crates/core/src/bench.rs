//! Monte Carlo comparison of weighting methods on the simulated settings.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    simulate_population, true_inverse_score_weights, ExperimentalSample, LinearRule,
    PopulationDraw, SamplingAlpha, Setting, SimulationConfig, TargetSample, TransferWeights,
};
use crate::error::{Error, Result};
use crate::evaluation::{derive_seed, mean_se, value_mse};
use crate::nuisance::{ContrastEstimates, ContrastEstimator};
use crate::pipeline::{fit_rule, PipelineOptions};
use crate::policy::learn_rule;
use crate::selection::{
    compute_weights, cross_validate, MethodCatalog, WeightKind, WeightedValueEvaluator,
};
use crate::weights::{effective_sample_size, ScoreFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMethod {
    /// Modified-likelihood sampling score.
    W1,
    /// Estimating-equation sampling score.
    W2,
    /// Cross-validated choice among the weighted and unweighted learners.
    Cv,
    /// Tuned minimum-entropy balancing weights.
    Np,
    Unweight,
    /// True inverse sampling scores and the realized contrast `Y*(1) - Y*(0)`.
    Bm,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 6] = [
        BenchMethod::W1,
        BenchMethod::W2,
        BenchMethod::Cv,
        BenchMethod::Np,
        BenchMethod::Unweight,
        BenchMethod::Bm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMethod::W1 => "w1",
            BenchMethod::W2 => "w2",
            BenchMethod::Cv => "cv",
            BenchMethod::Np => "np",
            BenchMethod::Unweight => "unweight",
            BenchMethod::Bm => "bm",
        }
    }

    /// Whether the result changes with the sampling-model specification.
    fn uses_spec(self) -> bool {
        matches!(self, BenchMethod::W1 | BenchMethod::W2 | BenchMethod::Cv)
    }
}

impl fmt::Display for BenchMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown benchmark method `{s}`")))
    }
}

/// Whether the parametric sampling model matches the generating one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingSpec {
    Correct,
    /// Logistic model on squared covariates.
    Misspecified,
}

impl SamplingSpec {
    pub const ALL: [SamplingSpec; 2] = [SamplingSpec::Correct, SamplingSpec::Misspecified];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplingSpec::Correct => "correct",
            SamplingSpec::Misspecified => "misspecified",
        }
    }

    pub fn features(self) -> ScoreFeatures {
        match self {
            SamplingSpec::Correct => ScoreFeatures::Linear,
            SamplingSpec::Misspecified => ScoreFeatures::Squared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// `N = 1e5`, `m = 1000`, 50 replicates.
    Desk,
    /// `N = 1e6`, `m = 5000`, 200 replicates.
    Full,
}

impl Scale {
    /// `(N, m, replicates)`.
    pub fn sizes(self) -> (usize, usize, usize) {
        match self {
            Scale::Desk => (100_000, 1000, 50),
            Scale::Full => (1_000_000, 5000, 200),
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Scale::Desk),
            "full" => Ok(Scale::Full),
            _ => Err(Error::InvalidConfig(format!("unknown scale `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub settings: Vec<Setting>,
    pub methods: Vec<BenchMethod>,
    pub specs: Vec<SamplingSpec>,
    pub replicates: usize,
    pub population_size: usize,
    pub rwd_size: usize,
    pub sampling_alpha: SamplingAlpha,
    pub noise_sd: f64,
    pub cv_splits: usize,
    pub seed: u64,
    /// Largest tolerated share of failed replicates in any cell.
    pub max_failure_rate: f64,
}

impl BenchConfig {
    pub fn new(scale: Scale, settings: Vec<Setting>, methods: Vec<BenchMethod>, seed: u64) -> Self {
        let (population_size, rwd_size, replicates) = scale.sizes();
        Self {
            settings,
            methods,
            specs: SamplingSpec::ALL.to_vec(),
            replicates,
            population_size,
            rwd_size,
            sampling_alpha: SamplingAlpha::default(),
            noise_sd: 0.5,
            cv_splits: 10,
            seed,
            max_failure_rate: 0.2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig(
                "benchmark method list is empty".into(),
            ));
        }
        if self.settings.is_empty() || self.specs.is_empty() {
            return Err(Error::InvalidConfig(
                "benchmark needs at least one setting and one sampling specification".into(),
            ));
        }
        if self.replicates == 0 {
            return Err(Error::InvalidConfig(
                "benchmark needs at least one replicate".into(),
            ));
        }
        if self.cv_splits == 0 {
            return Err(Error::InvalidConfig(
                "cross-validation needs at least one split".into(),
            ));
        }
        self.simulation(Setting::I, 0).validate()
    }

    fn simulation(&self, setting: Setting, seed: u64) -> SimulationConfig {
        let mut c = SimulationConfig::new(setting, self.population_size, self.rwd_size, seed);
        c.sampling_alpha = self.sampling_alpha.clone();
        c.noise_sd = self.noise_sd;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub setting: Setting,
    pub spec: SamplingSpec,
    pub method: BenchMethod,
    pub replicate: usize,
    pub seed: u64,
    /// Population mean of `Y*(d(X))`.
    pub value: Option<f64>,
    pub value_mse: Option<f64>,
    pub ess: Option<f64>,
    pub experimental_size: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub setting: Setting,
    pub spec: SamplingSpec,
    pub method: BenchMethod,
    pub replicates: usize,
    pub failures: usize,
    pub mean_value_mse: f64,
    pub se_value_mse: f64,
    /// 10, 25, 50, 75 and 90 percent quantiles of the value MSE.
    pub quantiles: [f64; 5],
    pub mean_value: f64,
    pub mean_ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResults {
    pub config: BenchConfig,
    pub records: Vec<BenchRecord>,
    pub cells: Vec<CellSummary>,
}

impl BenchResults {
    pub fn cell(
        &self,
        setting: Setting,
        spec: SamplingSpec,
        method: BenchMethod,
    ) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.setting == setting && c.spec == spec && c.method == method)
    }

    /// Value MSE per replicate for one cell, `None` where the replicate failed.
    pub fn series(
        &self,
        setting: Setting,
        spec: SamplingSpec,
        method: BenchMethod,
    ) -> Vec<Option<f64>> {
        self.records
            .iter()
            .filter(|r| r.setting == setting && r.spec == spec && r.method == method)
            .map(|r| r.value_mse)
            .collect()
    }

    /// Cells whose failure share exceeds the configured limit.
    pub fn failed_cells(&self) -> Vec<&CellSummary> {
        self.cells
            .iter()
            .filter(|c| c.failures as f64 > self.config.max_failure_rate * c.replicates as f64)
            .collect()
    }

    pub fn check_failures(&self) -> Result<()> {
        let bad = self.failed_cells();
        if bad.is_empty() {
            return Ok(());
        }
        let list: Vec<String> = bad
            .iter()
            .map(|c| {
                format!(
                    "{}/{}/{} ({} of {})",
                    c.setting.as_str(),
                    c.spec.as_str(),
                    c.method,
                    c.failures,
                    c.replicates
                )
            })
            .collect();
        Err(Error::Selection(format!(
            "too many failed replicates in: {}",
            list.join(", ")
        )))
    }
}

struct Outcome {
    rule: LinearRule,
    ess: f64,
}

fn weighted_outcome(
    kind: WeightKind,
    exp: &ExperimentalSample,
    rwd: &TargetSample,
    population_size: f64,
    seed: u64,
) -> Result<Outcome> {
    let w = compute_weights(kind, exp, rwd, Some(population_size))?;
    let mut opts = PipelineOptions::default();
    opts.learn.seed = seed;
    let fit = fit_rule(exp, &w, &opts)?;
    Ok(Outcome {
        rule: fit.report.eta,
        ess: effective_sample_size(&w),
    })
}

fn benchmark_outcome(
    draw: &PopulationDraw,
    exp: &ExperimentalSample,
    seed: u64,
) -> Result<Outcome> {
    let w: TransferWeights = true_inverse_score_weights(draw)?;
    // Realized Y*(1) - Y*(0), noise included.
    let tau = ContrastEstimates::new(
        draw.experimental_true_contrast(),
        ContrastEstimator::Regression,
        true,
    )?;
    let mut opts = PipelineOptions::default().learn;
    opts.seed = seed;
    let report = learn_rule(exp, &w, &tau, &opts)?;
    Ok(Outcome {
        rule: report.eta,
        ess: effective_sample_size(&w),
    })
}

#[allow(clippy::too_many_arguments)]
fn method_outcome(
    method: BenchMethod,
    spec: SamplingSpec,
    draw: &PopulationDraw,
    exp: &ExperimentalSample,
    rwd: &TargetSample,
    cv_splits: usize,
    seed: u64,
) -> Result<Outcome> {
    let n_pop = draw.population_size() as f64;
    let features = spec.features();
    match method {
        BenchMethod::W1 => weighted_outcome(WeightKind::Mle(features), exp, rwd, n_pop, seed),
        BenchMethod::W2 => weighted_outcome(WeightKind::Ee(features), exp, rwd, n_pop, seed),
        BenchMethod::Np => weighted_outcome(WeightKind::Nonparametric, exp, rwd, n_pop, seed),
        BenchMethod::Unweight => weighted_outcome(WeightKind::Unweighted, exp, rwd, n_pop, seed),
        BenchMethod::Bm => benchmark_outcome(draw, exp, seed),
        BenchMethod::Cv => {
            let catalog =
                MethodCatalog::standard(Some(n_pop), features, PipelineOptions::default());
            let report = cross_validate(
                exp,
                rwd,
                &catalog,
                cv_splits,
                seed,
                &WeightedValueEvaluator::default(),
            )?;
            let kinds = [
                WeightKind::Nonparametric,
                WeightKind::Mle(features),
                WeightKind::Ee(features),
                WeightKind::Unweighted,
            ];
            let w = compute_weights(kinds[report.winner_index], exp, rwd, Some(n_pop))?;
            Ok(Outcome {
                rule: report.rule,
                ess: effective_sample_size(&w),
            })
        }
    }
}

fn run_replicate(config: &BenchConfig, setting: Setting, replicate: usize) -> Vec<BenchRecord> {
    let seed = derive_seed(config.seed, &[setting.index(), replicate as u64]);
    let prepared = (|| {
        let draw = simulate_population(&config.simulation(setting, seed))?;
        let exp = draw.experimental_sample()?;
        let rwd = draw.target_sample()?;
        Ok::<_, Error>((draw, exp, rwd))
    })();

    let mut shared: Vec<Option<std::result::Result<(f64, f64, f64), String>>> =
        vec![None; config.methods.len()];
    let mut out = Vec::with_capacity(config.specs.len() * config.methods.len());
    for (s, &spec) in config.specs.iter().enumerate() {
        for (k, &method) in config.methods.iter().enumerate() {
            let result = match &prepared {
                Err(e) => Err(e.to_string()),
                Ok((draw, exp, rwd)) => {
                    let cached = if method.uses_spec() {
                        None
                    } else {
                        shared[k].clone()
                    };
                    cached.unwrap_or_else(|| {
                        let spec_index = if method.uses_spec() { s as u64 } else { 0 };
                        let r = method_outcome(
                            method,
                            spec,
                            draw,
                            exp,
                            rwd,
                            config.cv_splits,
                            derive_seed(seed, &[k as u64, spec_index]),
                        )
                        .and_then(|o| {
                            Ok((
                                draw.population_value(&o.rule),
                                value_mse(&o.rule, draw)?,
                                o.ess,
                            ))
                        })
                        .map_err(|e| e.to_string());
                        if !method.uses_spec() {
                            shared[k] = Some(r.clone());
                        }
                        r
                    })
                }
            };
            if let Err(e) = &result {
                log::warn!(
                    "setting {} {} {} replicate {replicate}: {e}",
                    setting.as_str(),
                    spec.as_str(),
                    method
                );
            }
            let experimental_size = prepared.as_ref().map(|p| p.1.n()).unwrap_or(0);
            let (value, mse, ess, error) = match result {
                Ok((v, m, e)) => (Some(v), Some(m), Some(e), None),
                Err(e) => (None, None, None, Some(e)),
            };
            out.push(BenchRecord {
                setting,
                spec,
                method,
                replicate,
                seed,
                value,
                value_mse: mse,
                ess,
                experimental_size,
                error,
            });
        }
    }
    out
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(config: &BenchConfig, records: &[BenchRecord]) -> Vec<CellSummary> {
    let mut cells = Vec::new();
    for &setting in &config.settings {
        for &spec in &config.specs {
            for &method in &config.methods {
                let rows: Vec<&BenchRecord> = records
                    .iter()
                    .filter(|r| r.setting == setting && r.spec == spec && r.method == method)
                    .collect();
                let mut mse: Vec<f64> = rows.iter().filter_map(|r| r.value_mse).collect();
                let values: Vec<f64> = rows.iter().filter_map(|r| r.value).collect();
                let ess: Vec<f64> = rows.iter().filter_map(|r| r.ess).collect();
                let (mean, se) = mean_se(&mse);
                mse.sort_by(f64::total_cmp);
                cells.push(CellSummary {
                    setting,
                    spec,
                    method,
                    replicates: rows.len(),
                    failures: rows.len() - mse.len(),
                    mean_value_mse: mean,
                    se_value_mse: se,
                    quantiles: [0.1, 0.25, 0.5, 0.75, 0.9].map(|q| quantile(&mse, q)),
                    mean_value: mean_se(&values).0,
                    mean_ess: mean_se(&ess).0,
                });
            }
        }
    }
    cells
}

/// Run every (setting, replicate) pair in parallel. Records come back in
/// (setting, replicate, spec, method) order whatever the thread count.
/// Failed replicates are recorded, not fatal; see [`BenchResults::check_failures`].
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchResults> {
    config.validate()?;
    let jobs: Vec<(Setting, usize)> = config
        .settings
        .iter()
        .flat_map(|&s| (0..config.replicates).map(move |r| (s, r)))
        .collect();
    let records: Vec<BenchRecord> = jobs
        .par_iter()
        .map(|&(s, r)| run_replicate(config, s, r))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let cells = summarize(config, &records);
    Ok(BenchResults {
        config: config.clone(),
        records,
        cells,
    })
}

fn opt_num(v: Option<f64>) -> String {
    v.map(crate::fmt_num).unwrap_or_else(|| "NA".into())
}

/// Write `raw.csv`, `summary.json` and the long-format `long.csv` into `dir`.
pub fn emit_report(results: &BenchResults, dir: &Path) -> Result<()> {
    if results.records.is_empty() || results.config.methods.is_empty() {
        return Err(Error::InvalidConfig(
            "no benchmark results to report".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join("raw.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record([
        "setting",
        "spec",
        "method",
        "replicate",
        "seed",
        "value",
        "value_mse",
        "ess",
        "n",
        "error",
    ])
    .map_err(|e| Error::csv(&path, e))?;
    for r in &results.records {
        w.write_record([
            r.setting.as_str().to_string(),
            r.spec.as_str().to_string(),
            r.method.to_string(),
            r.replicate.to_string(),
            r.seed.to_string(),
            opt_num(r.value),
            opt_num(r.value_mse),
            opt_num(r.ess),
            r.experimental_size.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("long.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(["setting", "spec", "method", "replicate", "metric", "value"])
        .map_err(|e| Error::csv(&path, e))?;
    for r in &results.records {
        for (metric, v) in [
            ("value", r.value),
            ("value_mse", r.value_mse),
            ("ess", r.ess),
        ] {
            if let Some(v) = v {
                w.write_record([
                    r.setting.as_str().to_string(),
                    r.spec.as_str().to_string(),
                    r.method.to_string(),
                    r.replicate.to_string(),
                    metric.to_string(),
                    crate::fmt_num(v),
                ])
                .map_err(|e| Error::csv(&path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    #[derive(Serialize)]
    struct Summary<'a> {
        config: &'a BenchConfig,
        cells: &'a [CellSummary],
    }
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&Summary {
        config: &results.config,
        cells: &results.cells,
    })?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
