//! Domain types, CSV ingestion and the seeded simulation design.
//!
//! The simulated population follows the three contrast settings used to
//! benchmark the learners: covariates `X ~ N((1,1), I)`, potential outcomes
//! `Y*(a) = 1 + 2 X1 + 3 X2 + a tau(X) + eps(a)` and selection into the
//! experiment through a logistic sampling score.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{fmt_num, logistic};

/// Dense row-major matrix of covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

/// Rows `(X, A, Y)` from the randomized experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentalSample {
    covariates: Matrix,
    treatment: Vec<u8>,
    outcome: Vec<f64>,
    names: Vec<String>,
}

impl ExperimentalSample {
    pub fn new(covariates: Matrix, treatment: Vec<u8>, outcome: Vec<f64>) -> Result<Self> {
        let names = default_names(covariates.ncols());
        Self::with_names(covariates, treatment, outcome, names)
    }

    pub fn with_names(
        covariates: Matrix,
        treatment: Vec<u8>,
        outcome: Vec<f64>,
        names: Vec<String>,
    ) -> Result<Self> {
        let n = covariates.nrows();
        if n < 2 {
            return Err(Error::InvalidSample(format!(
                "experimental sample needs at least 2 rows, got {n}"
            )));
        }
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::InvalidSample(format!(
                "row counts differ: covariates {n}, treatment {}, outcome {}",
                treatment.len(),
                outcome.len()
            )));
        }
        if names.len() != covariates.ncols() {
            return Err(Error::DimensionMismatch {
                expected: covariates.ncols(),
                got: names.len(),
            });
        }
        if let Some(bad) = treatment.iter().find(|&&a| a > 1) {
            return Err(Error::InvalidSample(format!(
                "treatment must be 0 or 1, found {bad}"
            )));
        }
        let treated = treatment.iter().filter(|&&a| a == 1).count();
        if treated == 0 || treated == n {
            return Err(Error::InvalidSample(
                "treatment must contain both arms (at least one 0 and one 1)".into(),
            ));
        }
        if !covariates.as_slice().iter().all(|v| v.is_finite())
            || !outcome.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidSample("non-finite value in sample".into()));
        }
        Ok(Self {
            covariates,
            treatment,
            outcome,
            names,
        })
    }

    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &Matrix {
        &self.covariates
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.covariates.row(i)
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    #[inline]
    pub fn a(&self, i: usize) -> f64 {
        f64::from(self.treatment[i])
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::with_names(
            self.covariates.select_rows(idx),
            idx.iter().map(|&i| self.treatment[i]).collect(),
            idx.iter().map(|&i| self.outcome[i]).collect(),
            self.names.clone(),
        )
    }
}

/// Covariate-only rows from the real-world data.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSample {
    covariates: Matrix,
    names: Vec<String>,
}

impl TargetSample {
    pub fn new(covariates: Matrix) -> Result<Self> {
        let names = default_names(covariates.ncols());
        Self::with_names(covariates, names)
    }

    pub fn with_names(covariates: Matrix, names: Vec<String>) -> Result<Self> {
        let m = covariates.nrows();
        if m < 2 {
            return Err(Error::InvalidSample(format!(
                "target sample needs at least 2 rows, got {m}"
            )));
        }
        if names.len() != covariates.ncols() {
            return Err(Error::DimensionMismatch {
                expected: covariates.ncols(),
                got: names.len(),
            });
        }
        if !covariates.as_slice().iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSample("non-finite value in sample".into()));
        }
        Ok(Self { covariates, names })
    }

    pub fn m(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn p(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn covariates(&self) -> &Matrix {
        &self.covariates
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::with_names(self.covariates.select_rows(idx), self.names.clone())
    }

    pub(crate) fn check_paired(&self, exp: &ExperimentalSample) -> Result<()> {
        if self.p() != exp.p() {
            return Err(Error::DimensionMismatch {
                expected: exp.p(),
                got: self.p(),
            });
        }
        Ok(())
    }
}

/// Linear rule `d(x) = 1{eta0 + eta1' x > 0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRule {
    eta: Vec<f64>,
}

impl LinearRule {
    pub fn new(eta: Vec<f64>) -> Result<Self> {
        if eta.is_empty() {
            return Err(Error::InvalidConfig(
                "rule needs at least an intercept".into(),
            ));
        }
        if !eta.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(
                "rule coefficients must be finite".into(),
            ));
        }
        Ok(Self { eta })
    }

    pub fn zeros(p: usize) -> Self {
        Self {
            eta: vec![0.0; p + 1],
        }
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// Number of covariates the rule expects.
    pub fn p(&self) -> usize {
        self.eta.len() - 1
    }

    #[inline]
    pub fn score(&self, x: &[f64]) -> f64 {
        self.eta[0] + self.eta[1..].iter().zip(x).map(|(e, v)| e * v).sum::<f64>()
    }

    /// Treatment decision; ties at zero map to 0.
    #[inline]
    pub fn decide(&self, x: &[f64]) -> u8 {
        u8::from(self.score(x) > 0.0)
    }

    pub fn predict(&self, x: &[f64]) -> Result<u8> {
        if x.len() != self.p() {
            return Err(Error::DimensionMismatch {
                expected: self.p(),
                got: x.len(),
            });
        }
        Ok(self.decide(x))
    }

    /// Rescale so the largest absolute coefficient is 1. The zero vector is
    /// returned unchanged.
    pub fn canonical(&self) -> Self {
        let scale = self.eta.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return self.clone();
        }
        Self {
            eta: self.eta.iter().map(|v| v / scale).collect(),
        }
    }

    pub fn same_halfspace(&self, other: &Self, tol: f64) -> bool {
        let (a, b) = (self.canonical(), other.canonical());
        a.eta.len() == b.eta.len() && a.eta.iter().zip(&b.eta).all(|(x, y)| (x - y).abs() <= tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightNormalization {
    /// Weights sum to one over the experimental rows.
    SumToOne,
    /// Raw inverse sampling scores (mean close to N/n).
    InverseScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMethod {
    Mle,
    Ee,
    Nonparametric,
    Uniform,
    True,
}

impl WeightMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightMethod::Mle => "mle",
            WeightMethod::Ee => "ee",
            WeightMethod::Nonparametric => "nonparametric",
            WeightMethod::Uniform => "uniform",
            WeightMethod::True => "true",
        }
    }
}

/// Per-experimental-row transfer weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferWeights {
    weights: Vec<f64>,
    normalization: WeightNormalization,
    method: WeightMethod,
}

impl TransferWeights {
    pub fn new(
        weights: Vec<f64>,
        normalization: WeightNormalization,
        method: WeightMethod,
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidConfig("empty weight vector".into()));
        }
        if !weights.iter().all(|w| w.is_finite() && *w >= 0.0) {
            return Err(Error::InvalidConfig(
                "weights must be finite and nonnegative".into(),
            ));
        }
        if normalization == WeightNormalization::SumToOne {
            let s: f64 = weights.iter().sum();
            if (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidConfig(format!(
                    "sum-to-one weights sum to {s}"
                )));
            }
        }
        Ok(Self {
            weights,
            normalization,
            method,
        })
    }

    /// Normalize arbitrary nonnegative weights to sum to one.
    pub fn normalized(raw: &[f64], method: WeightMethod) -> Result<Self> {
        let s: f64 = raw.iter().sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cannot normalize weights with total {s}"
            )));
        }
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        Self::new(w, WeightNormalization::SumToOne, method)
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
            normalization: WeightNormalization::SumToOne,
            method: WeightMethod::Uniform,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn normalization(&self) -> WeightNormalization {
        self.normalization
    }

    pub fn method(&self) -> WeightMethod {
        self.method
    }

    pub fn is_sum_to_one(&self) -> bool {
        self.normalization == WeightNormalization::SumToOne
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<()> {
        if self.weights.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.weights.len(),
            });
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        wtr.write_record(["row_id", "weight", "method"])
            .map_err(|e| Error::csv(path, e))?;
        for (i, w) in self.weights.iter().enumerate() {
            wtr.write_record([i.to_string(), fmt_num(*w), self.method.as_str().to_string()])
                .map_err(|e| Error::csv(path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSchema {
    /// Covariate columns in order; `None` takes every column that is not the
    /// treatment or outcome.
    pub covariates: Option<Vec<String>>,
    pub treatment: String,
    pub outcome: String,
}

impl Default for ColumnSchema {
    fn default() -> Self {
        Self {
            covariates: None,
            treatment: "A".into(),
            outcome: "Y".into(),
        }
    }
}

/// Column layout of the experimental sample used in the NSW job-training study.
pub fn nsw_schema() -> ColumnSchema {
    ColumnSchema {
        covariates: Some(
            [
                "age", "educ", "black", "hisp", "married", "nodegr", "log.Re74", "log.Re75",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ),
        treatment: "treat".into(),
        outcome: "log.Re78".into(),
    }
}

struct RawTable {
    headers: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_table(path: &Path) -> Result<RawTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = rdr
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::csv(path, e))?;
    if rows.is_empty() {
        return Err(Error::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    Ok(RawTable { headers, rows })
}

impl RawTable {
    fn index_of(&self, path: &Path, column: &str) -> Result<usize> {
        self.headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: column.to_string(),
            })
    }

    fn cell(&self, path: &Path, row: usize, col: usize) -> Result<f64> {
        let raw = self.rows[row].get(col).unwrap_or("");
        let column = self.headers[col].clone();
        if raw.is_empty() || raw.eq_ignore_ascii_case("na") || raw.eq_ignore_ascii_case("nan") {
            return Err(Error::MissingValue {
                path: path.to_path_buf(),
                row: row + 1,
                column,
            });
        }
        match raw.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::NonNumericCell {
                path: path.to_path_buf(),
                row: row + 1,
                column,
                value: raw.to_string(),
            }),
        }
    }

    fn matrix(&self, path: &Path, cols: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(self.rows.len() * cols.len());
        for r in 0..self.rows.len() {
            for &c in cols {
                data.push(self.cell(path, r, c)?);
            }
        }
        Matrix::new(self.rows.len(), cols.len(), data)
    }
}

pub fn load_experimental(path: &Path, schema: &ColumnSchema) -> Result<ExperimentalSample> {
    let table = read_table(path)?;
    let a_col = table.index_of(path, &schema.treatment)?;
    let y_col = table.index_of(path, &schema.outcome)?;
    let names: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => table
            .headers
            .iter()
            .filter(|h| **h != schema.treatment && **h != schema.outcome)
            .cloned()
            .collect(),
    };
    let x_cols = names
        .iter()
        .map(|c| table.index_of(path, c))
        .collect::<Result<Vec<_>>>()?;
    let covariates = table.matrix(path, &x_cols)?;
    let mut treatment = Vec::with_capacity(table.rows.len());
    let mut outcome = Vec::with_capacity(table.rows.len());
    for r in 0..table.rows.len() {
        let a = table.cell(path, r, a_col)?;
        if a != 0.0 && a != 1.0 {
            return Err(Error::NonBinaryTreatment {
                path: path.to_path_buf(),
                row: r + 1,
                column: schema.treatment.clone(),
                value: table.rows[r].get(a_col).unwrap_or("").to_string(),
            });
        }
        treatment.push(a as u8);
        outcome.push(table.cell(path, r, y_col)?);
    }
    let sample = ExperimentalSample::with_names(covariates, treatment, outcome, names)?;
    log::info!(
        "{}: loaded {} experimental rows",
        path.display(),
        sample.n()
    );
    Ok(sample)
}

pub fn load_target(path: &Path, covariates: &[String]) -> Result<TargetSample> {
    let table = read_table(path)?;
    let cols = covariates
        .iter()
        .map(|c| table.index_of(path, c))
        .collect::<Result<Vec<_>>>()?;
    let sample = TargetSample::with_names(table.matrix(path, &cols)?, covariates.to_vec())?;
    log::info!("{}: loaded {} target rows", path.display(), sample.m());
    Ok(sample)
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    I,
    II,
    III,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::I, Setting::II, Setting::III];

    /// True contrast `tau(x)` for the two-covariate design.
    pub fn contrast(self, x: &[f64]) -> f64 {
        let (x1, x2) = (x[0], x[1]);
        match self {
            Setting::I => ((1.0 + x1).exp() - 3.0 * x2 - 5.0).atan(),
            Setting::II => 1f64.cos() + x1.cos() + x2.cos() - 1.5,
            Setting::III => 1.0 + 2.0 * x1 + 3.0 * x2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::I => "I",
            Setting::II => "II",
            Setting::III => "III",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            Setting::I => 1,
            Setting::II => 2,
            Setting::III => 3,
        }
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(Setting::I),
            "II" | "2" => Ok(Setting::II),
            "III" | "3" => Ok(Setting::III),
            other => Err(Error::InvalidConfig(format!("unknown setting `{other}`"))),
        }
    }
}

/// Logistic sampling coefficients `(alpha0, alpha1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingAlpha {
    pub intercept: f64,
    pub slopes: Vec<f64>,
}

impl Default for SamplingAlpha {
    fn default() -> Self {
        Self {
            intercept: -8.0,
            slopes: vec![1.0, -2.0],
        }
    }
}

impl SamplingAlpha {
    pub fn score(&self, x: &[f64]) -> f64 {
        logistic(self.intercept + self.slopes.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub setting: Setting,
    pub population_size: usize,
    pub rwd_size: usize,
    pub sampling_alpha: SamplingAlpha,
    pub noise_sd: f64,
    pub seed: u64,
}

impl SimulationConfig {
    pub fn new(setting: Setting, population_size: usize, rwd_size: usize, seed: u64) -> Self {
        Self {
            setting,
            population_size,
            rwd_size,
            sampling_alpha: SamplingAlpha::default(),
            noise_sd: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rwd_size < 1 || self.population_size < self.rwd_size {
            return Err(Error::InvalidConfig(format!(
                "need N >= m >= 1, got N={} m={}",
                self.population_size, self.rwd_size
            )));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidConfig("noise_sd must be positive".into()));
        }
        if self.sampling_alpha.slopes.len() != 2 {
            return Err(Error::InvalidConfig(
                "sampling slopes must have length 2".into(),
            ));
        }
        Ok(())
    }
}

/// One simulated target population with its experimental and RWD samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationDraw {
    pub config: SimulationConfig,
    pub covariates: Matrix,
    /// `(Y*(0), Y*(1))` per population row.
    pub potential_outcomes: Vec<[f64; 2]>,
    /// Noise-free contrast `tau(X_i)`.
    pub contrast: Vec<f64>,
    pub selection: Vec<bool>,
    pub experimental_rows: Vec<usize>,
    /// Treatment assigned to each experimental row, aligned with `experimental_rows`.
    pub treatment: Vec<u8>,
    pub target_rows: Vec<usize>,
}

/// Draw a population. Random numbers are consumed in this order:
/// for each population row `(X1, X2, eps(0), eps(1), U_selection)`, then the
/// RWD subsample, then one uniform per experimental row for `A`.
pub fn simulate_population(config: &SimulationConfig) -> Result<PopulationDraw> {
    config.validate()?;
    let n_pop = config.population_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = Vec::with_capacity(2 * n_pop);
    let mut po = Vec::with_capacity(n_pop);
    let mut contrast = Vec::with_capacity(n_pop);
    let mut selection = Vec::with_capacity(n_pop);
    for _ in 0..n_pop {
        let x1 = 1.0 + rng.sample::<f64, _>(StandardNormal);
        let x2 = 1.0 + rng.sample::<f64, _>(StandardNormal);
        let e0 = config.noise_sd * rng.sample::<f64, _>(StandardNormal);
        let e1 = config.noise_sd * rng.sample::<f64, _>(StandardNormal);
        let u: f64 = rng.random();
        let xi = [x1, x2];
        let tau = config.setting.contrast(&xi);
        let base = 1.0 + 2.0 * x1 + 3.0 * x2;
        po.push([base + e0, base + tau + e1]);
        contrast.push(tau);
        selection.push(u < config.sampling_alpha.score(&xi));
        x.extend_from_slice(&xi);
    }
    let mut target_rows = index::sample(&mut rng, n_pop, config.rwd_size).into_vec();
    target_rows.sort_unstable();
    let experimental_rows: Vec<usize> = (0..n_pop).filter(|&i| selection[i]).collect();
    if experimental_rows.is_empty() {
        return Err(Error::InvalidSample(
            "no population row was selected into the experiment".into(),
        ));
    }
    let treatment = experimental_rows
        .iter()
        .map(|_| u8::from(rng.random::<f64>() < 0.5))
        .collect();
    Ok(PopulationDraw {
        config: config.clone(),
        covariates: Matrix::new(n_pop, 2, x)?,
        potential_outcomes: po,
        contrast,
        selection,
        experimental_rows,
        treatment,
        target_rows,
    })
}

impl PopulationDraw {
    pub fn population_size(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn experimental_sample(&self) -> Result<ExperimentalSample> {
        let y = self
            .experimental_rows
            .iter()
            .zip(&self.treatment)
            .map(|(&i, &a)| self.potential_outcomes[i][a as usize])
            .collect();
        ExperimentalSample::new(
            self.covariates.select_rows(&self.experimental_rows),
            self.treatment.clone(),
            y,
        )
    }

    pub fn target_sample(&self) -> Result<TargetSample> {
        TargetSample::new(self.covariates.select_rows(&self.target_rows))
    }

    /// `Y*(1) - Y*(0)` on the experimental rows, noise included.
    pub fn experimental_true_contrast(&self) -> Vec<f64> {
        self.experimental_rows
            .iter()
            .map(|&i| self.potential_outcomes[i][1] - self.potential_outcomes[i][0])
            .collect()
    }

    /// Population mean of `Y*(d(X))`.
    pub fn population_value(&self, rule: &LinearRule) -> f64 {
        let total: f64 = self
            .covariates
            .rows()
            .zip(&self.potential_outcomes)
            .map(|(x, y)| y[rule.decide(x) as usize])
            .sum();
        total / self.population_size() as f64
    }

    /// Population mean of `Y*(1) - Y*(0)`.
    pub fn population_ate(&self) -> f64 {
        let total: f64 = self.potential_outcomes.iter().map(|y| y[1] - y[0]).sum();
        total / self.population_size() as f64
    }

    /// Write `population.csv`, `experimental.csv`, `target.csv` and `draw.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut in_target = vec![false; self.population_size()];
        for &i in &self.target_rows {
            in_target[i] = true;
        }
        let path = dir.join("population.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["x1", "x2", "y0", "y1", "tau", "selected", "target"])
            .map_err(|e| Error::csv(&path, e))?;
        for i in 0..self.population_size() {
            let x = self.covariates.row(i);
            let y = self.potential_outcomes[i];
            w.write_record([
                fmt_num(x[0]),
                fmt_num(x[1]),
                fmt_num(y[0]),
                fmt_num(y[1]),
                fmt_num(self.contrast[i]),
                u8::from(self.selection[i]).to_string(),
                u8::from(in_target[i]).to_string(),
            ])
            .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let exp = self.experimental_sample()?;
        let path = dir.join("experimental.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["x1", "x2", "A", "Y"])
            .map_err(|e| Error::csv(&path, e))?;
        for i in 0..exp.n() {
            let x = exp.x(i);
            w.write_record([
                fmt_num(x[0]),
                fmt_num(x[1]),
                exp.treatment()[i].to_string(),
                fmt_num(exp.outcome()[i]),
            ])
            .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("target.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["x1", "x2"])
            .map_err(|e| Error::csv(&path, e))?;
        for &i in &self.target_rows {
            let x = self.covariates.row(i);
            w.write_record([fmt_num(x[0]), fmt_num(x[1])])
                .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("draw.json");
        let meta = serde_json::to_string_pretty(&self.config)?;
        fs::write(&path, meta + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reload a draw written by [`PopulationDraw::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("draw.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let config: SimulationConfig = serde_json::from_str(&text)?;

        let path = dir.join("population.csv");
        let table = read_table(&path)?;
        let cols = ["x1", "x2", "y0", "y1", "tau", "selected", "target"]
            .iter()
            .map(|c| table.index_of(&path, c))
            .collect::<Result<Vec<_>>>()?;
        let n_pop = table.rows.len();
        let mut x = Vec::with_capacity(2 * n_pop);
        let mut po = Vec::with_capacity(n_pop);
        let mut contrast = Vec::with_capacity(n_pop);
        let mut selection = Vec::with_capacity(n_pop);
        let mut target_rows = Vec::new();
        for r in 0..n_pop {
            let v = cols
                .iter()
                .map(|&c| table.cell(&path, r, c))
                .collect::<Result<Vec<_>>>()?;
            x.extend_from_slice(&v[0..2]);
            po.push([v[2], v[3]]);
            contrast.push(v[4]);
            selection.push(v[5] == 1.0);
            if v[6] == 1.0 {
                target_rows.push(r);
            }
        }
        let experimental_rows: Vec<usize> = (0..n_pop).filter(|&i| selection[i]).collect();
        let exp_path: PathBuf = dir.join("experimental.csv");
        let exp = load_experimental(&exp_path, &ColumnSchema::default())?;
        if exp.n() != experimental_rows.len() {
            return Err(Error::InvalidSample(format!(
                "experimental.csv has {} rows but population.csv selects {}",
                exp.n(),
                experimental_rows.len()
            )));
        }
        Ok(Self {
            config,
            covariates: Matrix::new(n_pop, 2, x)?,
            potential_outcomes: po,
            contrast,
            selection,
            experimental_rows,
            treatment: exp.treatment().to_vec(),
            target_rows,
        })
    }
}

/// Normalized true inverse sampling scores over the experimental rows.
pub fn true_inverse_score_weights(draw: &PopulationDraw) -> Result<TransferWeights> {
    let alpha = &draw.config.sampling_alpha;
    let raw: Vec<f64> = draw
        .experimental_rows
        .iter()
        .map(|&i| 1.0 / alpha.score(draw.covariates.row(i)))
        .collect();
    TransferWeights::normalized(&raw, WeightMethod::True)
}
