use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use transfer_itr::bench::{
    emit_report, run_benchmark, BenchConfig, BenchMethod, SamplingSpec, Scale,
};
use transfer_itr::data::{load_experimental, load_target, simulate_population, ColumnSchema};
use transfer_itr::evaluation::{value_aipw_weighted, Augmentation};
use transfer_itr::nuisance::{fit_nuisance, ContrastEstimator, PropensityMode};
use transfer_itr::pipeline::{fit_rule, PipelineOptions};
use transfer_itr::policy::RampLossParams;
use transfer_itr::selection::{
    compute_weights, cross_validate, MethodCatalog, WeightKind, WeightedValueEvaluator,
};
use transfer_itr::weights::{
    balance_diagnostics, effective_sample_size, fit_weights_tuned, write_balance_csv, ScoreFeatures,
};
use transfer_itr::{
    Error, ErrorCategory, ExperimentalSample, LinearRule, Setting, SimulationConfig, TargetSample,
    TransferWeights, WeightMethod,
};

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, missing or conflicting arguments)
  3  input error (schema mismatch, malformed CSV/JSON, invalid sample or configuration)
  4  infeasible balance constraints
  5  numerical failure (non-convergence, separation, rank deficiency)
  6  I/O failure

Every flag may also be given in a --config file as `name = value` lines
(`#` starts a comment); flags on the command line take precedence.";

#[derive(Parser)]
#[command(name = "transfer-itr", version, about = "Transfer-weighted linear treatment rules", after_help = EXIT_HELP)]
struct Cli {
    /// Flat `key = value` file supplying defaults for any flag.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Repeat for more log output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a simulated population and write it as CSV files.
    Simulate(SimulateArgs),
    /// Estimate transfer weights for the experimental rows.
    Weights(WeightsArgs),
    /// Learn a linear rule and write it as JSON.
    Fit(FitArgs),
    /// Estimate the value of a saved rule.
    Evaluate(EvaluateArgs),
    /// Choose a weighting method by multi-split cross-validation.
    Cv(CvArgs),
    /// Run the Monte Carlo benchmark.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_setting)]
    setting: Setting,
    #[arg(long, default_value_t = 100_000)]
    population_size: usize,
    #[arg(long, default_value_t = 1000)]
    rwd_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampling-model intercept.
    #[arg(long, allow_hyphen_values = true)]
    alpha0: Option<f64>,
    /// Sampling-model slopes, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    alpha1: Option<Vec<f64>>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long, default_value = "simulated")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Experimental CSV (covariates, treatment, outcome).
    #[arg(long)]
    experimental: PathBuf,
    /// RWD CSV with the same covariate columns.
    #[arg(long)]
    target: PathBuf,
    /// Covariate columns; defaults to every column except treatment and outcome.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long, default_value = "A")]
    treatment: String,
    #[arg(long, default_value = "Y")]
    outcome: String,
}

impl DataArgs {
    fn load(&self) -> transfer_itr::Result<(ExperimentalSample, TargetSample)> {
        let schema = ColumnSchema {
            covariates: self.covariates.clone(),
            treatment: self.treatment.clone(),
            outcome: self.outcome.clone(),
        };
        let exp = load_experimental(&self.experimental, &schema)?;
        let rwd = load_target(&self.target, exp.names())?;
        Ok((exp, rwd))
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Np,
    Mle,
    Ee,
    Uniform,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum FeaturesArg {
    Linear,
    Squared,
}

impl From<FeaturesArg> for ScoreFeatures {
    fn from(f: FeaturesArg) -> Self {
        match f {
            FeaturesArg::Linear => ScoreFeatures::Linear,
            FeaturesArg::Squared => ScoreFeatures::Squared,
        }
    }
}

#[derive(Args, Clone)]
struct WeightChoice {
    /// Weighting method; mle and ee need --N.
    #[arg(long, value_enum, default_value = "np")]
    method: MethodArg,
    /// Target population size.
    #[arg(long = "N", value_name = "N")]
    population_size: Option<f64>,
    /// Covariate transform in the parametric sampling model.
    #[arg(long, value_enum, default_value = "linear")]
    features: FeaturesArg,
    /// Use weights from a CSV written by `weights` instead of estimating them.
    #[arg(long, conflicts_with = "method")]
    weights_file: Option<PathBuf>,
}

impl WeightChoice {
    fn kind(&self) -> WeightKind {
        match self.method {
            MethodArg::Np => WeightKind::Nonparametric,
            MethodArg::Mle => WeightKind::Mle(self.features.into()),
            MethodArg::Ee => WeightKind::Ee(self.features.into()),
            MethodArg::Uniform => WeightKind::Unweighted,
        }
    }

    fn require_n(&self) -> Result<(), clap::Error> {
        if matches!(self.method, MethodArg::Mle | MethodArg::Ee)
            && self.population_size.is_none()
            && self.weights_file.is_none()
        {
            return Err(Cli::command().error(
                ErrorKind::MissingRequiredArgument,
                "parametric weighting (--method mle|ee) requires --N <N>",
            ));
        }
        Ok(())
    }

    fn weights(
        &self,
        exp: &ExperimentalSample,
        rwd: &TargetSample,
    ) -> transfer_itr::Result<TransferWeights> {
        match &self.weights_file {
            Some(path) => read_weights(path, exp.n()),
            None => compute_weights(self.kind(), exp, rwd, self.population_size),
        }
    }
}

#[derive(Args)]
struct WeightsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    weights: WeightChoice,
    #[arg(long, default_value = "weights.csv")]
    out: PathBuf,
    /// Also write the balance diagnostics table.
    #[arg(long)]
    balance: Option<PathBuf>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PropensityArg {
    Constant,
    Logistic,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum EstimatorArg {
    Aipw,
    Regression,
    Ipw,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "constant")]
    propensity: PropensityArg,
    #[arg(long, value_enum, default_value = "aipw")]
    estimator: EstimatorArg,
    /// Random starting rules besides the least-squares one.
    #[arg(long, default_value_t = 5)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Refit with the loss scale doubled twice.
    #[arg(long)]
    anneal: bool,
    #[arg(long, default_value_t = 1.0)]
    zeta1: f64,
    #[arg(long, default_value_t = 1.0)]
    zeta2: f64,
    /// Subtract rather than add the regression term in the value estimate.
    #[arg(long)]
    verbatim_sign: bool,
}

impl ModelArgs {
    fn pipeline(&self) -> transfer_itr::Result<PipelineOptions> {
        let mut opts = PipelineOptions {
            propensity: self.propensity(),
            estimator: match self.estimator {
                EstimatorArg::Aipw => ContrastEstimator::Aipw,
                EstimatorArg::Regression => ContrastEstimator::Regression,
                EstimatorArg::Ipw => ContrastEstimator::Ipw,
            },
            ..Default::default()
        };
        opts.learn.params = RampLossParams::new(self.zeta1, self.zeta2)?;
        opts.learn.random_starts = self.starts;
        opts.learn.seed = self.seed;
        opts.learn.anneal = self.anneal;
        Ok(opts)
    }

    fn propensity(&self) -> PropensityMode {
        match self.propensity {
            PropensityArg::Constant => PropensityMode::Constant,
            PropensityArg::Logistic => PropensityMode::Logistic,
        }
    }

    fn augmentation(&self) -> Augmentation {
        if self.verbatim_sign {
            Augmentation::Verbatim
        } else {
            Augmentation::Plus
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    weights: WeightChoice,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "rule.json")]
    out: PathBuf,
    /// Also write the objective trace as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    rule: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    weights: WeightChoice,
    #[command(flatten)]
    model: ModelArgs,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Target population size; enables the parametric candidates.
    #[arg(long = "N", value_name = "N")]
    population_size: Option<f64>,
    #[arg(long, value_enum, default_value = "linear")]
    features: FeaturesArg,
    #[arg(long, default_value_t = 10)]
    splits: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "cv")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "I,II,III", value_parser = parse_setting)]
    settings: Vec<Setting>,
    #[arg(long, value_delimiter = ',', default_value = "w1,w2,cv,np,unweight,bm", value_parser = parse_method)]
    methods: Vec<BenchMethod>,
    #[arg(long, value_delimiter = ',', default_value = "correct,misspecified", value_parser = parse_spec)]
    specs: Vec<SamplingSpec>,
    /// Defaults to the scale's replicate count.
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, default_value = "desk", value_parser = parse_scale)]
    scale: Scale,
    #[arg(long)]
    population_size: Option<usize>,
    #[arg(long)]
    rwd_size: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    alpha0: Option<f64>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    alpha1: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    cv_splits: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "bench")]
    out: PathBuf,
}

fn parse_setting(s: &str) -> Result<Setting, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_method(s: &str) -> Result<BenchMethod, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_spec(s: &str) -> Result<SamplingSpec, String> {
    SamplingSpec::ALL
        .into_iter()
        .find(|x| x.as_str() == s.trim())
        .ok_or_else(|| format!("unknown sampling specification `{s}`"))
}

/// Rule file layout.
#[derive(Serialize, Deserialize)]
struct RuleFile {
    eta: Vec<f64>,
    canonicalized: bool,
    #[serde(default)]
    metadata: serde_json::Value,
}

fn read_weights(path: &Path, n: usize) -> transfer_itr::Result<TransferWeights> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.into(),
            })
    };
    let (wc, mc) = (col("weight")?, col("method")?);
    let mut raw = Vec::new();
    let mut method = WeightMethod::Uniform;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let cell = rec.get(wc).unwrap_or("");
        raw.push(
            cell.trim()
                .parse::<f64>()
                .map_err(|_| Error::NonNumericCell {
                    path: path.to_path_buf(),
                    row: r + 1,
                    column: "weight".into(),
                    value: cell.into(),
                })?,
        );
        method = match rec.get(mc).unwrap_or("") {
            "mle" => WeightMethod::Mle,
            "ee" => WeightMethod::Ee,
            "nonparametric" => WeightMethod::Nonparametric,
            "true" => WeightMethod::True,
            _ => WeightMethod::Uniform,
        };
    }
    if raw.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: raw.len(),
        });
    }
    TransferWeights::normalized(&raw, method)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> transfer_itr::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn to_json<T: Serialize>(v: &T) -> transfer_itr::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn simulate(args: SimulateArgs) -> transfer_itr::Result<()> {
    let mut config =
        SimulationConfig::new(args.setting, args.population_size, args.rwd_size, args.seed);
    if let Some(a) = args.alpha0 {
        config.sampling_alpha.intercept = a;
    }
    if let Some(s) = args.alpha1 {
        config.sampling_alpha.slopes = s;
    }
    if let Some(sd) = args.noise_sd {
        config.noise_sd = sd;
    }
    let draw = simulate_population(&config)?;
    draw.write_dir(&args.out)?;
    println!(
        "wrote {} ({} experimental rows, {} target rows)",
        args.out.display(),
        draw.experimental_rows.len(),
        draw.target_rows.len()
    );
    Ok(())
}

fn weights(args: WeightsArgs) -> transfer_itr::Result<()> {
    let (exp, rwd) = args.data.load()?;
    let w = if args.weights.weights_file.is_none() && args.weights.method == MethodArg::Np {
        let tuned = fit_weights_tuned(&exp, &rwd)?;
        if let Some(path) = &args.balance {
            let rows = balance_diagnostics(&exp, &rwd, &tuned.fit.weights, &tuned.constraints)?;
            write_balance_csv(&rows, path)?;
        }
        log::info!("balance tolerance multiplier {}", tuned.delta);
        tuned.fit.weights
    } else {
        if args.balance.is_some() {
            log::warn!("--balance is only written for nonparametric weights");
        }
        args.weights.weights(&exp, &rwd)?
    };
    w.write_csv(&args.out)?;
    println!(
        "wrote {} (effective sample size {})",
        args.out.display(),
        transfer_itr::fmt_num(effective_sample_size(&w))
    );
    Ok(())
}

fn fit(args: FitArgs) -> transfer_itr::Result<()> {
    let (exp, rwd) = args.data.load()?;
    let w = args.weights.weights(&exp, &rwd)?;
    let fitted = fit_rule(&exp, &w, &args.model.pipeline()?)?;
    let value = value_aipw_weighted(
        &fitted.report.eta,
        &exp,
        &w,
        &fitted.nuisance,
        args.model.augmentation(),
    )?;
    let file = RuleFile {
        eta: fitted.report.eta.eta().to_vec(),
        canonicalized: true,
        metadata: json!({
            "covariates": exp.names(),
            "weights_method": w.method().as_str(),
            "n": exp.n(),
            "value": value.value,
            "ess": value.ess,
            "objective": fitted.report.final_objective(),
            "outer_iterations": fitted.report.objective_trace.len(),
            "converged": fitted.report.converged,
            "degenerate": fitted.report.degenerate,
            "nuisance": fitted.nuisance,
        }),
    };
    write_text(&args.out, &to_json(&file)?)?;
    if let Some(path) = &args.trace {
        write_text(path, &fitted.report.trace_csv())?;
    }
    println!(
        "wrote {} (value {})",
        args.out.display(),
        transfer_itr::fmt_num(value.value)
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> transfer_itr::Result<()> {
    let text = fs::read_to_string(&args.rule).map_err(|e| io_err(&args.rule, e))?;
    let file: RuleFile = serde_json::from_str(&text)?;
    let rule = LinearRule::new(file.eta)?;
    let (exp, rwd) = args.data.load()?;
    if rule.p() != exp.p() {
        return Err(Error::DimensionMismatch {
            expected: exp.p() + 1,
            got: rule.p() + 1,
        });
    }
    let w = args.weights.weights(&exp, &rwd)?;
    let fit = fit_nuisance(&exp, &w, args.model.propensity())?;
    let value = value_aipw_weighted(&rule, &exp, &w, &fit, args.model.augmentation())?;
    let out = to_json(&json!({
        "value": value.value,
        "ess": value.ess,
        "weights_method": w.method().as_str(),
        "n": exp.n(),
    }))?;
    match &args.out {
        Some(path) => write_text(path, &out),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn cv(args: CvArgs) -> transfer_itr::Result<()> {
    let (exp, rwd) = args.data.load()?;
    let pipeline = args.model.pipeline()?;
    let catalog = MethodCatalog::standard(args.population_size, args.features.into(), pipeline);
    let evaluator = WeightedValueEvaluator {
        propensity: args.model.propensity(),
        augmentation: args.model.augmentation(),
    };
    let report = cross_validate(
        &exp,
        &rwd,
        &catalog,
        args.splits,
        args.model.seed,
        &evaluator,
    )?;
    report.write(&args.out)?;
    let file = RuleFile {
        eta: report.rule.eta().to_vec(),
        canonicalized: true,
        metadata: json!({
            "covariates": exp.names(),
            "method": report.winner,
            "n": exp.n(),
        }),
    };
    write_text(&args.out.join("rule.json"), &to_json(&file)?)?;
    println!("selected {}", report.winner);
    Ok(())
}

fn bench(args: BenchArgs) -> transfer_itr::Result<()> {
    let mut config = BenchConfig::new(args.scale, args.settings, args.methods, args.seed);
    config.specs = args.specs;
    config.cv_splits = args.cv_splits;
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    if let Some(n) = args.population_size {
        config.population_size = n;
    }
    if let Some(m) = args.rwd_size {
        config.rwd_size = m;
    }
    if let Some(a) = args.alpha0 {
        config.sampling_alpha.intercept = a;
    }
    if let Some(s) = args.alpha1 {
        config.sampling_alpha.slopes = s;
    }
    let results = run_benchmark(&config)?;
    emit_report(&results, &args.out)?;
    for c in &results.cells {
        println!(
            "{:<4} {:<13} {:<9} mean value MSE {:.4e} (se {:.2e}, failures {})",
            c.setting.as_str(),
            c.spec.as_str(),
            c.method.as_str(),
            c.mean_value_mse,
            c.se_value_mse,
            c.failures
        );
    }
    results.check_failures()
}

/// Append `--key value` for each config entry whose flag is not already on
/// the command line.
fn merge_config(mut argv: Vec<String>) -> Result<Vec<String>, String> {
    let Some(pos) = argv
        .iter()
        .position(|a| a == "--config" || a.starts_with("--config="))
    else {
        return Ok(argv);
    };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => {
            let p = p.to_string();
            argv.remove(pos);
            p
        }
        None => {
            if pos + 1 >= argv.len() {
                return Err("--config needs a file path".into());
            }
            let p = argv.remove(pos + 1);
            argv.remove(pos);
            p
        }
    };
    let text = fs::read_to_string(&path).map_err(|e| format!("{path}: {e}"))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{path}:{}: expected `key = value`", lineno + 1))?;
        let flag = format!("--{}", key.trim().trim_start_matches("--"));
        let value = value.trim();
        let given = argv
            .iter()
            .any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if given {
            continue;
        }
        match value {
            "true" => argv.push(flag),
            "false" => {}
            v => argv.push(format!("{flag}={v}")),
        }
    }
    Ok(argv)
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Input => 3,
        ErrorCategory::Infeasible => 4,
        ErrorCategory::Numerical => 5,
        ErrorCategory::Io => 6,
    }
}

fn main() -> ExitCode {
    let argv = match merge_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let precheck = match &cli.command {
        Command::Weights(a) => a.weights.require_n(),
        Command::Fit(a) => a.weights.require_n(),
        Command::Evaluate(a) => a.weights.require_n(),
        _ => Ok(()),
    };
    if let Err(e) = precheck {
        e.exit();
    }

    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Weights(a) => weights(a),
        Command::Fit(a) => fit(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Cv(a) => cv(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let tag = match e.category() {
                ErrorCategory::Input => "input",
                ErrorCategory::Infeasible => "infeasible",
                ErrorCategory::Numerical => "numerical",
                ErrorCategory::Io => "io",
            };
            eprintln!("error[{tag}]: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
