//! Command-line front end.
//!
//! Exit codes: 0 success, 2 bad input or usage, 3 fit or computation
//! failure, 4 a theory check did not hold.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_list, parse_range, Config, ConfigError};
use crate::data::{fmt17, Dataset};
use crate::estimator::{nile_fit, ModelArtifact, NileOptions};
use crate::experiments::{run_experiment, ExperimentConfig, Method};
use crate::ivtests::TestKind;
use crate::scm::{AlphaConfig, Intervention, Scm};
use crate::theory::{run_suite, write_rows_csv, SuiteConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_FIT: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "nile", version, about = "Nonlinear IV regression with linear extrapolation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the estimator to a CSV with columns x,y,a.
    Fit(FitArgs),
    /// Evaluate a saved model on a grid or on given points.
    Predict(PredictArgs),
    /// Draw a dataset from a random structural model.
    Simulate(SimulateArgs),
    /// Run the worst-case risk experiment.
    Experiment(ExperimentArgs),
    /// Run the theory consistency suite.
    CheckTheory(CheckTheoryArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct EstimatorFlags {
    /// Number of spline basis functions.
    #[arg(long)]
    pub k: Option<usize>,
    /// Test level.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Test statistic: t1 or t2.
    #[arg(long)]
    pub test: Option<TestKind>,
    #[arg(long)]
    pub lambda_cap: Option<f64>,
}

impl EstimatorFlags {
    fn apply(&self, o: &mut NileOptions) {
        if let Some(k) = self.k {
            o.k = k;
        }
        if let Some(a) = self.alpha {
            o.alpha = a;
        }
        if let Some(t) = self.test {
            o.test_kind = t;
        }
        if let Some(c) = self.lambda_cap {
            o.lambda_cap = c;
        }
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Input CSV.
    pub data: PathBuf,
    #[command(flatten)]
    pub est: EstimatorFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the model JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Model JSON written by `fit`.
    pub model: PathBuf,
    /// Evaluation grid as lo:hi:step.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "x")]
    pub grid: Option<String>,
    /// Comma-separated evaluation points.
    #[arg(long, allow_hyphen_values = true)]
    pub x: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Optional key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub est: EstimatorFlags,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for risks.csv and summary.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CheckTheoryArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Scenario CSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(m: impl std::fmt::Display) -> Self {
        Self { code: EXIT_INPUT, message: m.to_string() }
    }
    fn fit(m: impl std::fmt::Display) -> Self {
        Self { code: EXIT_FIT, message: m.to_string() }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::input(e)
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    match dispatch(cli.command, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match cmd {
        Command::Fit(a) => cmd_fit(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Experiment(a) => cmd_experiment(a, out),
        Command::CheckTheory(a) => cmd_check_theory(a, out),
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn read_config(path: Option<&Path>, keys: &[&str]) -> Result<Config, CliError> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            Config::parse(&text, keys).map_err(|e| CliError::input(format!("{}: {e}", p.display())))
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::input(e)
}

fn cmd_fit(a: FitArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let data = Dataset::read_csv(open(&a.data)?).map_err(CliError::input)?;
    let mut opts = NileOptions::default();
    a.est.apply(&mut opts);
    if let Some(s) = a.seed {
        opts.seed = s;
    }
    opts.validate().map_err(CliError::input)?;
    let fit = nile_fit(&data, &opts).map_err(CliError::fit)?;
    let r = &fit.final_test_report;
    writeln!(out, "k            {}", fit.basis_b.k()).map_err(io_err)?;
    writeln!(out, "gamma        {}", fmt17(fit.gamma)).map_err(io_err)?;
    writeln!(out, "delta        {}", fmt17(fit.delta)).map_err(io_err)?;
    writeln!(out, "lambda_star  {}", fmt17(fit.lambda_star)).map_err(io_err)?;
    writeln!(out, "fallback     {}", fit.fallback_used).map_err(io_err)?;
    writeln!(
        out,
        "test         {} statistic {} threshold {} reject {}",
        r.kind,
        fmt17(r.statistic),
        fmt17(r.threshold),
        r.reject
    )
    .map_err(io_err)?;
    if let Some(path) = a.out {
        let json = ModelArtifact::from(&fit).to_json();
        std::fs::write(&path, json).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    }
    Ok(EXIT_OK)
}

fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let text = std::fs::read_to_string(&a.model)
        .map_err(|e| CliError::input(format!("{}: {e}", a.model.display())))?;
    let model = ModelArtifact::from_json(&text).map_err(CliError::input)?;
    let xs: Vec<f64> = match (&a.grid, &a.x) {
        (Some(g), _) => parse_range("grid", g)?,
        (None, Some(x)) => parse_list("x", x)?,
        (None, None) => return Err(CliError::input("one of --grid or --x is required")),
    };
    if let Some(bad) = xs.iter().find(|v| !v.is_finite()) {
        return Err(CliError::input(format!("non-finite evaluation point {bad}")));
    }
    let write = |w: &mut dyn Write| -> std::io::Result<()> {
        writeln!(w, "x,fhat")?;
        for &x in &xs {
            writeln!(w, "{},{}", fmt17(x), fmt17(model.predict(x)))?;
        }
        w.flush()
    };
    match a.out {
        Some(p) => write(&mut create(&p)?).map_err(io_err)?,
        None => write(out).map_err(io_err)?,
    }
    Ok(EXIT_OK)
}

const SIMULATE_KEYS: &[&str] = &[
    "alpha_a",
    "alpha_h",
    "alpha_eps",
    "n",
    "kappa",
    "seed",
    "intervention",
    "intervention_value",
    "include_latent",
];

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = read_config(a.config.as_deref(), SIMULATE_KEYS)?;
    let d = AlphaConfig::defaults()[1];
    let (mut aa, mut ah, mut ae) = (d.alpha_a, d.alpha_h, d.alpha_eps);
    cfg.set("alpha_a", &mut aa)?;
    cfg.set("alpha_h", &mut ah)?;
    cfg.set("alpha_eps", &mut ae)?;
    let alpha = AlphaConfig::new(aa, ah, ae).map_err(CliError::input)?;
    let mut n = 200usize;
    let mut kappa = 0.0f64;
    let mut seed = 0u64;
    let mut latent = false;
    let mut value = 0.0f64;
    cfg.set("n", &mut n)?;
    cfg.set("kappa", &mut kappa)?;
    cfg.set("seed", &mut seed)?;
    cfg.set("include_latent", &mut latent)?;
    cfg.set("intervention_value", &mut value)?;
    if let Some(s) = a.seed {
        seed = s;
    }
    let kind = cfg.raw("intervention").unwrap_or("none").to_ascii_lowercase();
    let intervention = match kind.as_str() {
        "none" => Intervention::None,
        "hard_on_x" => Intervention::HardOnX(value),
        "shift_on_x" => Intervention::ShiftOnX(value),
        "hard_on_a" => Intervention::HardOnA(value),
        "confounding_scale" => Intervention::ConfoundingScale(value),
        other => {
            return Err(CliError::input(format!(
                "unknown intervention `{other}` (none, hard_on_x, shift_on_x, hard_on_a, confounding_scale)"
            )))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scm = Scm::random(alpha, kappa, &mut rng).map_err(CliError::input)?;
    let data = scm.sample(n, intervention, latent, &mut rng).map_err(CliError::input)?;
    match a.out {
        Some(p) => data.write_csv(create(&p)?).map_err(CliError::input)?,
        None => data.write_csv(out).map_err(CliError::input)?,
    }
    Ok(EXIT_OK)
}

const EXPERIMENT_KEYS: &[&str] = &[
    "alphas",
    "n",
    "n_models",
    "strengths",
    "eval_grid_points",
    "methods",
    "kappa",
    "seed",
    "k",
    "alpha",
    "test",
    "lambda_cap",
    "cv_folds",
];

/// `a,h,e; a,h,e; ...`
fn parse_alphas(value: &str) -> Result<Vec<AlphaConfig>, CliError> {
    value
        .split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|triple| {
            let v: Vec<f64> = parse_list("alphas", triple)?;
            match v[..] {
                [a, h, e] => AlphaConfig::new(a, h, e).map_err(CliError::input),
                _ => Err(CliError::input(format!("alphas: `{triple}` is not a triple"))),
            }
        })
        .collect()
}

pub fn experiment_config(cfg: &Config) -> Result<ExperimentConfig, CliError> {
    let mut e = ExperimentConfig::default();
    if let Some(v) = cfg.raw("alphas") {
        e.alphas = parse_alphas(v)?;
    }
    cfg.set("n", &mut e.n)?;
    cfg.set("n_models", &mut e.n_models)?;
    if let Some(v) = cfg.raw("strengths") {
        e.strengths = if v.contains(':') {
            parse_range("strengths", v)?
        } else {
            parse_list("strengths", v)?
        };
    }
    cfg.set("eval_grid_points", &mut e.eval_grid_points)?;
    if let Some(m) = cfg.list::<Method>("methods")? {
        e.methods = m;
    }
    cfg.set("kappa", &mut e.kappa)?;
    cfg.set("seed", &mut e.master_seed)?;
    cfg.set("k", &mut e.nile.k)?;
    cfg.set("alpha", &mut e.nile.alpha)?;
    cfg.set("test", &mut e.nile.test_kind)?;
    cfg.set("lambda_cap", &mut e.nile.lambda_cap)?;
    cfg.set("cv_folds", &mut e.nile.cv_folds)?;
    Ok(e)
}

fn cmd_experiment(a: ExperimentArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = read_config(a.config.as_deref(), EXPERIMENT_KEYS)?;
    let mut e = experiment_config(&cfg)?;
    a.est.apply(&mut e.nile);
    if let Some(s) = a.seed {
        e.master_seed = s;
    }
    e.validate().map_err(CliError::input)?;
    let result = run_experiment(&e).map_err(CliError::fit)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::input(format!("{}: {e}", a.out.display())))?;
    let rows = a.out.join("risks.csv");
    let summary = a.out.join("summary.csv");
    let mut w = create(&rows)?;
    result.write_rows_csv(&mut w).and_then(|_| w.flush()).map_err(io_err)?;
    let mut w = create(&summary)?;
    result.write_summary_csv(&mut w).and_then(|_| w.flush()).map_err(io_err)?;
    writeln!(
        out,
        "{} fits, {} failed; wrote {} and {}",
        result.rows.len(),
        result.failures,
        rows.display(),
        summary.display()
    )
    .map_err(io_err)?;
    Ok(EXIT_OK)
}

const THEORY_KEYS: &[&str] = &["seed", "mc_draws", "random_scenarios"];

fn cmd_check_theory(a: CheckTheoryArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let cfg = read_config(a.config.as_deref(), THEORY_KEYS)?;
    let mut s = SuiteConfig::default();
    cfg.set("seed", &mut s.seed)?;
    cfg.set("mc_draws", &mut s.mc_draws)?;
    cfg.set("random_scenarios", &mut s.random_scenarios)?;
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if s.mc_draws == 0 {
        return Err(CliError::input("mc_draws must be positive"));
    }
    let rows = run_suite(&s).map_err(CliError::fit)?;
    match &a.out {
        Some(p) => {
            let mut w = create(p)?;
            write_rows_csv(&rows, &mut w).and_then(|_| w.flush()).map_err(io_err)?;
        }
        None => write_rows_csv(&rows, &mut *out).map_err(io_err)?,
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.scenario.as_str()).collect();
    if failed.is_empty() {
        eprintln!("all {} checks passed", rows.len());
        Ok(EXIT_OK)
    } else {
        eprintln!("{} of {} checks failed: {}", failed.len(), rows.len(), failed.join(", "));
        Ok(EXIT_CHECK)
    }
}
