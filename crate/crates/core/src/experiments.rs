//! Worst-case risk curves of NILE and the OLS-spline baseline across
//! intervention strengths.
//!
//! For strength `x` the intervention class is all hard interventions
//! setting X to a value in `[-x, x]`; the risk of `f̂` on model `f` is
//! `E[ξ²] + sup_{|t| ≤ x} (f(t) − f̂(t))²`, the supremum taken on a grid.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::data::fmt17;
use crate::estimator::{nile_fit, NileError, NileOptions};
use crate::scm::{AlphaConfig, Intervention, Scm, ScmError, XI_SECOND_MOMENT};

#[derive(Error, Debug)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),

    #[error("{failed} of {total} fits failed (more than 10%); first error: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: NileError,
    },

    #[error(transparent)]
    Scm(#[from] ScmError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Method {
    #[serde(rename = "NILE")]
    Nile,
    #[serde(rename = "OLS_SPLINE")]
    OlsSpline,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Nile => "NILE",
            Method::OlsSpline => "OLS_SPLINE",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NILE" => Ok(Method::Nile),
            "OLS_SPLINE" | "OLS" => Ok(Method::OlsSpline),
            other => Err(format!("unknown method `{other}` (expected NILE or OLS_SPLINE)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub alphas: Vec<AlphaConfig>,
    pub n: usize,
    pub n_models: usize,
    pub strengths: Vec<f64>,
    pub eval_grid_points: usize,
    pub methods: Vec<Method>,
    pub kappa: f64,
    pub master_seed: u64,
    /// Estimator settings; `seed` and `fixed_lambda` are set per fit.
    pub nile: NileOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alphas: AlphaConfig::defaults().to_vec(),
            n: 200,
            n_models: 100,
            strengths: default_strengths(),
            eval_grid_points: 1001,
            methods: vec![Method::Nile, Method::OlsSpline],
            kappa: 0.0,
            master_seed: 0,
            nile: NileOptions::default(),
        }
    }
}

/// 0 to 2 in steps of 0.1.
pub fn default_strengths() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 10.0).collect()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::InvalidConfig(m));
        if self.alphas.is_empty() {
            return bad("at least one alpha configuration is required".into());
        }
        for a in &self.alphas {
            AlphaConfig::new(a.alpha_a, a.alpha_h, a.alpha_eps)?;
        }
        if self.n_models == 0 {
            return bad("n_models must be at least 1".into());
        }
        if self.strengths.is_empty() || self.strengths.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("strengths must be a nonempty list of nonnegative numbers".into());
        }
        if self.eval_grid_points < 3 || self.eval_grid_points % 2 == 0 {
            return bad(format!(
                "eval_grid_points must be odd and at least 3, got {}",
                self.eval_grid_points
            ));
        }
        if self.methods.is_empty() {
            return bad("at least one method is required".into());
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be nonnegative, got {}", self.kappa));
        }
        self.nile
            .validate()
            .map_err(|e| ExperimentError::InvalidConfig(e.to_string()))
    }
}

/// `noise_var + max over an evenly spaced grid on [-x_max, x_max] of
/// (f_true − f_hat)²`.
pub fn worst_case_risk(
    f_hat: impl Fn(f64) -> f64,
    f_true: impl Fn(f64) -> f64,
    x_max: f64,
    grid_points: usize,
    noise_var: f64,
) -> f64 {
    let sup = (0..grid_points)
        .map(|j| {
            let t = if grid_points == 1 {
                0.0
            } else {
                -x_max + 2.0 * x_max * j as f64 / (grid_points - 1) as f64
            };
            let d = f_true(t) - f_hat(t);
            d * d
        })
        .fold(0.0, f64::max);
    noise_var + sup
}

/// One cell of the full table; `risk` is `None` when the fit failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskRow {
    pub config_id: usize,
    pub method: Method,
    pub model_idx: usize,
    pub strength: f64,
    pub risk: Option<f64>,
    pub lambda_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCurve {
    pub config_id: usize,
    pub method: Method,
    pub strength: f64,
    /// Mean over models whose fit succeeded.
    pub mean_risk: f64,
    pub per_model_risks: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rows: Vec<RiskRow>,
    pub curves: Vec<RiskCurve>,
    /// Mean finite λ⋆ of NILE per configuration (`None` if NILE was not run).
    pub mean_lambda: Vec<Option<f64>>,
    pub failures: usize,
}

/// Seed for model `model_idx` of configuration `config_id`; independent of
/// how many models or configurations are run.
pub fn model_seed(master_seed: u64, config_id: usize, model_idx: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((config_id as u64) << 32) | model_idx as u64);
    rng
}

struct ModelOutcome {
    // Per method: risks by strength, or the fit error.
    per_method: Vec<Result<(Vec<f64>, f64), NileError>>,
}

fn run_model(cfg: &ExperimentConfig, config_id: usize, model_idx: usize) -> Result<ModelOutcome, ExperimentError> {
    let mut rng = model_seed(cfg.master_seed, config_id, model_idx);
    let scm = Scm::random(cfg.alphas[config_id], cfg.kappa, &mut rng)?;
    let data = scm.sample(cfg.n, Intervention::None, false, &mut rng)?;
    let fit_seed = cfg.master_seed ^ (((config_id as u64) << 32) | model_idx as u64).rotate_left(17);

    let per_method = cfg
        .methods
        .iter()
        .map(|m| {
            let opts = NileOptions {
                seed: fit_seed,
                fixed_lambda: match m {
                    Method::Nile => None,
                    Method::OlsSpline => Some(0.0),
                },
                ..cfg.nile.clone()
            };
            let fit = nile_fit(&data, &opts)?;
            let mut running = f64::NEG_INFINITY;
            let risks = cfg
                .strengths
                .iter()
                .map(|&x| {
                    let r = worst_case_risk(|t| fit.predict(t), |t| scm.f.eval(t), x, cfg.eval_grid_points, XI_SECOND_MOMENT);
                    // Grids for different strengths are not nested, so take
                    // the running max; each value is still a lower bound on
                    // the true supremum.
                    running = running.max(r);
                    running
                })
                .collect();
            Ok((risks, fit.lambda_star))
        })
        .collect();
    Ok(ModelOutcome { per_method })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, ExperimentError> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.alphas.len())
        .flat_map(|c| (0..cfg.n_models).map(move |m| (c, m)))
        .collect();
    let outcomes: Vec<ModelOutcome> = jobs
        .par_iter()
        .map(|&(c, m)| run_model(cfg, c, m))
        .collect::<Result<_, _>>()?;

    let total = jobs.len() * cfg.methods.len();
    let mut failures = 0;
    let mut first_error = None;
    let mut rows = Vec::with_capacity(total * cfg.strengths.len());
    for (&(c, m), outcome) in jobs.iter().zip(&outcomes) {
        for (method, res) in cfg.methods.iter().zip(&outcome.per_method) {
            match res {
                Ok((risks, lambda)) => {
                    for (&s, &r) in cfg.strengths.iter().zip(risks) {
                        rows.push(RiskRow {
                            config_id: c,
                            method: *method,
                            model_idx: m,
                            strength: s,
                            risk: Some(r),
                            lambda_star: Some(*lambda),
                        });
                    }
                }
                Err(e) => {
                    failures += 1;
                    first_error.get_or_insert_with(|| e.clone());
                    for &s in &cfg.strengths {
                        rows.push(RiskRow {
                            config_id: c,
                            method: *method,
                            model_idx: m,
                            strength: s,
                            risk: None,
                            lambda_star: None,
                        });
                    }
                }
            }
        }
    }
    if failures * 10 > total {
        return Err(ExperimentError::TooManyFailures {
            failed: failures,
            total,
            first: first_error.expect("failures > 0"),
        });
    }

    let mut curves = Vec::new();
    for c in 0..cfg.alphas.len() {
        for (mi, method) in cfg.methods.iter().enumerate() {
            for (si, &s) in cfg.strengths.iter().enumerate() {
                let per_model: Vec<Option<f64>> = (0..cfg.n_models)
                    .map(|m| match &outcomes[c * cfg.n_models + m].per_method[mi] {
                        Ok((risks, _)) => Some(risks[si]),
                        Err(_) => None,
                    })
                    .collect();
                curves.push(RiskCurve {
                    config_id: c,
                    method: *method,
                    strength: s,
                    mean_risk: mean(per_model.iter().flatten().copied()),
                    per_model_risks: per_model,
                });
            }
        }
    }

    let mean_lambda = (0..cfg.alphas.len())
        .map(|c| {
            let mi = cfg.methods.iter().position(|m| *m == Method::Nile)?;
            let lambdas = (0..cfg.n_models).filter_map(|m| match &outcomes[c * cfg.n_models + m].per_method[mi] {
                Ok((_, l)) if l.is_finite() => Some(*l),
                _ => None,
            });
            Some(mean(lambdas))
        })
        .collect();

    Ok(ExperimentResult { rows, curves, mean_lambda, failures })
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_value).unwrap_or_default()
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        fmt17(v)
    }
}

impl ExperimentResult {
    /// Full table; failed fits leave `risk` and `lambda_star` empty.
    pub fn write_rows_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "config_id,method,model_idx,strength,risk,lambda_star")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.config_id,
                r.method.name(),
                r.model_idx,
                fmt17(r.strength),
                opt(r.risk),
                opt(r.lambda_star)
            )?;
        }
        Ok(())
    }

    /// Mean risk per configuration, method and strength.
    pub fn write_summary_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "config_id,method,strength,mean_risk,n_ok,mean_lambda_star")?;
        for c in &self.curves {
            let lambda = match c.method {
                Method::Nile => self.mean_lambda[c.config_id].map(fmt_value).unwrap_or_default(),
                Method::OlsSpline => fmt17(0.0),
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                c.config_id,
                c.method.name(),
                fmt17(c.strength),
                fmt_value(c.mean_risk),
                c.per_model_risks.iter().flatten().count(),
                lambda
            )?;
        }
        Ok(())
    }

    pub fn curve(&self, config_id: usize, method: Method) -> Vec<&RiskCurve> {
        self.curves
            .iter()
            .filter(|c| c.config_id == config_id && c.method == method)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::CausalFunction;

    #[test]
    fn risk_of_truth_is_noise() {
        assert_eq!(worst_case_risk(f64::sin, f64::sin, 2.0, 1001, 0.5), 0.5);
    }

    #[test]
    fn identity_gap() {
        assert_eq!(worst_case_risk(|_| 0.0, |x| x, 2.0, 1001, 0.0), 4.0);
    }

    #[test]
    fn grid_refinement_oracle() {
        let alpha = AlphaConfig::defaults()[1];
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = CausalFunction::random(&alpha, 1.0, &mut rng).unwrap();
            let g = CausalFunction::random(&alpha, 1.0, &mut rng).unwrap();
            let coarse = worst_case_risk(|t| g.eval(t), |t| f.eval(t), 2.0, 1001, 0.0);
            let fine = worst_case_risk(|t| g.eval(t), |t| f.eval(t), 2.0, 10_001, 0.0);
            assert!(coarse <= fine * (1.0 + 1e-12));
            assert!((fine - coarse) <= 0.01 * fine, "seed {seed}: {coarse} vs {fine}");
        }
    }

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n: 100,
            n_models: 4,
            strengths: vec![0.0, 0.5, 1.0, 2.0],
            eval_grid_points: 201,
            nile: NileOptions { k: 12, ..NileOptions::default() },
            master_seed: 7,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn curves_are_monotone_and_reproducible() {
        let cfg = tiny();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.failures, 0);
        assert_eq!(a.rows.len(), 3 * 4 * 2 * 4);
        for c in 0..3 {
            for m in [Method::Nile, Method::OlsSpline] {
                let curve = a.curve(c, m);
                assert_eq!(curve.len(), 4);
                for w in curve.windows(2) {
                    assert!(w[1].mean_risk >= w[0].mean_risk);
                }
                assert!(curve.iter().all(|p| p.mean_risk >= XI_SECOND_MOMENT));
            }
        }
        let mut buf = Vec::new();
        a.write_summary_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3 * 2 * 4);
    }

    #[test]
    fn adding_models_keeps_earlier_ones() {
        let cfg = tiny();
        let more = ExperimentConfig { n_models: 6, ..tiny() };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&more).unwrap();
        for r in &a.rows {
            assert!(b.rows.contains(r));
        }
    }

    #[test]
    fn seed_changes_risks_not_schema() {
        let a = run_experiment(&tiny()).unwrap();
        let b = run_experiment(&ExperimentConfig { master_seed: 8, ..tiny() }).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        assert_ne!(a.rows, b.rows);
    }

    #[test]
    fn too_many_failures_abort() {
        // n below the estimator minimum makes every fit fail.
        let cfg = ExperimentConfig { n: 10, ..tiny() };
        assert!(matches!(run_experiment(&cfg), Err(ExperimentError::TooManyFailures { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        assert!(ExperimentConfig { eval_grid_points: 1000, ..tiny() }.validate().is_err());
        assert!(ExperimentConfig { n_models: 0, ..tiny() }.validate().is_err());
        assert!("ols".parse::<Method>().is_ok());
        assert!("npregiv".parse::<Method>().is_err());
    }
}
