//! The NILE estimator.
//!
//! For fixed penalties the coefficients minimize
//!
//! ```text
//! ‖Y − Bθ‖² + λ ‖P_δ (Y − Bθ)‖² + γ θᵀKθ
//! ```
//!
//! whose normal equations carry `P_δ²` because the hat matrix of a penalized
//! regression is symmetric but not idempotent. `λ` is the smallest value at
//! which the orthogonality test accepts; it is found by doubling from 1 and
//! then bisecting. After the search the curvature weight is inflated by
//! `1 + λ⋆` and the coefficients are solved once more.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::ivtests::{IvTest, TestError, TestKind, TestReport};
use crate::penreg::{self, cholesky_or_condition, CvConfig, HatSpec, PenRegError, Smoother};
use crate::splines::{PenaltyMatrix, SplineBasis, SplineError};

/// Smallest sample size that supports 10-fold cross-validation.
pub const MIN_OBSERVATIONS: usize = 20;

/// Curvature weight used by the TSLS-limit fallback, relative to the
/// cross-validated value.
pub const FALLBACK_GAMMA_FACTOR: f64 = 1e-3;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum NileError {
    #[error("need at least {required} observations, got {found}")]
    TooFewObservations { required: usize, found: usize },

    #[error("column `{0}` is constant; cannot build a spline basis on it")]
    DegenerateColumn(&'static str),

    #[error("column `{column}` has {found} distinct values, fewer than k = {k}")]
    TooFewDistinct {
        column: &'static str,
        found: usize,
        k: usize,
    },

    #[error("column `{0}` contains non-finite values")]
    NonFinite(&'static str),

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error(transparent)]
    Spline(#[from] SplineError),

    #[error(transparent)]
    PenReg(#[from] PenRegError),

    #[error(transparent)]
    Test(#[from] TestError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NileOptions {
    pub k: usize,
    pub alpha: f64,
    pub test_kind: TestKind,
    pub lambda_cap: f64,
    /// Relative width at which bisection stops.
    pub binary_search_tol: f64,
    pub cv_grid: Vec<f64>,
    pub cv_folds: usize,
    pub seed: u64,
    /// Skip the search and use this λ (`Some(0.0)` is the OLS-spline fit).
    pub fixed_lambda: Option<f64>,
}

impl Default for NileOptions {
    fn default() -> Self {
        Self {
            k: 50,
            alpha: 0.05,
            test_kind: TestKind::T2,
            lambda_cap: 1e6,
            binary_search_tol: 1e-3,
            cv_grid: penreg::log_grid(1e-4, 1e4, 25),
            cv_folds: 10,
            seed: 0,
            fixed_lambda: None,
        }
    }
}

impl NileOptions {
    pub fn validate(&self) -> Result<(), NileError> {
        let bad = |msg: String| Err(NileError::InvalidOption(msg));
        if self.k < 4 {
            return bad(format!("k must be at least 4, got {}", self.k));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.lambda_cap > 0.0 && self.lambda_cap.is_finite()) {
            return bad(format!("lambda_cap must be positive, got {}", self.lambda_cap));
        }
        if !(self.binary_search_tol > 0.0 && self.binary_search_tol < 0.5) {
            return bad(format!(
                "binary_search_tol must lie in (0, 0.5), got {}",
                self.binary_search_tol
            ));
        }
        if self.cv_grid.is_empty() || self.cv_grid.iter().any(|g| !(*g >= 0.0 && g.is_finite())) {
            return bad("cv_grid must be a nonempty list of nonnegative numbers".into());
        }
        if self.cv_folds < 2 {
            return bad(format!("cv_folds must be at least 2, got {}", self.cv_folds));
        }
        if let Some(l) = self.fixed_lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return bad(format!("fixed lambda must be finite and nonnegative, got {l}"));
            }
        }
        Ok(())
    }

    fn cv_config(&self) -> CvConfig {
        CvConfig {
            folds: self.cv_folds,
            grid: self.cv_grid.clone(),
            seed: self.seed,
        }
    }
}

/// Runtime checks of the rank and monotonicity conditions behind
/// consistency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Smallest singular value of `BᵀB / n`.
    pub min_sv_bb: f64,
    /// Smallest singular value of `CᵀC / n`.
    pub min_sv_cc: f64,
    /// Smallest singular value of `CᵀB / n` (identification).
    pub min_sv_cb: f64,
    pub lambda_finite: bool,
    /// Grid steps where the test statistic increased by more than 1e-8.
    pub test_monotonicity_violations: usize,
    /// Grid steps where the TSLS loss increased by more than 1e-9 (relative).
    pub tsls_monotonicity_violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NileFit {
    pub theta: Vec<f64>,
    pub basis_b: SplineBasis,
    pub basis_c: SplineBasis,
    /// Curvature weight used in the final solve.
    pub gamma: f64,
    pub delta: f64,
    /// `f64::INFINITY` when no finite λ passed the test.
    pub lambda_star: f64,
    pub fallback_used: bool,
    /// Test outcome that fixed λ⋆: the accepting evaluation found by the
    /// search, or the fallback estimate when λ⋆ is infinite.
    pub test_report_at_solution: TestReport,
    /// Test outcome at the returned coefficients (after the γ update).
    pub final_test_report: TestReport,
    pub alpha: f64,
    pub test_kind: TestKind,
    pub seed: u64,
    pub diagnostics: Diagnostics,
}

impl NileFit {
    pub fn predict(&self, x: f64) -> f64 {
        self.basis_b.eval_f_eta_unchecked(&self.theta, x)
    }
}

/// Outcome of the λ⋆ search.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSearch {
    pub lambda_star: f64,
    pub theta: DVector<f64>,
    pub report: TestReport,
    pub fallback_used: bool,
    pub evaluations: usize,
}

/// All matrices that stay fixed while λ varies.
#[derive(Debug, Clone)]
pub struct NileProblem {
    b: DMatrix<f64>,
    y: DVector<f64>,
    curvature: PenaltyMatrix,
    gamma: f64,
    btb: DMatrix<f64>,
    bty: DVector<f64>,
    pb: DMatrix<f64>,
    py: DVector<f64>,
    ptp: DMatrix<f64>,
    pty: DVector<f64>,
    test: IvTest,
    // Test smoother applied to B and y; equal to pb/py for T2.
    tb: DMatrix<f64>,
    ty: DVector<f64>,
}

impl NileProblem {
    /// `b`/`c` are the design matrices, `k_pen`/`m_pen` their curvature
    /// penalties.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: DMatrix<f64>,
        c: &DMatrix<f64>,
        y: DVector<f64>,
        k_pen: PenaltyMatrix,
        m_pen: &PenaltyMatrix,
        gamma: f64,
        delta: f64,
        test_kind: TestKind,
        alpha: f64,
    ) -> Result<Self, NileError> {
        if b.nrows() != y.len() || c.nrows() != y.len() {
            return Err(PenRegError::DimensionMismatch(format!(
                "B has {} rows, C has {} rows, y has length {}",
                b.nrows(),
                c.nrows(),
                y.len()
            ))
            .into());
        }
        let p_delta = Smoother::new(HatSpec {
            design: c,
            penalty: m_pen,
            weight: delta,
        })?;
        let pb = p_delta.apply_columns(&b);
        let py = p_delta.apply(&y);
        let test = IvTest::new(test_kind, c, m_pen, delta, alpha)?;
        let (tb, ty) = match test_kind {
            TestKind::T2 => (pb.clone(), py.clone()),
            TestKind::T1 => (test.smoother().apply_columns(&b), test.smoother().apply(&y)),
        };
        Ok(Self {
            btb: b.tr_mul(&b),
            bty: b.tr_mul(&y),
            ptp: pb.tr_mul(&pb),
            pty: pb.tr_mul(&py),
            b,
            y,
            curvature: k_pen,
            gamma,
            pb,
            py,
            test,
            tb,
            ty,
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn test(&self) -> &IvTest {
        &self.test
    }

    /// Coefficients at `(λ, γ)`.
    pub fn fit_theta(&self, lambda: f64, gamma: f64) -> Result<DVector<f64>, NileError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(NileError::InvalidOption(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(PenRegError::InvalidWeight(gamma).into());
        }
        let normal = &self.btb + &self.ptp * lambda + self.curvature.matrix() * gamma;
        let rhs = &self.bty + &self.pty * lambda;
        Ok(solve_jittered(normal, &self.btb, &rhs)?)
    }

    /// Minimizer of `‖P_δ(Y − Bθ)‖² + γ θᵀKθ`.
    pub fn fit_tsls(&self, gamma: f64) -> Result<DVector<f64>, NileError> {
        let normal = &self.ptp + self.curvature.matrix() * gamma;
        Ok(solve_jittered(normal, &self.ptp, &self.pty)?)
    }

    /// `‖P_δ(Y − Bθ)‖²`.
    pub fn tsls_loss(&self, theta: &DVector<f64>) -> f64 {
        (&self.py - &self.pb * theta).norm_squared()
    }

    /// Test at θ. A residual that is exactly zero satisfies the hypothesis
    /// and is reported as statistic 0.
    pub fn test_at(&self, theta: &DVector<f64>) -> Result<TestReport, NileError> {
        let residual = &self.y - &self.b * theta;
        if residual.norm_squared() == 0.0 {
            return Ok(TestReport {
                statistic: 0.0,
                threshold: self.test.threshold(),
                reject: false,
                alpha: self.test.alpha(),
                kind: self.test.kind(),
            });
        }
        let smoothed = &self.ty - &self.tb * theta;
        Ok(self.test.report(&residual, &smoothed)?)
    }

    /// Monotonicity of the test statistic and the TSLS loss along `lambdas`.
    pub fn monotonicity_violations(&self, lambdas: &[f64]) -> Result<(usize, usize), NileError> {
        let mut test_viol = 0;
        let mut tsls_viol = 0;
        let mut prev: Option<(f64, f64)> = None;
        for &l in lambdas {
            let theta = self.fit_theta(l, self.gamma)?;
            let stat = self.test_at(&theta)?.statistic;
            let loss = self.tsls_loss(&theta);
            if let Some((ps, pl)) = prev {
                if stat > ps + 1e-8 * ps.abs().max(1.0) {
                    test_viol += 1;
                }
                if loss > pl + 1e-9 * pl.abs().max(f64::MIN_POSITIVE) {
                    tsls_viol += 1;
                }
            }
            prev = Some((stat, loss));
        }
        Ok((test_viol, tsls_viol))
    }
}

fn solve_jittered(
    mut normal: DMatrix<f64>,
    scale_from: &DMatrix<f64>,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>, PenRegError> {
    let k = normal.nrows();
    let jitter = penreg::RIDGE_JITTER * scale_from.trace() / k as f64;
    for i in 0..k {
        normal[(i, i)] += jitter;
    }
    Ok(cholesky_or_condition(normal)?.solve(rhs))
}

/// Closed-form coefficients for one `(λ, γ, δ)`.
#[allow(clippy::too_many_arguments)]
pub fn fit_theta(
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    gamma: f64,
    delta: f64,
    k_pen: &PenaltyMatrix,
    m_pen: &PenaltyMatrix,
) -> Result<DVector<f64>, NileError> {
    let problem = NileProblem::new(
        b.clone(),
        c,
        y.clone(),
        k_pen.clone(),
        m_pen,
        gamma,
        delta,
        TestKind::T2,
        0.05,
    )?;
    problem.fit_theta(lambda, gamma)
}

/// Smallest λ whose estimate is accepted by the test.
pub fn lambda_search(problem: &NileProblem, options: &NileOptions) -> Result<LambdaSearch, NileError> {
    lambda_search_with(problem, options, |theta| problem.test_at(theta))
}

/// [`lambda_search`] with a caller-supplied test.
pub fn lambda_search_with<F>(
    problem: &NileProblem,
    options: &NileOptions,
    mut test: F,
) -> Result<LambdaSearch, NileError>
where
    F: FnMut(&DVector<f64>) -> Result<TestReport, NileError>,
{
    let gamma = problem.gamma();
    let mut evaluations = 0;
    let mut eval = |lambda: f64| -> Result<(DVector<f64>, TestReport), NileError> {
        evaluations += 1;
        let theta = problem.fit_theta(lambda, gamma)?;
        let report = test(&theta)?;
        Ok((theta, report))
    };

    let (theta0, report0) = eval(0.0)?;
    if !report0.reject {
        return Ok(LambdaSearch {
            lambda_star: 0.0,
            theta: theta0,
            report: report0,
            fallback_used: false,
            evaluations,
        });
    }

    let mut lo = 0.0;
    let mut hi = 1.0f64.min(options.lambda_cap);
    let mut accepted = loop {
        let (theta, report) = eval(hi)?;
        if !report.reject {
            break (theta, report);
        }
        if hi >= options.lambda_cap {
            let theta = problem.fit_tsls(gamma * FALLBACK_GAMMA_FACTOR)?;
            let report = test(&theta)?;
            return Ok(LambdaSearch {
                lambda_star: f64::INFINITY,
                theta,
                report,
                fallback_used: true,
                evaluations,
            });
        }
        lo = hi;
        hi = (hi * 2.0).min(options.lambda_cap);
    };

    while hi - lo > options.binary_search_tol * hi {
        let mid = 0.5 * (lo + hi);
        let (theta, report) = eval(mid)?;
        if report.reject {
            lo = mid;
        } else {
            hi = mid;
            accepted = (theta, report);
        }
    }
    Ok(LambdaSearch {
        lambda_star: hi,
        theta: accepted.0,
        report: accepted.1,
        fallback_used: false,
        evaluations,
    })
}

fn check_column(name: &'static str, values: &[f64], k: usize) -> Result<(f64, f64), NileError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NileError::NonFinite(name));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo >= hi {
        return Err(NileError::DegenerateColumn(name));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() < k {
        return Err(NileError::TooFewDistinct {
            column: name,
            found: sorted.len(),
            k,
        });
    }
    Ok((lo, hi))
}

fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn diagnostics_grid(lambda_star: f64) -> Vec<f64> {
    let top = if lambda_star.is_finite() && lambda_star > 0.0 {
        (4.0 * lambda_star).max(1.0)
    } else {
        100.0
    };
    std::iter::once(0.0)
        .chain(penreg::log_grid(top * 1e-4, top, 19))
        .collect()
}

/// Fit NILE end to end on `(X, Y, A)`.
pub fn nile_fit(data: &Dataset, options: &NileOptions) -> Result<NileFit, NileError> {
    options.validate()?;
    let n = data.len();
    let required = MIN_OBSERVATIONS.max(options.cv_folds);
    if n < required {
        return Err(NileError::TooFewObservations { required, found: n });
    }
    if data.y.iter().any(|v| !v.is_finite()) {
        return Err(NileError::NonFinite("y"));
    }
    let (xa, xb) = check_column("x", &data.x, options.k)?;
    let (aa, ab) = check_column("a", &data.a, options.k)?;

    let basis_b = SplineBasis::cubic(xa, xb, options.k)?;
    let basis_c = SplineBasis::cubic(aa, ab, options.k)?;
    let b = basis_b.design_matrix(&data.x, 0)?;
    let c = basis_c.design_matrix(&data.a, 0)?;
    let k_pen = basis_b.curvature_penalty();
    let m_pen = basis_c.curvature_penalty();
    let y = DVector::from_column_slice(&data.y);

    let cv = options.cv_config();
    let delta = penreg::cv_penalty(&c, &m_pen, &y, &cv)?;
    let gamma_cv = penreg::cv_penalty(&b, &k_pen, &y, &cv)?;

    let inv_n = 1.0 / n as f64;
    let (min_sv_bb, min_sv_cc, min_sv_cb) = (
        min_singular_value(&(b.tr_mul(&b) * inv_n)),
        min_singular_value(&(c.tr_mul(&c) * inv_n)),
        min_singular_value(&(c.tr_mul(&b) * inv_n)),
    );

    let problem = NileProblem::new(
        b,
        &c,
        y,
        k_pen,
        &m_pen,
        gamma_cv,
        delta,
        options.test_kind,
        options.alpha,
    )?;

    let search = match options.fixed_lambda {
        Some(lambda) => {
            let theta = problem.fit_theta(lambda, gamma_cv)?;
            let report = problem.test_at(&theta)?;
            LambdaSearch {
                lambda_star: lambda,
                theta,
                report,
                fallback_used: false,
                evaluations: 1,
            }
        }
        None => lambda_search(&problem, options)?,
    };

    let (theta, gamma) = if search.fallback_used {
        (search.theta.clone(), gamma_cv * FALLBACK_GAMMA_FACTOR)
    } else {
        let gamma = (1.0 + search.lambda_star) * gamma_cv;
        (problem.fit_theta(search.lambda_star, gamma)?, gamma)
    };
    let final_test_report = problem.test_at(&theta)?;

    let (test_viol, tsls_viol) = problem.monotonicity_violations(&diagnostics_grid(search.lambda_star))?;

    Ok(NileFit {
        theta: theta.iter().copied().collect(),
        basis_b,
        basis_c,
        gamma,
        delta,
        lambda_star: search.lambda_star,
        fallback_used: search.fallback_used,
        test_report_at_solution: search.report,
        final_test_report,
        alpha: options.alpha,
        test_kind: options.test_kind,
        seed: options.seed,
        diagnostics: Diagnostics {
            min_sv_bb,
            min_sv_cc,
            min_sv_cb,
            lambda_finite: !search.fallback_used,
            test_monotonicity_violations: test_viol,
            tsls_monotonicity_violations: tsls_viol,
        },
    })
}

/// λ⋆ in JSON: a number, or the string `"inf"` for the fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum LambdaRepr {
    Finite(f64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactRepr {
    theta: Vec<f64>,
    a: f64,
    b: f64,
    k: usize,
    knots: Vec<f64>,
    gamma: f64,
    delta: f64,
    lambda_star: LambdaRepr,
    fallback_used: bool,
    alpha: f64,
    test_kind: TestKind,
    seed: u64,
}

#[derive(Error, Debug)]
pub enum ArtifactError {
    #[error("malformed model file: {0}")]
    Json(#[from] serde_json::Error),

    #[error("inconsistent model file: {0}")]
    Invalid(String),

    #[error(transparent)]
    Spline(#[from] SplineError),
}

/// The part of a fit needed to predict, in a form that survives a JSON
/// round trip bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub basis: SplineBasis,
    pub theta: Vec<f64>,
    pub gamma: f64,
    pub delta: f64,
    pub lambda_star: f64,
    pub fallback_used: bool,
    pub alpha: f64,
    pub test_kind: TestKind,
    pub seed: u64,
}

impl ModelArtifact {
    pub fn predict(&self, x: f64) -> f64 {
        self.basis.eval_f_eta_unchecked(&self.theta, x)
    }

    pub fn to_json(&self) -> String {
        let repr = ArtifactRepr {
            theta: self.theta.clone(),
            a: self.basis.a(),
            b: self.basis.b(),
            k: self.basis.k(),
            knots: self.basis.knots().to_vec(),
            gamma: self.gamma,
            delta: self.delta,
            lambda_star: if self.lambda_star.is_finite() {
                LambdaRepr::Finite(self.lambda_star)
            } else {
                LambdaRepr::Label("inf".into())
            },
            fallback_used: self.fallback_used,
            alpha: self.alpha,
            test_kind: self.test_kind,
            seed: self.seed,
        };
        serde_json::to_string_pretty(&repr).expect("artifact fields are plain data")
    }

    pub fn from_json(text: &str) -> Result<Self, ArtifactError> {
        let repr: ArtifactRepr = serde_json::from_str(text)?;
        let basis = SplineBasis::from_parts(repr.a, repr.b, repr.k, &repr.knots)?;
        if repr.theta.len() != repr.k {
            return Err(ArtifactError::Invalid(format!(
                "theta has {} entries but k = {}",
                repr.theta.len(),
                repr.k
            )));
        }
        if repr.theta.iter().any(|t| !t.is_finite()) {
            return Err(ArtifactError::Invalid("theta contains non-finite values".into()));
        }
        let lambda_star = match repr.lambda_star {
            LambdaRepr::Finite(v) if v >= 0.0 => v,
            LambdaRepr::Label(ref s) if s == "inf" => f64::INFINITY,
            other => {
                return Err(ArtifactError::Invalid(format!(
                    "lambda_star must be a nonnegative number or \"inf\", got {other:?}"
                )))
            }
        };
        Ok(Self {
            basis,
            theta: repr.theta,
            gamma: repr.gamma,
            delta: repr.delta,
            lambda_star,
            fallback_used: repr.fallback_used,
            alpha: repr.alpha,
            test_kind: repr.test_kind,
            seed: repr.seed,
        })
    }
}

impl From<&NileFit> for ModelArtifact {
    fn from(fit: &NileFit) -> Self {
        Self {
            basis: fit.basis_b.clone(),
            theta: fit.theta.clone(),
            gamma: fit.gamma,
            delta: fit.delta,
            lambda_star: fit.lambda_star,
            fallback_used: fit.fallback_used,
            alpha: fit.alpha,
            test_kind: fit.test_kind,
            seed: fit.seed,
        }
    }
}
