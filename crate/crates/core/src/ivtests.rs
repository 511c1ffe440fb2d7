//! Tests of the instrument-orthogonality hypothesis `E[C(A)(Y − B(X)ᵀθ)] = 0`.
//!
//! Both statistics depend on the residual `r = y − Bθ` only through `‖r‖²`
//! and the smoothed residual `P r`, so [`IvTest::report`] takes both and the
//! estimator can supply `P r` without re-solving.
//!
//! * `T1 = n ‖P r‖² / ‖r‖²` with `P` the unpenalized projection onto the
//!   instrument columns, compared with the `1 − α` quantile of `χ²_k`.
//! * `T2 = (‖P_δ r‖² − σ̂² c_n) / (σ̂² d_n)` with
//!   `σ̂² = ‖(I − P_δ) r‖² / (n − 1)`, `c_n = tr(P_δ²)` and
//!   `d_n = sqrt(2 tr(P_δ⁴))`, compared with the `1 − α` normal quantile.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

use crate::penreg::{HatSpec, PenRegError, Smoother};
use crate::splines::PenaltyMatrix;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TestError {
    #[error("residual vector is identically zero; the statistic is undefined")]
    ZeroResidual,

    #[error("residual variance estimate is zero")]
    ZeroVariance,

    #[error("normalizing constant d_n is zero")]
    ZeroSpread,

    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidAlpha(f64),

    #[error("need at least 2 observations, got {0}")]
    TooFewObservations(usize),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(transparent)]
    PenReg(#[from] PenRegError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TestKind {
    T1,
    #[default]
    T2,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestKind::T1 => write!(f, "t1"),
            TestKind::T2 => write!(f, "t2"),
        }
    }
}

impl FromStr for TestKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "t1" => Ok(TestKind::T1),
            "t2" => Ok(TestKind::T2),
            other => Err(format!("unknown test `{other}` (expected t1 or t2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    pub alpha: f64,
    pub kind: TestKind,
}

impl TestReport {
    fn new(statistic: f64, threshold: f64, alpha: f64, kind: TestKind) -> Self {
        Self {
            statistic,
            threshold,
            reject: statistic > threshold,
            alpha,
            kind,
        }
    }
}

/// A prepared test: the smoother, its trace constants and the threshold.
#[derive(Debug, Clone)]
pub struct IvTest {
    kind: TestKind,
    alpha: f64,
    threshold: f64,
    smoother: Smoother,
    c_n: f64,
    d_n: f64,
}

impl IvTest {
    /// `delta` and `penalty` are ignored for [`TestKind::T1`], which always
    /// uses the unpenalized projection.
    pub fn new(
        kind: TestKind,
        instruments: &DMatrix<f64>,
        penalty: &PenaltyMatrix,
        delta: f64,
        alpha: f64,
    ) -> Result<Self, TestError> {
        check_alpha(alpha)?;
        let n = instruments.nrows();
        if n < 2 {
            return Err(TestError::TooFewObservations(n));
        }
        let k = instruments.ncols();
        match kind {
            TestKind::T1 => {
                let zero = PenaltyMatrix::zeros(k);
                let smoother = Smoother::new(HatSpec {
                    design: instruments,
                    penalty: &zero,
                    weight: 0.0,
                })?;
                Ok(Self {
                    kind,
                    alpha,
                    threshold: chi_square_quantile(k, alpha),
                    smoother,
                    c_n: n as f64,
                    d_n: 0.0,
                })
            }
            TestKind::T2 => {
                let smoother = Smoother::new(HatSpec {
                    design: instruments,
                    penalty,
                    weight: delta,
                })?;
                let s = smoother.equivalent_smoother();
                let s2 = &s * &s;
                let c_n = s2.trace();
                let d_n = (2.0 * (&s2 * &s2).trace()).sqrt();
                if !(d_n > 0.0) {
                    return Err(TestError::ZeroSpread);
                }
                Ok(Self {
                    kind,
                    alpha,
                    threshold: normal_quantile(alpha),
                    smoother,
                    c_n,
                    d_n,
                })
            }
        }
    }

    pub fn kind(&self) -> TestKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// The operator `P` whose output [`IvTest::report`] expects.
    pub fn smoother(&self) -> &Smoother {
        &self.smoother
    }

    /// `(c_n, d_n)` for T2; `(n, 0)` for T1.
    pub fn constants(&self) -> (f64, f64) {
        (self.c_n, self.d_n)
    }

    pub fn evaluate(&self, residual: &DVector<f64>) -> Result<TestReport, TestError> {
        if residual.len() != self.smoother.n() {
            return Err(TestError::DimensionMismatch(format!(
                "residual has length {}, instruments have {} rows",
                residual.len(),
                self.smoother.n()
            )));
        }
        let smoothed = self.smoother.apply(residual);
        self.report(residual, &smoothed)
    }

    /// Statistic from a residual and its image under [`IvTest::smoother`].
    pub fn report(
        &self,
        residual: &DVector<f64>,
        smoothed: &DVector<f64>,
    ) -> Result<TestReport, TestError> {
        let n = residual.len();
        let r2 = residual.norm_squared();
        if r2 == 0.0 {
            return Err(TestError::ZeroResidual);
        }
        let p2 = smoothed.norm_squared();
        let statistic = match self.kind {
            TestKind::T1 => n as f64 * p2 / r2,
            TestKind::T2 => {
                let sigma2 = (residual - smoothed).norm_squared() / (n - 1) as f64;
                if sigma2 == 0.0 {
                    return Err(TestError::ZeroVariance);
                }
                (p2 - sigma2 * self.c_n) / (sigma2 * self.d_n)
            }
        };
        Ok(TestReport::new(statistic, self.threshold, self.alpha, self.kind))
    }
}

fn check_alpha(alpha: f64) -> Result<(), TestError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(TestError::InvalidAlpha(alpha))
    }
}

pub fn chi_square_quantile(dof: usize, alpha: f64) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("degrees of freedom are positive")
        .inverse_cdf(1.0 - alpha)
}

pub fn normal_quantile(alpha: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(1.0 - alpha)
}

/// One-shot T1 evaluation.
pub fn t1_statistic(
    residuals: &DVector<f64>,
    instrument_design: &DMatrix<f64>,
    alpha: f64,
) -> Result<TestReport, TestError> {
    let unused = PenaltyMatrix::zeros(instrument_design.ncols());
    IvTest::new(TestKind::T1, instrument_design, &unused, 0.0, alpha)?.evaluate(residuals)
}

/// One-shot T2 evaluation for the residual `y − fitted`.
pub fn t2_statistic(
    y: &DVector<f64>,
    fitted: &DVector<f64>,
    hat: HatSpec<'_>,
    alpha: f64,
) -> Result<TestReport, TestError> {
    if y.len() != fitted.len() {
        return Err(TestError::DimensionMismatch(format!(
            "y has length {}, fitted has length {}",
            y.len(),
            fitted.len()
        )));
    }
    IvTest::new(TestKind::T2, hat.design, hat.penalty, hat.weight, alpha)?.evaluate(&(y - fitted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::splines::SplineBasis;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn instruments(n: usize, k: usize, seed: u64) -> (DMatrix<f64>, PenaltyMatrix, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lo = a.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let basis = SplineBasis::cubic(lo, hi, k).unwrap();
        (basis.design_matrix(&a, 0).unwrap(), basis.curvature_penalty(), a)
    }

    #[test]
    fn quantiles() {
        assert_abs_diff_eq!(normal_quantile(0.05), 1.6448536269514722, epsilon = 1e-9);
        assert_abs_diff_eq!(chi_square_quantile(50, 0.05), 67.50480656, epsilon = 1e-6);
    }

    #[test]
    fn orthogonal_residual_gives_zero_t1() {
        let (c, _, _) = instruments(200, 50, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = DVector::from_fn(200, |_, _| rng.random_range(-1.0..1.0));
        let zero = PenaltyMatrix::zeros(50);
        let proj = Smoother::new(HatSpec { design: &c, penalty: &zero, weight: 0.0 }).unwrap();
        let orth = &v - proj.apply(&v);
        let report = t1_statistic(&orth, &c, 0.05).unwrap();
        assert!(report.statistic.abs() < 1e-8);
        assert!(!report.reject);
    }

    #[test]
    fn residual_in_instrument_span_rejects() {
        let (c, _, _) = instruments(200, 50, 3);
        let coef = DVector::from_fn(50, |i, _| (i as f64).sin());
        let r = &c * coef;
        let report = t1_statistic(&r, &c, 0.05).unwrap();
        assert_abs_diff_eq!(report.statistic, 200.0, epsilon = 1e-6);
        assert!(report.reject);
        assert_eq!(report.kind, TestKind::T1);
    }

    #[test]
    fn zero_residual_is_an_error() {
        let (c, m, _) = instruments(50, 8, 4);
        let z = DVector::zeros(50);
        assert_eq!(t1_statistic(&z, &c, 0.05), Err(TestError::ZeroResidual));
        let hat = HatSpec { design: &c, penalty: &m, weight: 1.0 };
        assert_eq!(t2_statistic(&z, &z, hat, 0.05), Err(TestError::ZeroResidual));
        assert!(matches!(
            t1_statistic(&DVector::from_element(50, 1.0), &c, 1.5),
            Err(TestError::InvalidAlpha(_))
        ));
    }

    #[test]
    fn t2_zero_when_numerator_balances() {
        let (c, m, _) = instruments(120, 10, 5);
        let test = IvTest::new(TestKind::T2, &c, &m, 0.5, 0.05).unwrap();
        let (c_n, d_n) = test.constants();
        assert!(c_n > 0.0 && d_n > 0.0);
        // r = u + t·w with w ⊥ range(C); pick t so ‖P r‖² = σ̂² c_n.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let u = test.smoother().apply(&DVector::from_fn(120, |_, _| rng.random_range(-1.0..1.0)));
        let zero = PenaltyMatrix::zeros(10);
        let proj = Smoother::new(HatSpec { design: &c, penalty: &zero, weight: 0.0 }).unwrap();
        let noise = DVector::from_fn(120, |_, _| rng.random_range(-1.0..1.0));
        let w = &noise - proj.apply(&noise);
        // P w = 0, so ‖P r‖² = ‖P u‖² and (I−P) r = (u − Pu) + t w with the
        // two parts orthogonal.
        let pu = test.smoother().apply(&u);
        let a = (&u - &pu).norm_squared();
        let target = pu.norm_squared() * (120.0 - 1.0) / c_n;
        let t = ((target - a) / w.norm_squared()).sqrt();
        let r = &u + &w * t;
        let report = test.evaluate(&r).unwrap();
        assert!(report.statistic.abs() < 1e-8, "statistic {}", report.statistic);
    }

    #[test]
    fn statistics_are_scale_invariant() {
        let (c, m, _) = instruments(150, 20, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = DVector::from_fn(150, |_, _| rng.random_range(-1.0..1.0));
        let t1 = IvTest::new(TestKind::T1, &c, &m, 0.0, 0.05).unwrap();
        let t2 = IvTest::new(TestKind::T2, &c, &m, 0.3, 0.05).unwrap();
        for scale in [-3.0, 1e-3, 250.0] {
            let scaled = &r * scale;
            let (a, b) = (t1.evaluate(&r).unwrap(), t1.evaluate(&scaled).unwrap());
            assert!((a.statistic - b.statistic).abs() <= 1e-12 * a.statistic.abs().max(1.0));
            let (a, b) = (t2.evaluate(&r).unwrap(), t2.evaluate(&scaled).unwrap());
            assert!((a.statistic - b.statistic).abs() <= 1e-10 * a.statistic.abs().max(1.0));
        }
    }

    #[test]
    fn t2_detects_mean_shift_in_instrument() {
        let (c, m, a) = instruments(200, 20, 9);
        let test = IvTest::new(TestKind::T2, &c, &m, 1.0, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = DVector::from_fn(200, |i, _| a[i] + 0.2 * rng.random_range(-1.0..1.0));
        assert!(test.evaluate(&r).unwrap().reject);
    }

    #[test]
    fn kind_parses() {
        assert_eq!("T1".parse::<TestKind>().unwrap(), TestKind::T1);
        assert_eq!("t2".parse::<TestKind>().unwrap(), TestKind::T2);
        assert!("t3".parse::<TestKind>().is_err());
        assert_eq!(TestKind::default(), TestKind::T2);
    }
}
