//! Penalized least squares and its hat operator.
//!
//! For a design `X` (n×k), penalty `K` and weight `w` the hat operator is
//! `X (XᵀX + wK)⁻¹ Xᵀ`. It is never materialized: [`Smoother`] keeps the
//! Cholesky factor of the k×k normal matrix and applies the operator to
//! vectors or matrix columns.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::splines::PenaltyMatrix;

/// Relative ridge added to the normal-matrix diagonal, scaled by
/// `trace(XᵀX) / k`.
pub const RIDGE_JITTER: f64 = 1e-10;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PenRegError {
    #[error("normal matrix is singular after jitter (condition estimate {condition:.3e})")]
    Singular { condition: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("penalty weight must be finite and nonnegative, got {0}")]
    InvalidWeight(f64),

    #[error("cross-validation needs 2 <= folds <= n, got {folds} folds for n = {n}")]
    InvalidFolds { folds: usize, n: usize },

    #[error("cross-validation grid is empty")]
    EmptyGrid,
}

/// Description of one hat matrix: `design (designᵀdesign + weight·penalty)⁻¹ designᵀ`.
#[derive(Debug, Clone, Copy)]
pub struct HatSpec<'a> {
    pub design: &'a DMatrix<f64>,
    pub penalty: &'a PenaltyMatrix,
    pub weight: f64,
}

/// Factorized penalized regression onto the columns of a design matrix.
#[derive(Debug, Clone)]
pub struct Smoother {
    design: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    weight: f64,
}

impl Smoother {
    pub fn new(spec: HatSpec<'_>) -> Result<Self, PenRegError> {
        let gram = spec.design.tr_mul(spec.design);
        let chol = factor_normal(&gram, spec.penalty, spec.weight)?;
        Ok(Self {
            design: spec.design.clone(),
            chol,
            weight: spec.weight,
        })
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn k(&self) -> usize {
        self.design.ncols()
    }

    /// Penalized coefficients `(XᵀX + wK)⁻¹ Xᵀ v`.
    pub fn coefficients(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(&self.design.tr_mul(v))
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.design * self.coefficients(v)
    }

    /// Hat operator applied to every column of `m`.
    pub fn apply_columns(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.design * self.chol.solve(&self.design.tr_mul(m))
    }

    /// The k×k matrix `S = (XᵀX + wK)⁻¹ XᵀX`; it shares its nonzero
    /// spectrum with the n×n hat matrix.
    pub fn equivalent_smoother(&self) -> DMatrix<f64> {
        self.chol.solve(&self.design.tr_mul(&self.design))
    }

    /// `trace(Pᵖ)` computed through the k×k equivalent smoother.
    pub fn trace_power(&self, power: u32) -> f64 {
        let s = self.equivalent_smoother();
        let mut acc = DMatrix::identity(s.nrows(), s.ncols());
        for _ in 0..power {
            acc = &acc * &s;
        }
        acc.trace()
    }
}

/// Cholesky factor of `gram + weight·penalty + jitter·I`.
pub(crate) fn factor_normal(
    gram: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    weight: f64,
) -> Result<Cholesky<f64, Dyn>, PenRegError> {
    if !(weight.is_finite() && weight >= 0.0) {
        return Err(PenRegError::InvalidWeight(weight));
    }
    let k = gram.nrows();
    if penalty.dim() != k || gram.ncols() != k {
        return Err(PenRegError::DimensionMismatch(format!(
            "normal matrix is {}x{}, penalty is {}x{}",
            gram.nrows(),
            gram.ncols(),
            penalty.dim(),
            penalty.dim()
        )));
    }
    let mut normal = gram + penalty.matrix() * weight;
    let jitter = RIDGE_JITTER * gram.trace() / k as f64;
    for i in 0..k {
        normal[(i, i)] += jitter;
    }
    cholesky_or_condition(normal)
}

pub(crate) fn cholesky_or_condition(
    normal: DMatrix<f64>,
) -> Result<Cholesky<f64, Dyn>, PenRegError> {
    match Cholesky::new(normal.clone()) {
        Some(c) if c.l_dirty().diagonal().iter().all(|d| d.is_finite() && *d > 0.0) => Ok(c),
        _ => Err(PenRegError::Singular {
            condition: condition_estimate(&normal),
        }),
    }
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `design (designᵀdesign + weight·penalty)⁻¹ designᵀ v`.
pub fn hat_apply(spec: HatSpec<'_>, v: &DVector<f64>) -> Result<DVector<f64>, PenRegError> {
    if v.len() != spec.design.nrows() {
        return Err(PenRegError::DimensionMismatch(format!(
            "vector has length {}, design has {} rows",
            v.len(),
            spec.design.nrows()
        )));
    }
    Ok(Smoother::new(spec)?.apply(v))
}

/// `argmin_c ‖y − design·c‖² + weight·cᵀ·penalty·c`.
pub fn penalized_solve(
    design: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    weight: f64,
    y: &DVector<f64>,
) -> Result<DVector<f64>, PenRegError> {
    if y.len() != design.nrows() {
        return Err(PenRegError::DimensionMismatch(format!(
            "response has length {}, design has {} rows",
            y.len(),
            design.nrows()
        )));
    }
    let chol = factor_normal(&design.tr_mul(design), penalty, weight)?;
    Ok(chol.solve(&design.tr_mul(y)))
}

/// Settings for the K-fold penalty search.
#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    pub grid: Vec<f64>,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            grid: log_grid(1e-4, 1e4, 25),
            seed: 0,
        }
    }
}

/// `count` logarithmically spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (llo, lhi) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| 10f64.powf(llo + (lhi - llo) * i as f64 / (count - 1) as f64))
        .collect()
}

/// Shuffled partition of `0..n` into `folds` contiguous blocks.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>, PenRegError> {
    if folds < 2 || folds > n {
        return Err(PenRegError::InvalidFolds { folds, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n / folds;
    let extra = n % folds;
    let mut blocks = Vec::with_capacity(folds);
    let mut start = 0;
    for f in 0..folds {
        let len = base + usize::from(f < extra);
        blocks.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(blocks)
}

/// Total out-of-sample squared error for every grid value.
pub fn cv_errors(
    design: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    y: &DVector<f64>,
    config: &CvConfig,
) -> Result<Vec<f64>, PenRegError> {
    let n = design.nrows();
    if y.len() != n {
        return Err(PenRegError::DimensionMismatch(format!(
            "response has length {}, design has {n} rows",
            y.len()
        )));
    }
    if config.grid.is_empty() {
        return Err(PenRegError::EmptyGrid);
    }
    if let Some(&w) = config.grid.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(PenRegError::InvalidWeight(w));
    }
    let blocks = fold_assignment(n, config.folds, config.seed)?;

    let per_fold: Vec<Result<Vec<f64>, PenRegError>> = blocks
        .par_iter()
        .map(|test_rows| {
            let mut is_test = vec![false; n];
            for &r in test_rows {
                is_test[r] = true;
            }
            let train_rows: Vec<usize> = (0..n).filter(|r| !is_test[*r]).collect();
            let x_train = design.select_rows(&train_rows);
            let y_train = y.select_rows(&train_rows);
            let x_test = design.select_rows(test_rows);
            let y_test = y.select_rows(test_rows);
            let gram = x_train.tr_mul(&x_train);
            let rhs = x_train.tr_mul(&y_train);
            config
                .grid
                .iter()
                .map(|&w| {
                    let chol = factor_normal(&gram, penalty, w)?;
                    let coef = chol.solve(&rhs);
                    Ok((&y_test - &x_test * coef).norm_squared())
                })
                .collect()
        })
        .collect();

    let mut totals = vec![0.0; config.grid.len()];
    for fold in per_fold {
        for (t, e) in totals.iter_mut().zip(fold?) {
            *t += e;
        }
    }
    Ok(totals)
}

/// Grid value with the smallest cross-validated error; ties go to the
/// larger weight.
pub fn cv_penalty(
    design: &DMatrix<f64>,
    penalty: &PenaltyMatrix,
    y: &DVector<f64>,
    config: &CvConfig,
) -> Result<f64, PenRegError> {
    let errors = cv_errors(design, penalty, y, config)?;
    let mut best = (f64::INFINITY, f64::NEG_INFINITY);
    for (&w, &e) in config.grid.iter().zip(&errors) {
        if e < best.0 || (e == best.0 && w > best.1) {
            best = (e, w);
        }
    }
    Ok(best.1)
}
