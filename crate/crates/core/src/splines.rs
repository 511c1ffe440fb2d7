//! Clamped cubic B-spline bases on `[a, b]`.
//!
//! A basis with `k` functions carries `k + 4` knots: `a` and `b` each with
//! multiplicity four and `k - 4` equidistant interior knots. Evaluation uses
//! the Cox–de Boor recursion in its derivative form, so values and the first
//! two derivatives come out of one pass over the four nonzero functions.
//!
//! [`SplineBasis::eval_f_eta`] is the estimator's function class: the spline
//! inside `[a, b]`, continued by its tangent line on either side.

use nalgebra::DMatrix;
use thiserror::Error;

pub const DEGREE: usize = 3;
const ORDER: usize = DEGREE + 1;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum SplineError {
    #[error("invalid basis interval: a ({a}) must be strictly less than b ({b})")]
    InvalidInterval { a: f64, b: f64 },

    #[error("a cubic basis needs at least 4 functions, got k = {0}")]
    TooFewFunctions(usize),

    #[error("x = {x} lies outside the basis interval [{a}, {b}]")]
    OutOfRange { x: f64, a: f64, b: f64 },

    #[error("derivative order {0} is not supported (0, 1 or 2)")]
    UnsupportedDerivative(usize),

    #[error("coefficient vector has length {found}, expected {expected}")]
    CoefficientLength { expected: usize, found: usize },

    #[error("knot vector is inconsistent with a clamped cubic basis: {0}")]
    InvalidKnots(String),
}

/// Clamped cubic B-spline basis with equidistant interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    a: f64,
    b: f64,
    k: usize,
    knots: Vec<f64>,
}

/// Integrated squared second derivative Gram matrix, `K_ij = ∫ B''_i B''_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix(DMatrix<f64>);

impl PenaltyMatrix {
    pub fn new(entries: DMatrix<f64>) -> Self {
        Self(entries)
    }

    pub fn zeros(k: usize) -> Self {
        Self(DMatrix::zeros(k, k))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// `θᵀ K θ`.
    pub fn quad_form(&self, theta: &[f64]) -> f64 {
        let k = self.dim();
        debug_assert_eq!(theta.len(), k);
        let mut acc = 0.0;
        for i in 0..k {
            let mut row = 0.0;
            for j in 0..k {
                row += self.0[(i, j)] * theta[j];
            }
            acc += theta[i] * row;
        }
        acc
    }
}

impl SplineBasis {
    /// Build the clamped cubic basis on `[a, b]` with `k` functions.
    pub fn cubic(a: f64, b: f64, k: usize) -> Result<Self, SplineError> {
        if !(a.is_finite() && b.is_finite()) || a >= b {
            return Err(SplineError::InvalidInterval { a, b });
        }
        if k < ORDER {
            return Err(SplineError::TooFewFunctions(k));
        }
        let n_interior = k - ORDER;
        let step = (b - a) / (n_interior + 1) as f64;
        let mut knots = Vec::with_capacity(k + ORDER);
        knots.extend(std::iter::repeat_n(a, ORDER));
        knots.extend((1..=n_interior).map(|j| a + step * j as f64));
        knots.extend(std::iter::repeat_n(b, ORDER));
        Ok(Self { a, b, k, knots })
    }

    /// Rebuild a basis from stored parts, checking that the knots are the
    /// ones [`SplineBasis::cubic`] would produce.
    pub fn from_parts(a: f64, b: f64, k: usize, knots: &[f64]) -> Result<Self, SplineError> {
        let basis = Self::cubic(a, b, k)?;
        if knots.len() != basis.knots.len() {
            return Err(SplineError::InvalidKnots(format!(
                "expected {} knots, found {}",
                basis.knots.len(),
                knots.len()
            )));
        }
        let scale = (b - a).abs().max(1.0);
        for (i, (&stored, &expected)) in knots.iter().zip(&basis.knots).enumerate() {
            if (stored - expected).abs() > 1e-12 * scale {
                return Err(SplineError::InvalidKnots(format!(
                    "knot {i} is {stored}, expected {expected}"
                )));
            }
        }
        Ok(basis)
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[ORDER..self.k]
    }

    /// All `k` basis functions (or their derivatives) at `x ∈ [a, b]`.
    pub fn eval(&self, x: f64, deriv_order: usize) -> Result<Vec<f64>, SplineError> {
        if deriv_order > 2 {
            return Err(SplineError::UnsupportedDerivative(deriv_order));
        }
        if !(self.a..=self.b).contains(&x) {
            return Err(SplineError::OutOfRange {
                x,
                a: self.a,
                b: self.b,
            });
        }
        let (span, ders) = self.local_derivatives(x);
        let mut out = vec![0.0; self.k];
        let first = span - DEGREE;
        out[first..first + ORDER].copy_from_slice(&ders[deriv_order]);
        Ok(out)
    }

    /// Design matrix with rows `B(x_i)ᵀ` (or a derivative).
    pub fn design_matrix(&self, xs: &[f64], deriv_order: usize) -> Result<DMatrix<f64>, SplineError> {
        if deriv_order > 2 {
            return Err(SplineError::UnsupportedDerivative(deriv_order));
        }
        let mut m = DMatrix::zeros(xs.len(), self.k);
        for (row, &x) in xs.iter().enumerate() {
            if !(self.a..=self.b).contains(&x) {
                return Err(SplineError::OutOfRange {
                    x,
                    a: self.a,
                    b: self.b,
                });
            }
            let (span, ders) = self.local_derivatives(x);
            let first = span - DEGREE;
            for (j, v) in ders[deriv_order].iter().enumerate() {
                m[(row, first + j)] = *v;
            }
        }
        Ok(m)
    }

    /// Exact `∫_a^b B''_i B''_j dx`.
    ///
    /// `B''` is linear on each knot interval, so the integrand is quadratic
    /// there and two-point Gauss–Legendre is exact.
    pub fn curvature_penalty(&self) -> PenaltyMatrix {
        let mut pen = DMatrix::zeros(self.k, self.k);
        let node = 1.0 / 3f64.sqrt();
        for m in DEGREE..self.k {
            let (lo, hi) = (self.knots[m], self.knots[m + 1]);
            if hi <= lo {
                continue;
            }
            let half = 0.5 * (hi - lo);
            let mid = 0.5 * (hi + lo);
            for x in [mid - half * node, mid + half * node] {
                let ders = self.derivatives_in_span(m, x);
                let d2 = &ders[2];
                for i in 0..ORDER {
                    for j in 0..ORDER {
                        pen[(m - DEGREE + i, m - DEGREE + j)] += half * d2[i] * d2[j];
                    }
                }
            }
        }
        // Symmetrize away accumulation-order rounding.
        let sym = (&pen + pen.transpose()) * 0.5;
        PenaltyMatrix(sym)
    }

    /// Spline inside `[a, b]`, tangent-line continuation outside.
    pub fn eval_f_eta(&self, theta: &[f64], x: f64) -> Result<f64, SplineError> {
        if theta.len() != self.k {
            return Err(SplineError::CoefficientLength {
                expected: self.k,
                found: theta.len(),
            });
        }
        Ok(self.eval_f_eta_unchecked(theta, x))
    }

    pub(crate) fn eval_f_eta_unchecked(&self, theta: &[f64], x: f64) -> f64 {
        let anchor = x.clamp(self.a, self.b);
        let (span, ders) = self.local_derivatives(anchor);
        let first = span - DEGREE;
        let coef = &theta[first..first + ORDER];
        let value: f64 = ders[0].iter().zip(coef).map(|(b, t)| b * t).sum();
        if x < self.a || x > self.b {
            let slope: f64 = ders[1].iter().zip(coef).map(|(b, t)| b * t).sum();
            value + slope * (x - anchor)
        } else {
            value
        }
    }

    /// Index `m` with `knots[m] <= x < knots[m + 1]`, clamped to the last
    /// nonempty interval so that `x = b` is handled.
    fn find_span(&self, x: f64) -> usize {
        let last = self.k - 1;
        if x >= self.knots[self.k] {
            return last;
        }
        // Interior knots are equidistant, so the span is arithmetic.
        let n_intervals = (self.k - DEGREE) as f64;
        let pos = ((x - self.a) / (self.b - self.a) * n_intervals).floor();
        let mut m = (pos.max(0.0) as usize + DEGREE).min(last);
        // Guard against rounding at knot boundaries.
        while m > DEGREE && x < self.knots[m] {
            m -= 1;
        }
        while m < last && x >= self.knots[m + 1] {
            m += 1;
        }
        m
    }

    fn local_derivatives(&self, x: f64) -> (usize, [[f64; ORDER]; 3]) {
        let span = self.find_span(x);
        (span, self.derivatives_in_span(span, x))
    }

    /// Values and first two derivatives of the four functions that are
    /// nonzero on knot interval `span` (`B_{span-3} .. B_{span}`).
    fn derivatives_in_span(&self, span: usize, x: f64) -> [[f64; ORDER]; 3] {
        let t = &self.knots;
        let p = DEGREE;
        let mut ndu = [[0.0f64; ORDER]; ORDER];
        let mut left = [0.0f64; ORDER];
        let mut right = [0.0f64; ORDER];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }

        let mut ders = [[0.0f64; ORDER]; 3];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let n_ders = 2usize;
        for r in 0..=p {
            let mut coeffs = [[0.0f64; ORDER]; 2];
            let (mut s1, mut s2) = (0usize, 1usize);
            coeffs[0][0] = 1.0;
            for kd in 1..=n_ders {
                let mut d = 0.0;
                let rk = r as isize - kd as isize;
                let pk = p - kd;
                if r >= kd {
                    let rk = rk as usize;
                    coeffs[s2][0] = coeffs[s1][0] / ndu[pk + 1][rk];
                    d = coeffs[s2][0] * ndu[rk][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if r as isize - 1 <= pk as isize { kd - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    coeffs[s2][j] = (coeffs[s1][j] - coeffs[s1][j - 1]) / ndu[pk + 1][idx];
                    d += coeffs[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    coeffs[s2][kd] = -coeffs[s1][kd - 1] / ndu[pk + 1][r];
                    d += coeffs[s2][kd] * ndu[r][pk];
                }
                ders[kd][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for (kd, row) in ders.iter_mut().enumerate().skip(1) {
            for v in row.iter_mut() {
                *v *= factor;
            }
            factor *= (p - kd) as f64;
        }
        ders
    }
}
