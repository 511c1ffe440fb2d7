//! Numeric checks of the minimax and generalization theory.
//!
//! Linear one-dimensional models have closed-form risks under every
//! intervention type used here, so most checks are exact. Monte Carlo is
//! used only to cross-check those closed forms and to evaluate the
//! nonlinear counterexample constructions.
//!
//! The linear model is
//!
//! ```text
//! A = ε_A,  H = σ ε_H,  X = γA + ε_X + H/σ,  Y = βX + ε_Y + H/σ
//! ```
//!
//! so `ξ_X = ε_X + ε_H`, `ξ_Y = ε_Y + ε_H`, `E[ξ_Y²] = v_Y + v_H` and
//! `Cov(X, ξ_Y) = v_H` whatever σ is. σ only matters for interventions that
//! act through H.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::scm::{self, AlphaConfig, CausalFunction, XI_SECOND_MOMENT};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid intervention set: {0}")]
    InvalidInterventions(String),

    #[error("empty {0} grid")]
    EmptyGrid(&'static str),

    #[error("candidate equals the causal coefficient; the construction needs b != beta")]
    CandidateIsCausal,

    #[error("no hidden confounding (E[xi_X xi_Y] = 0); the construction needs it")]
    NoConfounding,

    #[error("intervention region [{region_lo}, {region_hi}] overlaps the support [{support_lo}, {support_hi}]")]
    OverlappingRegions {
        region_lo: f64,
        region_hi: f64,
        support_lo: f64,
        support_hi: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// The linear model above; `var_*` are the variances of the noise terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearScm {
    pub beta: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub var_a: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub var_h: f64,
}

impl LinearScm {
    pub fn new(beta: f64, gamma: f64, sigma: f64, noise_var: [f64; 4]) -> Result<Self, TheoryError> {
        if !(beta.is_finite() && gamma.is_finite()) {
            return Err(TheoryError::InvalidModel("beta and gamma must be finite".into()));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(TheoryError::InvalidModel(format!("sigma must be positive, got {sigma}")));
        }
        if !noise_var.iter().all(|v| *v > 0.0 && v.is_finite()) {
            return Err(TheoryError::InvalidModel(format!(
                "noise variances must be positive, got {noise_var:?}"
            )));
        }
        let [var_a, var_x, var_y, var_h] = noise_var;
        Ok(Self { beta, gamma, sigma, var_a, var_x, var_y, var_h })
    }

    /// Random model with β ∈ [-2, 2] and the other parameters in [0.5, 2].
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let mut pos = || rng.random_range(0.5..2.0);
        let (gamma, sigma) = (pos(), pos());
        let noise = [pos(), pos(), pos(), pos()];
        let beta = rng.random_range(-2.0..2.0);
        Self::new(beta, gamma, sigma, noise).expect("ranges are valid")
    }

    pub fn xi_y_second_moment(&self) -> f64 {
        self.var_y + self.var_h
    }

    /// `Cov(X, ξ_Y)` under the observational law.
    pub fn cov_x_xi(&self) -> f64 {
        self.var_h
    }

    pub fn x_second_moment(&self) -> f64 {
        self.gamma * self.gamma * self.var_a + self.var_x + self.var_h
    }

    /// Population OLS coefficient of Y on X.
    pub fn ols(&self) -> f64 {
        self.beta + self.cov_x_xi() / self.x_second_moment()
    }
}

/// A single intervention on the linear model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LinearIntervention {
    Observational,
    ShiftX(f64),
    HardX(f64),
    HardA(f64),
    /// `X := i·H`.
    ConfoundingScale(f64),
}

/// A member of an intervention set: one intervention or a closed interval
/// of one type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum InterventionFamily {
    Point(LinearIntervention),
    Shifts { lo: f64, hi: f64 },
    HardX { lo: f64, hi: f64 },
    HardA { lo: f64, hi: f64 },
    ConfoundingScales { lo: f64, hi: f64 },
}

impl InterventionFamily {
    /// All risks here are quadratics in the intervention parameter with a
    /// nonnegative leading coefficient, so an interval's supremum is at an
    /// endpoint. Returns those candidates.
    fn extreme_points(&self) -> Result<Vec<LinearIntervention>, TheoryError> {
        use LinearIntervention as L;
        let check = |lo: f64, hi: f64| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(TheoryError::InvalidInterventions(format!("bad interval [{lo}, {hi}]")))
            }
        };
        let point = |i: &LinearIntervention| match *i {
            L::ConfoundingScale(s) if !(s > 0.0 && s.is_finite()) => Err(TheoryError::InvalidInterventions(
                format!("confounding scale must be positive, got {s}"),
            )),
            L::ShiftX(v) | L::HardX(v) | L::HardA(v) if !v.is_finite() => {
                Err(TheoryError::InvalidInterventions(format!("non-finite value {v}")))
            }
            _ => Ok(()),
        };
        let out = match *self {
            InterventionFamily::Point(i) => vec![i],
            InterventionFamily::Shifts { lo, hi } => {
                check(lo, hi)?;
                vec![L::ShiftX(lo), L::ShiftX(hi)]
            }
            InterventionFamily::HardX { lo, hi } => {
                check(lo, hi)?;
                vec![L::HardX(lo), L::HardX(hi)]
            }
            InterventionFamily::HardA { lo, hi } => {
                check(lo, hi)?;
                vec![L::HardA(lo), L::HardA(hi)]
            }
            InterventionFamily::ConfoundingScales { lo, hi } => {
                check(lo, hi)?;
                vec![L::ConfoundingScale(lo), L::ConfoundingScale(hi)]
            }
        };
        out.iter().try_for_each(point)?;
        Ok(out)
    }
}

/// `E[X²]` and `E[X ξ_Y]` under one intervention.
fn moments(scm: &LinearScm, i: LinearIntervention) -> (f64, f64) {
    match i {
        LinearIntervention::Observational => (scm.x_second_moment(), scm.var_h),
        LinearIntervention::ShiftX(c) => (scm.x_second_moment() + c * c, scm.var_h),
        LinearIntervention::HardX(x) => (x * x, 0.0),
        LinearIntervention::HardA(a) => (
            scm.gamma * scm.gamma * a * a + scm.var_x + scm.var_h,
            scm.var_h,
        ),
        LinearIntervention::ConfoundingScale(s) => {
            let w = s * scm.sigma;
            (w * w * scm.var_h, w * scm.var_h)
        }
    }
}

/// `E[(Y − bX)²]` under one intervention.
pub fn linear_risk(scm: &LinearScm, b: f64, i: LinearIntervention) -> f64 {
    let d = scm.beta - b;
    let (ex2, exxi) = moments(scm, i);
    d * d * ex2 + 2.0 * d * exxi + scm.xi_y_second_moment()
}

fn expand(families: &[InterventionFamily]) -> Result<Vec<LinearIntervention>, TheoryError> {
    if families.is_empty() {
        return Err(TheoryError::EmptyGrid("intervention"));
    }
    let mut out = Vec::new();
    for f in families {
        out.extend(f.extreme_points()?);
    }
    Ok(out)
}

/// Exact worst-case risk of `x ↦ bx` over an intervention set.
pub fn linear_worst_case_risk(
    scm: &LinearScm,
    b: f64,
    families: &[InterventionFamily],
) -> Result<f64, TheoryError> {
    Ok(expand(families)?
        .into_iter()
        .map(|i| linear_risk(scm, b, i))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Grid minimizer of the worst-case risk; returns `(b⋆, risk(b⋆))`. Ties
/// go to the earlier grid point.
pub fn brute_force_minimax(
    scm: &LinearScm,
    b_grid: &[f64],
    families: &[InterventionFamily],
) -> Result<(f64, f64), TheoryError> {
    if b_grid.is_empty() {
        return Err(TheoryError::EmptyGrid("coefficient"));
    }
    let points = expand(families)?;
    let mut best = (f64::NAN, f64::INFINITY);
    for &b in b_grid {
        let r = points.iter().map(|&i| linear_risk(scm, b, i)).fold(f64::NEG_INFINITY, f64::max);
        if r < best.1 {
            best = (b, r);
        }
    }
    Ok(best)
}

/// Evenly spaced grid with `count` points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => (0..count)
            .map(|j| lo + (hi - lo) * j as f64 / (count - 1) as f64)
            .collect(),
    }
}

/// Coarse grid followed by two rounds of local refinement.
pub fn refined_minimax(
    scm: &LinearScm,
    lo: f64,
    hi: f64,
    families: &[InterventionFamily],
) -> Result<(f64, f64), TheoryError> {
    let (mut lo, mut hi) = (lo, hi);
    let mut best = (f64::NAN, f64::INFINITY);
    for _ in 0..4 {
        let grid = linspace(lo, hi, 2001);
        let step = (hi - lo) / 2000.0;
        best = brute_force_minimax(scm, &grid, families)?;
        lo = best.0 - 2.0 * step;
        hi = best.0 + 2.0 * step;
    }
    Ok(best)
}

/// Monte Carlo estimate of `E[(Y − bX)²]` with Gaussian noise; returns the
/// mean and its standard error.
pub fn monte_carlo_linear_risk<R: Rng>(
    scm: &LinearScm,
    b: f64,
    i: LinearIntervention,
    n: usize,
    rng: &mut R,
) -> (f64, f64) {
    let sd = |v: f64| v.sqrt();
    let (sa, sx, sy, sh) = (sd(scm.var_a), sd(scm.var_x), sd(scm.var_y), sd(scm.var_h));
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n {
        let z: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let (ea, ex, ey, eh) = (sa * z[0], sx * z[1], sy * z[2], sh * z[3]);
        let h = scm.sigma * eh;
        let a = match i {
            LinearIntervention::HardA(v) => v,
            _ => ea,
        };
        let x_obs = scm.gamma * a + ex + h / scm.sigma;
        let x = match i {
            LinearIntervention::ShiftX(c) => x_obs + c,
            LinearIntervention::HardX(v) => v,
            LinearIntervention::ConfoundingScale(s) => s * h,
            _ => x_obs,
        };
        let y = scm.beta * x + ey + h / scm.sigma;
        let loss = (y - b * x).powi(2);
        sum += loss;
        sum2 += loss * loss;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sum2 / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
    (mean, (var / nf).sqrt())
}

/// Outcome of the bound `sup E[(f(X) − f⋆(X))²] ≤ 4 Var(ξ_Y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinimaxBoundReport {
    /// False when the candidate is worse than the causal coefficient in the
    /// worst case, in which case the bound makes no claim.
    pub applicable: bool,
    pub lhs: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Checks the distance-to-causal bound for a candidate coefficient.
pub fn check_minimax_bound(
    scm: &LinearScm,
    b_star: f64,
    families: &[InterventionFamily],
) -> Result<MinimaxBoundReport, TheoryError> {
    let points = expand(families)?;
    let worst = |b: f64| points.iter().map(|&i| linear_risk(scm, b, i)).fold(f64::NEG_INFINITY, f64::max);
    let d = scm.beta - b_star;
    let sup_ex2 = points.iter().map(|&i| moments(scm, i).0).fold(0.0, f64::max);
    let lhs = d * d * sup_ex2;
    // ξ_Y has mean zero, so its variance is its second moment.
    let bound = 4.0 * scm.xi_y_second_moment();
    let applicable = worst(b_star) <= worst(scm.beta);
    Ok(MinimaxBoundReport {
        applicable,
        lhs,
        bound,
        holds: !applicable || lhs <= bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfoundingKind {
    ConfoundingRemoving,
    ConfoundingPreserving,
}

/// Generalization bounds for derivative-bounded function classes: `δ` is
/// how far the intervention support reaches beyond the observed one, `K`
/// the derivative bound, `ε` the minimax approximation error (only used
/// for the confounding-preserving case).
pub fn check_bound_bounded_derivative(
    delta: f64,
    k: f64,
    var_xi: f64,
    kind: ConfoundingKind,
    epsilon: f64,
) -> Result<f64, TheoryError> {
    for (name, v) in [("delta", delta), ("K", k), ("var_xi", var_xi), ("epsilon", epsilon)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(TheoryError::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    let dk = delta * k;
    Ok(match kind {
        ConfoundingKind::ConfoundingRemoving => 4.0 * dk * dk + 4.0 * dk * var_xi.sqrt(),
        ConfoundingKind::ConfoundingPreserving => {
            epsilon
                + 12.0 * dk * dk
                + 32.0 * dk * var_xi.sqrt()
                + 4.0 * 2f64.sqrt() * dk * epsilon.sqrt()
        }
    })
}

/// The same bounds evaluated through a factored form, as an independent
/// arithmetic check.
pub fn bounded_derivative_bound_factored(delta: f64, k: f64, var_xi: f64, kind: ConfoundingKind, epsilon: f64) -> f64 {
    let dk = delta * k;
    let s = var_xi.sqrt();
    match kind {
        ConfoundingKind::ConfoundingRemoving => 4.0 * dk * (dk + s),
        ConfoundingKind::ConfoundingPreserving => {
            let t = 8f64.sqrt() * dk + epsilon.sqrt();
            t * t + 4.0 * dk * (dk + 8.0 * s)
        }
    }
}

/// Numbers behind the confounding-scale impossibility result, for the
/// model with unit noise variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonIdentifiabilityReport {
    pub causal_risk: f64,
    pub alternative_b: f64,
    pub alternative_risk: f64,
}

fn unit_model(beta: f64, sigma: f64) -> Result<LinearScm, TheoryError> {
    LinearScm::new(beta, 1.0, sigma, [1.0; 4])
}

/// Worst-case risks of β and of `β + 1/(σu)` over confounding scales in
/// `[l, u]`, `0 < l ≤ u`.
pub fn non_identifiability_numbers(beta: f64, sigma: f64, l: f64, u: f64) -> Result<NonIdentifiabilityReport, TheoryError> {
    let scm = unit_model(beta, sigma)?;
    let set = [InterventionFamily::ConfoundingScales { lo: l, hi: u }];
    let alternative_b = beta + 1.0 / (sigma * u);
    Ok(NonIdentifiabilityReport {
        causal_risk: linear_worst_case_risk(&scm, beta, &set)?,
        alternative_b,
        alternative_risk: linear_worst_case_risk(&scm, alternative_b, &set)?,
    })
}

/// σ̃ that makes candidate `b` lose at least `c` at scale `i0` while
/// leaving the observational law unchanged.
pub fn confounding_scale_alternative(beta: f64, b: f64, i0: f64, c: f64) -> Result<f64, TheoryError> {
    if b == beta {
        return Err(TheoryError::CandidateIsCausal);
    }
    if !(c > 0.0 && i0 > 0.0) {
        return Err(TheoryError::InvalidArgument(format!("need c > 0 and i0 > 0, got c = {c}, i0 = {i0}")));
    }
    let di = (beta - b) * i0;
    Ok((di.signum() * (1.0 + c).sqrt() - 1.0) / di)
}

/// Generalization gap of `b` in the σ̃ model: its worst-case risk minus the
/// (grid) minimax risk. Returns `(σ̃, gap)`.
pub fn non_identifiability_gap(beta: f64, b: f64, l: f64, u: f64, i0: f64, c: f64) -> Result<(f64, f64), TheoryError> {
    let sigma_tilde = confounding_scale_alternative(beta, b, i0, c)?;
    let scm = unit_model(beta, sigma_tilde)?;
    let set = [InterventionFamily::ConfoundingScales { lo: l, hi: u }];
    let worst_b = linear_worst_case_risk(&scm, b, &set)?;
    let span = 4.0 * (beta - b).abs() + 4.0 / (sigma_tilde * l);
    let (_, minimax) = refined_minimax(&scm, beta - span, beta + span, &set)?;
    Ok((sigma_tilde, worst_b - minimax))
}

/// Offset needed on a region of probability `ε` to force a gap of `c`.
pub fn extrapolation_offset(c: f64, epsilon: f64, xi2: f64) -> f64 {
    ((2.0 * xi2 + c).sqrt() + xi2.sqrt()) / epsilon.sqrt()
}

/// Alternative causal function that agrees with `f` off the region
/// `B̄ = (region_lo, region_hi]` beyond the support and equals
/// `f̄ + offset` on its middle half `B`, with linear blends in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtrapolationAlternative {
    pub region_lo: f64,
    pub region_hi: f64,
    pub inner_lo: f64,
    pub inner_hi: f64,
    pub offset: f64,
    /// Probability of `B` under the witnessing intervention `X ~ U(B̄)`.
    pub epsilon: f64,
}

impl ExtrapolationAlternative {
    pub fn eval(&self, x: f64, f: impl Fn(f64) -> f64, f_bar: impl Fn(f64) -> f64) -> f64 {
        if x <= self.region_lo || x > self.region_hi {
            return f(x);
        }
        let w = if x < self.inner_lo {
            (x - self.region_lo) / (self.inner_lo - self.region_lo)
        } else if x <= self.inner_hi {
            1.0
        } else {
            (self.region_hi - x) / (self.region_hi - self.inner_hi)
        };
        (1.0 - w) * f(x) + w * (f_bar(x) + self.offset)
    }
}

/// Builds the extrapolation counterexample for region `B̄` outside the
/// support `[support_lo, support_hi]`.
pub fn impossibility_demo_extrapolation(
    c: f64,
    support: (f64, f64),
    region: (f64, f64),
    xi2: f64,
) -> Result<ExtrapolationAlternative, TheoryError> {
    let (support_lo, support_hi) = support;
    let (region_lo, region_hi) = region;
    if !(c >= 0.0 && xi2 >= 0.0) {
        return Err(TheoryError::InvalidArgument(format!("need c >= 0 and E[xi^2] >= 0, got {c}, {xi2}")));
    }
    if !(region_lo < region_hi && support_lo < support_hi) {
        return Err(TheoryError::InvalidArgument("intervals must have positive length".into()));
    }
    if region_lo < support_hi && support_lo < region_hi {
        return Err(TheoryError::OverlappingRegions { region_lo, region_hi, support_lo, support_hi });
    }
    let quarter = 0.25 * (region_hi - region_lo);
    let epsilon = 0.5;
    Ok(ExtrapolationAlternative {
        region_lo,
        region_hi,
        inner_lo: region_lo + quarter,
        inner_hi: region_hi - quarter,
        offset: extrapolation_offset(c, epsilon, xi2),
        epsilon,
    })
}

/// Monte Carlo gap of `f̄` in the extrapolation counterexample built on the
/// simulation model: under `X ~ U(B̄)` (independent of H), the risk of `f̄`
/// minus that of the alternative causal function, with common draws.
pub fn extrapolation_gap_mc<R: Rng>(
    alt: &ExtrapolationAlternative,
    f: &CausalFunction,
    f_bar: impl Fn(f64) -> f64,
    n: usize,
    rng: &mut R,
) -> f64 {
    let mut gap = 0.0;
    for _ in 0..n {
        let x = rng.random_range(alt.region_lo..=alt.region_hi);
        let h: f64 = rng.random_range(-1.0..=1.0);
        let e: f64 = rng.random_range(-1.0..=1.0);
        let xi = scm::H_WEIGHT * h + scm::EPS_Y_WEIGHT * e;
        let f_tilde = alt.eval(x, |t| f.eval(t), &f_bar);
        let y = f_tilde + xi;
        gap += (y - f_bar(x)).powi(2) - xi * xi;
    }
    gap / n as f64
}

/// Model for interventions on A: `A ~ U(-1, 1)`,
/// `X = γA + ½A² + ξ_X`, `Y = βX + ξ_Y` with `ξ_X = ε_X + ε_H`,
/// `ξ_Y = ε_Y + ε_H` (Gaussian).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonlinearAScm {
    pub beta: f64,
    pub gamma: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub var_h: f64,
}

impl NonlinearAScm {
    pub fn g(&self, a: f64) -> f64 {
        self.gamma * a + 0.5 * a * a
    }

    pub fn var_xi_x(&self) -> f64 {
        self.var_x + self.var_h
    }

    pub fn cov_xi(&self) -> f64 {
        self.var_h
    }

    pub fn xi_y_second_moment(&self) -> f64 {
        self.var_y + self.var_h
    }

    /// `E[(Y − bX)²]` when `A` is set so that `g(A) = m`.
    pub fn risk_at_mean(&self, b: f64, m: f64) -> f64 {
        let d = self.beta - b;
        d * d * (m * m + self.var_xi_x()) + 2.0 * d * self.cov_xi() + self.xi_y_second_moment()
    }
}

/// Tent of height 1 at `center`, zero beyond `half_width`.
fn tent(a: f64, center: f64, half_width: f64) -> f64 {
    (1.0 - (a - center).abs() / half_width).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IntADemo {
    /// Height of the spike of `g̃` at `a_star`.
    pub n: u64,
    pub a_star: f64,
    pub half_width: f64,
    /// Closed-form lower bound on the generalization gap of `b̄`.
    pub gap: f64,
    /// Forward difference of the worst-case risk at β along
    /// `sign(E[ξ_X ξ_Y])`.
    pub directional_fd: f64,
    /// `−2 |E[ξ_X ξ_Y]|`, the exact directional derivative.
    pub directional_limit: f64,
}

impl IntADemo {
    /// The alternative `g̃`: `g` on the observed support, a spike of height
    /// `n` at `a_star`.
    pub fn g_tilde(&self, scm: &NonlinearAScm, a: f64) -> f64 {
        let w = tent(a, self.a_star, self.half_width);
        (1.0 - w) * scm.g(a) + w * self.n as f64
    }
}

/// Builds the counterexample for hard interventions on A with values in
/// `[-2, 2]`; the spike sits at `a = 1.5`, outside `supp(A) = [-1, 1]`.
pub fn impossibility_demo_int_a(scm: &NonlinearAScm, b_bar: f64, c: f64) -> Result<IntADemo, TheoryError> {
    if b_bar == scm.beta {
        return Err(TheoryError::CandidateIsCausal);
    }
    if scm.cov_xi() == 0.0 {
        return Err(TheoryError::NoConfounding);
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(TheoryError::InvalidArgument(format!("c must be positive, got {c}")));
    }
    let (a_star, half_width) = (1.5, 0.25);
    let d = scm.beta - b_bar;
    let base = scm.risk_at_mean(b_bar, 0.0) - scm.xi_y_second_moment();
    let need = ((c - base).max(0.0) / (d * d)).sqrt().ceil();
    let mut n = need as u64;
    while scm.risk_at_mean(b_bar, n as f64) - scm.xi_y_second_moment() < c {
        n += 1;
    }
    let gap = scm.risk_at_mean(b_bar, n as f64) - scm.xi_y_second_moment();

    // Worst case over hard interventions on a grid of [-2, 2] in the
    // original model, along the direction of the confounding covariance.
    let grid = linspace(-2.0, 2.0, 401);
    let worst = |b: f64| {
        grid.iter()
            .map(|&a| scm.risk_at_mean(b, scm.g(a)))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let u = scm.cov_xi().signum();
    let h = 1e-6;
    let directional_fd = (worst(scm.beta + h * u) - worst(scm.beta)) / h;
    Ok(IntADemo {
        n,
        a_star,
        half_width,
        gap,
        directional_fd,
        directional_limit: -2.0 * scm.cov_xi().abs(),
    })
}

/// Monte Carlo gap of `b̄` at the spike: risk of `b̄` minus `E[ξ_Y²]`
/// estimated with common draws.
pub fn int_a_gap_mc<R: Rng>(scm: &NonlinearAScm, demo: &IntADemo, b_bar: f64, n: usize, rng: &mut R) -> f64 {
    let m = demo.g_tilde(scm, demo.a_star);
    let (sx, sy, sh) = (scm.var_x.sqrt(), scm.var_y.sqrt(), scm.var_h.sqrt());
    let mut gap = 0.0;
    for _ in 0..n {
        let z: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let eh = sh * z[2];
        let x = m + sx * z[0] + eh;
        let xi_y = sy * z[1] + eh;
        let y = scm.beta * x + xi_y;
        gap += (y - b_bar * x).powi(2) - xi_y * xi_y;
    }
    gap / n as f64
}

/// `f` on `[-s, s]`; outside, the slope moves linearly from `f′(±s)` to
/// `∓k` over a distance `eta` and stays there. Its derivative is bounded by
/// `k` whenever `f`'s is.
#[derive(Debug, Clone, Copy)]
pub struct TurnedExtension<F> {
    pub f: F,
    pub s: f64,
    pub k: f64,
    pub eta: f64,
}

impl<F: Fn(f64) -> f64> TurnedExtension<F> {
    fn slope(&self, x: f64) -> f64 {
        let h = 1e-6;
        ((self.f)(x + h) - (self.f)(x - h)) / (2.0 * h)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let side = |t: f64, edge: f64, target: f64, dir: f64| {
            // t ≥ 0 is the distance beyond the edge; dir = ±1 its direction.
            let s0 = self.slope(edge) * dir;
            let turn = t.min(self.eta);
            let mut v = s0 * turn + (target - s0) * turn * turn / (2.0 * self.eta);
            if t > self.eta {
                v += target * (t - self.eta);
            }
            (self.f)(edge) + v
        };
        if x > self.s {
            side(x - self.s, self.s, -self.k, 1.0)
        } else if x < -self.s {
            side(-self.s - x, -self.s, -self.k, -1.0)
        } else {
            (self.f)(x)
        }
    }
}

/// One row of the theory report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRow {
    pub scenario: String,
    pub candidate: String,
    pub worst_case_risk: f64,
    pub bound: f64,
    pub pass: bool,
}

impl ScenarioRow {
    fn new(scenario: impl Into<String>, candidate: impl Into<String>, risk: f64, bound: f64, pass: bool) -> Self {
        Self {
            scenario: scenario.into(),
            candidate: candidate.into(),
            worst_case_risk: risk,
            bound,
            pass,
        }
    }
}

/// Suite size knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub seed: u64,
    /// Draws per Monte Carlo evaluation.
    pub mc_draws: usize,
    pub random_scenarios: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mc_draws: 1_000_000,
            random_scenarios: 10,
        }
    }
}

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_set() -> Vec<InterventionFamily> {
    vec![
        InterventionFamily::Point(LinearIntervention::Observational),
        InterventionFamily::Shifts { lo: -1.0, hi: 2.0 },
        InterventionFamily::HardX { lo: -3.0, hi: 3.0 },
        InterventionFamily::HardA { lo: -2.0, hi: 2.0 },
        InterventionFamily::ConfoundingScales { lo: 0.5, hi: 2.0 },
    ]
}

/// Causal coefficient risk equals `E[ξ_Y²]` exactly in random models.
pub fn suite_causal_risk(cfg: &SuiteConfig) -> Result<Vec<ScenarioRow>, TheoryError> {
    let mut rng = substream(cfg.seed, 1);
    (0..cfg.random_scenarios)
        .map(|j| {
            let scm = LinearScm::random(&mut rng);
            let risk = linear_worst_case_risk(&scm, scm.beta, &standard_set())?;
            let target = scm.xi_y_second_moment();
            Ok(ScenarioRow::new(format!("causal_risk/{j}"), "beta", risk, target, risk == target))
        })
        .collect()
}

/// Closed forms against Monte Carlo, within three standard errors.
pub fn suite_mc_crosscheck(cfg: &SuiteConfig) -> Result<Vec<ScenarioRow>, TheoryError> {
    let mut rng = substream(cfg.seed, 2);
    let jobs: Vec<(usize, LinearScm, f64)> = (0..cfg.random_scenarios)
        .map(|j| {
            let scm = LinearScm::random(&mut rng);
            let b = scm.beta + rng.random_range(-0.5..0.5);
            (j, scm, b)
        })
        .collect();
    let interventions = [
        LinearIntervention::Observational,
        LinearIntervention::ShiftX(1.5),
        LinearIntervention::HardX(-2.0),
        LinearIntervention::HardA(1.0),
        LinearIntervention::ConfoundingScale(0.7),
    ];
    let rows: Vec<Vec<ScenarioRow>> = jobs
        .par_iter()
        .map(|&(j, scm, b)| {
            interventions
                .iter()
                .enumerate()
                .map(|(m, &i)| {
                    let mut r = substream(cfg.seed ^ 0xC0FFEE, (j * 16 + m) as u64);
                    let exact = linear_risk(&scm, b, i);
                    let (mc, se) = monte_carlo_linear_risk(&scm, b, i, cfg.mc_draws, &mut r);
                    ScenarioRow::new(
                        format!("mc_crosscheck/{j}/{m}"),
                        format!("b={b:.6}"),
                        mc,
                        exact,
                        (mc - exact).abs() <= 3.0 * se,
                    )
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Confounding-scale impossibility numbers.
pub fn suite_non_identifiability() -> Result<Vec<ScenarioRow>, TheoryError> {
    let mut rows = Vec::new();
    for (j, &(beta, sigma, l, u)) in [(1.0, 1.0, 0.5, 2.0), (-0.5, 2.0, 0.1, 1.0), (2.0, 0.5, 1.0, 3.0)]
        .iter()
        .enumerate()
    {
        let r = non_identifiability_numbers(beta, sigma, l, u)?;
        rows.push(ScenarioRow::new(format!("non_identifiability/{j}/causal"), "beta", r.causal_risk, 2.0, r.causal_risk == 2.0));
        rows.push(ScenarioRow::new(
            format!("non_identifiability/{j}/alternative"),
            format!("b={:.6}", r.alternative_b),
            r.alternative_risk,
            2.0,
            r.alternative_risk < 2.0,
        ));
        for c in [1.0, 10.0] {
            for b in [beta + 0.3, beta - 1.2] {
                let (sigma_tilde, gap) = non_identifiability_gap(beta, b, l, u, u, c)?;
                rows.push(ScenarioRow::new(
                    format!("non_identifiability/{j}/gap/c={c}/sigma={sigma_tilde:.6}"),
                    format!("b={b:.6}"),
                    gap,
                    c,
                    sigma_tilde > 0.0 && gap >= c * (1.0 - 1e-12),
                ));
            }
        }
    }
    Ok(rows)
}

/// Brute-force minimax solutions under shifts satisfy the distance bound.
pub fn suite_minimax_bound(cfg: &SuiteConfig) -> Result<Vec<ScenarioRow>, TheoryError> {
    let mut rng = substream(cfg.seed, 3);
    (0..10)
        .map(|j| {
            let scm = LinearScm::random(&mut rng);
            let k = rng.random_range(0.2..3.0);
            let set = [InterventionFamily::Shifts { lo: 0.0, hi: k }];
            let (b_star, risk) = refined_minimax(&scm, scm.beta - 3.0, scm.beta + 3.0, &set)?;
            let report = check_minimax_bound(&scm, b_star, &set)?;
            Ok(ScenarioRow::new(
                format!("minimax_bound/{j}/lhs={:.6e}", report.lhs),
                format!("b={b_star:.6}"),
                risk,
                report.bound,
                report.applicable && report.holds,
            ))
        })
        .collect()
}

/// Arithmetic of the derivative bounds plus Monte Carlo scenarios whose
/// observed gaps must stay below them.
pub fn suite_bounded_derivative(cfg: &SuiteConfig) -> Result<Vec<ScenarioRow>, TheoryError> {
    use ConfoundingKind::*;
    let mut rows = Vec::new();
    for (j, &(delta, k, var, eps)) in [(0.5, 1.0, 0.0433, 0.0), (0.0, 2.0, 1.0, 0.0), (1.3, 0.7, 0.2, 0.05), (0.2, 4.0, 0.0433, 0.3)]
        .iter()
        .enumerate()
    {
        for kind in [ConfoundingRemoving, ConfoundingPreserving] {
            let a = check_bound_bounded_derivative(delta, k, var, kind, eps)?;
            let b = bounded_derivative_bound_factored(delta, k, var, kind, eps);
            rows.push(ScenarioRow::new(
                format!("bound_arith/{j}/{kind:?}"),
                "formula",
                b,
                a,
                (a - b).abs() <= 1e-12 * a.abs().max(1.0),
            ));
        }
    }
    rows.extend(mc_removing_scenarios(cfg)?);
    rows.extend(mc_preserving_scenarios(cfg)?);
    Ok(rows)
}

fn support_half_width(alpha: &AlphaConfig) -> f64 {
    alpha.alpha_a + alpha.alpha_h + alpha.alpha_eps
}

/// Hard interventions on X up to `δ` beyond the support of a confounded
/// model; the candidate matches `f` on the support and turns away outside.
fn mc_removing_scenarios(cfg: &SuiteConfig) -> Result<Vec<ScenarioRow>, TheoryError> {
    let alpha = AlphaConfig::defaults()[2];
    let s = support_half_width(&alpha);
    let mut rows = Vec::new();
    for (j, &(k, delta)) in [(1.0, 0.5), (2.0, 0.25), (0.5, 1.0)].iter().enumerate() {
        let f = move |x: f64| k * x.sin();
        let f_star = TurnedExtension { f, s, k, eta: 0.1 * delta };
        let mut rng = substream(cfg.seed, 40 + j as u64);
        let xs = linspace(-s - delta, s + delta, 41);
        let draws = (cfg.mc_draws / 50).max(1000);
        // With common draws, gap at x = mean((Δ + ξ)² − ξ²).
        let mut worst = f64::NEG_INFINITY;
        for &x in &xs {
            let diff = f(x) - f_star.eval(x);
            let mut acc = 0.0;
            for _ in 0..draws {
                let xi = scm::H_WEIGHT * rng.random_range(-1.0..=1.0) + scm::EPS_Y_WEIGHT * rng.random_range(-1.0..=1.0);
                acc += (diff + xi).powi(2) - xi * xi;
            }
            worst = worst.max(acc / draws as f64);
        }
        let bound = check_bound_bounded_derivative(delta, k, XI_SECOND_MOMENT, ConfoundingKind::ConfoundingRemoving, 0.0)?;
        rows.push(ScenarioRow::new(
            format!("bound_mc/removing/{j}"),
            "turned_extension",
            worst,
            bound,
            worst <= bound,
        ));
    }
    Ok(rows)
}

/// Shifts of X in `[0, δ]` in an unconfounded model. The candidate is
/// `f + e` (so its minimax error is `e²`); the alternative model turns `f`
/// away outside the support.
fn mc_preserving_scenarios(cfg: &SuiteConfig) -> Result<Vec<ScenarioRow>, TheoryError> {
    let alpha = AlphaConfig::defaults()[0];
    let s = support_half_width(&alpha);
    let mut rows = Vec::new();
    for (j, &(k, delta, e)) in [(1.0, 0.5, 0.1), (2.0, 0.3, 0.0), (0.5, 1.0, 0.3)].iter().enumerate() {
        let f = move |x: f64| k * x.sin();
        let f_tilde = TurnedExtension { f, s, k, eta: 0.1 * delta };
        let mut rng = substream(cfg.seed, 50 + j as u64);
        let shifts = linspace(0.0, delta, 21);
        let draws = (cfg.mc_draws / 20).max(1000);
        let mut worst = f64::NEG_INFINITY;
        for &c in &shifts {
            let mut acc = 0.0;
            for _ in 0..draws {
                let u: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
                let x = alpha.x_of(u[0], u[1], u[2]) + c;
                let xi = scm::H_WEIGHT * u[1] + scm::EPS_Y_WEIGHT * u[3];
                let diff = f_tilde.eval(x) - (f(x) + e);
                acc += (diff + xi).powi(2) - xi * xi;
            }
            worst = worst.max(acc / draws as f64);
        }
        let bound = check_bound_bounded_derivative(delta, k, XI_SECOND_MOMENT, ConfoundingKind::ConfoundingPreserving, e * e)?;
        rows.push(ScenarioRow::new(
            format!("bound_mc/preserving/{j}"),
            "shifted_candidate",
            worst,
            bound,
            worst <= bound,
        ));
    }
    Ok(rows)
}

/// Extrapolation and instrument-intervention counterexamples.
pub fn suite_constructions(cfg: &SuiteConfig) -> Result<Vec<ScenarioRow>, TheoryError> {
    let mut rows = Vec::new();
    let alpha = AlphaConfig::defaults()[1];
    let s = support_half_width(&alpha);
    for (j, &c) in [1.0, 5.0].iter().enumerate() {
        let mut rng = substream(cfg.seed, 60 + j as u64);
        let f = CausalFunction::sample(&alpha, &mut rng);
        let alt = impossibility_demo_extrapolation(c, (-s, s), (s, s + 2.0), XI_SECOND_MOMENT)?;
        // The candidate is the true causal function itself.
        let gap = extrapolation_gap_mc(&alt, &f, |x| f.eval(x), cfg.mc_draws, &mut rng);
        rows.push(ScenarioRow::new(
            format!("extrapolation/{j}/offset={:.6}", alt.offset),
            "f",
            gap,
            c,
            gap >= 0.95 * c,
        ));
    }
    for (j, &(b_bar, c)) in [(0.0, 10.0), (2.0, 10.0), (1.5, 1.0)].iter().enumerate() {
        let model = NonlinearAScm { beta: 1.0, gamma: 1.0, var_x: 1.0, var_y: 1.0, var_h: 0.5 };
        let demo = impossibility_demo_int_a(&model, b_bar, c)?;
        let mut rng = substream(cfg.seed, 70 + j as u64);
        let gap = int_a_gap_mc(&model, &demo, b_bar, cfg.mc_draws, &mut rng);
        rows.push(ScenarioRow::new(
            format!("int_a/{j}/n={}", demo.n),
            format!("b={b_bar}"),
            gap,
            c,
            demo.gap >= c && gap >= 0.95 * c,
        ));
        rows.push(ScenarioRow::new(
            format!("int_a/{j}/direction"),
            "beta",
            demo.directional_fd,
            demo.directional_limit + 1e-3,
            demo.directional_fd <= demo.directional_limit + 1e-3,
        ));
    }
    Ok(rows)
}

/// Minimax trends under shifts: the minimizer approaches β as the shift
/// range grows, differs from β for any bounded range, and is OLS without
/// interventions.
pub fn suite_minimax_trends() -> Result<Vec<ScenarioRow>, TheoryError> {
    let scm = LinearScm::new(1.0, 1.0, 1.0, [1.0, 1.0, 1.0, 1.0])?;
    let mut rows = Vec::new();
    let mut prev = f64::INFINITY;
    for (j, &k) in [1.0, 10.0, 100.0, 1000.0].iter().enumerate() {
        let set = [InterventionFamily::Shifts { lo: 0.0, hi: k }];
        let (b_star, risk) = refined_minimax(&scm, 0.0, 2.0, &set)?;
        let dist = (b_star - scm.beta).abs();
        let exact = scm.var_h / (scm.x_second_moment() + k * k);
        rows.push(ScenarioRow::new(
            format!("minimax_trend/{j}/K={k}"),
            format!("b={b_star:.9}"),
            risk,
            exact,
            dist < prev && dist > 0.0 && (dist - exact).abs() <= 1e-6 * exact.max(1e-3),
        ));
        prev = dist;
    }
    let obs = [InterventionFamily::Point(LinearIntervention::Observational)];
    let (b_star, risk) = refined_minimax(&scm, 0.0, 2.0, &obs)?;
    rows.push(ScenarioRow::new(
        "minimax_trend/observational",
        format!("b={b_star:.9}"),
        risk,
        scm.ols(),
        (b_star - scm.ols()).abs() <= 1e-6,
    ));
    Ok(rows)
}

/// Every check of the theory suite.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<ScenarioRow>, TheoryError> {
    let mut rows = suite_causal_risk(cfg)?;
    rows.extend(suite_non_identifiability()?);
    rows.extend(suite_minimax_bound(cfg)?);
    rows.extend(suite_minimax_trends()?);
    rows.extend(suite_bounded_derivative(cfg)?);
    rows.extend(suite_constructions(cfg)?);
    rows.extend(suite_mc_crosscheck(cfg)?);
    Ok(rows)
}

pub fn write_rows_csv<W: std::io::Write>(rows: &[ScenarioRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "scenario,candidate,worst_case_risk,bound,pass")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.scenario,
            r.candidate,
            crate::data::fmt17(r.worst_case_risk),
            crate::data::fmt17(r.bound),
            r.pass
        )?;
    }
    Ok(())
}
