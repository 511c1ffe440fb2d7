//! Simulation from the structural model
//!
//! ```text
//! A = ε_A,  H = ε_H,  X = α_A A + α_H H + α_ε ε_X,  Y = f(X) + 0.3 H + 0.2 ε_Y
//! ```
//!
//! with all noise terms uniform on `[-1, 1]`. The causal function is a
//! natural cubic spline on `[q_min, q_max]` (the 5% and 95% quantiles of X),
//! linear outside, optionally bent by one-sided quadratics.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

/// Weight of the latent confounder in Y.
pub const H_WEIGHT: f64 = 0.3;
/// Weight of the independent noise in Y.
pub const EPS_Y_WEIGHT: f64 = 0.2;
/// `E[ξ²]` for `ξ = 0.3 H + 0.2 ε_Y` with uniform noise (variance 1/3 each).
pub const XI_SECOND_MOMENT: f64 = 0.13 / 3.0;

/// Number of draws in the quantile pre-simulation.
pub const QUANTILE_DRAWS: usize = 1_000_000;
const QUANTILE_SEED: u64 = 0x51AD_0C0F;

/// Knots of the causal natural spline, both ends included.
const CAUSAL_KNOTS: usize = 5;
/// Dimension of the natural-spline space without intercept.
pub const CAUSAL_BASIS: usize = CAUSAL_KNOTS - 1;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ScmError {
    #[error("alpha = ({0}, {1}, {2}) must be nonnegative with unit Euclidean norm")]
    BadAlpha(f64, f64, f64),

    #[error("curvature bound kappa must be finite and nonnegative, got {0}")]
    BadKappa(f64),

    #[error("sample size must be positive")]
    EmptySample,

    #[error("intervention value must be finite, got {0}")]
    BadIntervention(f64),

    #[error("confounding scale must be positive, got {0}")]
    BadConfoundingScale(f64),
}

/// Structural coefficients of X.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaConfig {
    pub alpha_a: f64,
    pub alpha_h: f64,
    pub alpha_eps: f64,
}

impl AlphaConfig {
    pub fn new(alpha_a: f64, alpha_h: f64, alpha_eps: f64) -> Result<Self, ScmError> {
        // Unit norm keeps Var(X) = 1/3 in every configuration.
        let v = [alpha_a, alpha_h, alpha_eps];
        let norm2: f64 = v.iter().map(|a| a * a).sum();
        if !v.iter().all(|a| a.is_finite() && *a >= 0.0) || (norm2 - 1.0).abs() > 1e-10 {
            return Err(ScmError::BadAlpha(alpha_a, alpha_h, alpha_eps));
        }
        Ok(Self { alpha_a, alpha_h, alpha_eps })
    }

    /// The three settings compared in the experiments: unconfounded,
    /// balanced, and strongly confounded without independent X noise.
    pub fn defaults() -> [AlphaConfig; 3] {
        let s13 = (1.0f64 / 3.0).sqrt();
        let s23 = (2.0f64 / 3.0).sqrt();
        [
            AlphaConfig { alpha_a: s23, alpha_h: 0.0, alpha_eps: s13 },
            AlphaConfig { alpha_a: s13, alpha_h: s13, alpha_eps: s13 },
            AlphaConfig { alpha_a: s13, alpha_h: s23, alpha_eps: 0.0 },
        ]
    }

    fn key(&self) -> [u64; 3] {
        [self.alpha_a.to_bits(), self.alpha_h.to_bits(), self.alpha_eps.to_bits()]
    }

    pub fn x_of(&self, a: f64, h: f64, eps: f64) -> f64 {
        self.alpha_a * a + self.alpha_h * h + self.alpha_eps * eps
    }
}

/// `(q_min, q_max)` of X, estimated once per configuration from
/// [`QUANTILE_DRAWS`] draws with a fixed seed.
pub fn x_quantiles(alpha: &AlphaConfig) -> (f64, f64) {
    static CACHE: OnceLock<Mutex<HashMap<[u64; 3], (f64, f64)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(q) = cache.lock().unwrap().get(&alpha.key()) {
        return *q;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(QUANTILE_SEED);
    let mut xs: Vec<f64> = (0..QUANTILE_DRAWS)
        .map(|_| {
            let (a, h, e) = (unif(&mut rng), unif(&mut rng), unif(&mut rng));
            alpha.x_of(a, h, e)
        })
        .collect();
    xs.sort_by(f64::total_cmp);
    let q = (quantile_sorted(&xs, 0.05), quantile_sorted(&xs, 0.95));
    cache.lock().unwrap().insert(alpha.key(), q);
    q
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

fn unif<R: Rng>(rng: &mut R) -> f64 {
    rng.random_range(-1.0..=1.0)
}

/// Natural cubic spline basis through equidistant knots on `[lo, hi]`
/// (truncated-power construction), vanishing at `lo`. Each function is
/// scaled to unit sup-norm over `[lo, hi]`, so random coefficients give
/// functions of comparable size whatever the range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalSpline {
    knots: Vec<f64>,
    scale: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(lo: f64, hi: f64) -> Self {
        let knots: Vec<f64> = (0..CAUSAL_KNOTS)
            .map(|i| lo + (hi - lo) * i as f64 / (CAUSAL_KNOTS - 1) as f64)
            .collect();
        let mut basis = Self { knots, scale: vec![1.0; CAUSAL_BASIS] };
        let grid: Vec<f64> = (0..=2000).map(|i| lo + (hi - lo) * i as f64 / 2000.0).collect();
        for j in 0..CAUSAL_BASIS {
            let sup = grid.iter().map(|&x| basis.raw(j, x).abs()).fold(0.0, f64::max);
            basis.scale[j] = 1.0 / sup;
        }
        basis
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn d(&self, k: usize, x: f64) -> f64 {
        let kk = self.knots.len();
        let cube = |t: f64| t.max(0.0).powi(3);
        (cube(x - self.knots[k]) - cube(x - self.knots[kk - 1])) / (self.knots[kk - 1] - self.knots[k])
    }

    fn raw(&self, j: usize, x: f64) -> f64 {
        if j == 0 {
            return x - self.knots[0];
        }
        // N_{j+1} = d_{j-1} − d_{K-2}; both terms vanish at the first knot.
        let kk = self.knots.len();
        self.d(j - 1, x) - self.d(kk - 2, x)
    }

    pub fn eval(&self, j: usize, x: f64) -> f64 {
        self.raw(j, x) * self.scale[j]
    }

    pub fn combine(&self, coef: &[f64], x: f64) -> f64 {
        coef.iter().enumerate().map(|(j, c)| c * self.eval(j, x)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalKind {
    NaturalSpline,
    SplineWithCurvedTails,
}

/// A causal function `f`: a natural spline plus optional one-sided
/// quadratic bends outside `[q_min, q_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalFunction {
    pub kind: CausalKind,
    pub spline: NaturalSpline,
    pub coef: Vec<f64>,
    pub q_min: f64,
    pub q_max: f64,
    pub k1: f64,
    pub k2: f64,
}

impl CausalFunction {
    pub fn eval(&self, x: f64) -> f64 {
        let base = self.spline.combine(&self.coef, x);
        let below = (x - self.q_min).min(0.0);
        let above = (x - self.q_max).max(0.0);
        base + 0.5 * self.k1 * below * below + 0.5 * self.k2 * above * above
    }

    /// Natural spline with coefficients uniform on `[-1, 1]`.
    pub fn sample<R: Rng>(alpha: &AlphaConfig, rng: &mut R) -> Self {
        let (q_min, q_max) = x_quantiles(alpha);
        let spline = NaturalSpline::new(q_min, q_max);
        let coef = (0..CAUSAL_BASIS).map(|_| unif(rng)).collect();
        Self {
            kind: CausalKind::NaturalSpline,
            spline,
            coef,
            q_min,
            q_max,
            k1: 0.0,
            k2: 0.0,
        }
    }

    /// Bends the tails with curvatures uniform on `[-κ, κ]`. `κ = 0`
    /// returns the input unchanged and draws nothing.
    pub fn curvature_violation<R: Rng>(&self, kappa: f64, rng: &mut R) -> Result<Self, ScmError> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(ScmError::BadKappa(kappa));
        }
        if kappa == 0.0 {
            return Ok(self.clone());
        }
        Ok(Self {
            kind: CausalKind::SplineWithCurvedTails,
            k1: rng.random_range(-kappa..=kappa),
            k2: rng.random_range(-kappa..=kappa),
            ..self.clone()
        })
    }

    /// [`CausalFunction::sample`] followed by [`CausalFunction::curvature_violation`].
    pub fn random<R: Rng>(alpha: &AlphaConfig, kappa: f64, rng: &mut R) -> Result<Self, ScmError> {
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(ScmError::BadKappa(kappa));
        }
        Self::sample(alpha, rng).curvature_violation(kappa, rng)
    }
}

/// Interventions on the structural model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Intervention {
    None,
    HardOnX(f64),
    ShiftOnX(f64),
    HardOnA(f64),
    /// Replace the X assignment by `value · H`.
    ConfoundingScale(f64),
}

impl Intervention {
    fn value(&self) -> f64 {
        match *self {
            Intervention::None => 0.0,
            Intervention::HardOnX(v)
            | Intervention::ShiftOnX(v)
            | Intervention::HardOnA(v)
            | Intervention::ConfoundingScale(v) => v,
        }
    }
}

/// A model instance: structural coefficients plus a causal function.
#[derive(Debug, Clone, PartialEq)]
pub struct Scm {
    pub alpha: AlphaConfig,
    pub f: CausalFunction,
}

impl Scm {
    pub fn random<R: Rng>(alpha: AlphaConfig, kappa: f64, rng: &mut R) -> Result<Self, ScmError> {
        let f = CausalFunction::random(&alpha, kappa, rng)?;
        Ok(Self { alpha, f })
    }

    /// Draws `n` observations. H is attached only when `keep_latent` is set.
    pub fn sample<R: Rng>(
        &self,
        n: usize,
        intervention: Intervention,
        keep_latent: bool,
        rng: &mut R,
    ) -> Result<Dataset, ScmError> {
        if n == 0 {
            return Err(ScmError::EmptySample);
        }
        if !intervention.value().is_finite() {
            return Err(ScmError::BadIntervention(intervention.value()));
        }
        if let Intervention::ConfoundingScale(s) = intervention {
            if s <= 0.0 {
                return Err(ScmError::BadConfoundingScale(s));
            }
        }
        let mut d = Dataset {
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            a: Vec::with_capacity(n),
            h: keep_latent.then(|| Vec::with_capacity(n)),
        };
        for _ in 0..n {
            let (ea, eh, ex, ey) = (unif(rng), unif(rng), unif(rng), unif(rng));
            let a = match intervention {
                Intervention::HardOnA(v) => v,
                _ => ea,
            };
            let h = eh;
            let x = match intervention {
                Intervention::HardOnX(v) => v,
                Intervention::ShiftOnX(c) => self.alpha.x_of(a, h, ex) + c,
                Intervention::ConfoundingScale(s) => s * h,
                _ => self.alpha.x_of(a, h, ex),
            };
            let y = self.f.eval(x) + H_WEIGHT * h + EPS_Y_WEIGHT * ey;
            d.x.push(x);
            d.y.push(y);
            d.a.push(a);
            if let Some(hs) = d.h.as_mut() {
                hs.push(h);
            }
        }
        Ok(d)
    }
}

/// Monte Carlo estimate of `E[ξ²]` from `n` draws.
pub fn xi_second_moment_mc(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..n)
        .map(|_| {
            let xi = H_WEIGHT * unif(&mut rng) + EPS_Y_WEIGHT * unif(&mut rng);
            xi * xi
        })
        .sum();
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn natural_second_derivative(s: &NaturalSpline, j: usize, x: f64) -> f64 {
        let h = 1e-4;
        (s.eval(j, x + h) - 2.0 * s.eval(j, x) + s.eval(j, x - h)) / (h * h)
    }

    #[test]
    fn natural_spline_is_linear_outside_and_vanishes_at_left_end() {
        let s = NaturalSpline::new(-1.0, 2.0);
        for j in 0..CAUSAL_BASIS {
            assert!(s.eval(j, -1.0).abs() < 1e-14);
            for x in [-3.0, -1.5, 2.5, 4.0] {
                assert!(natural_second_derivative(&s, j, x).abs() < 1e-5, "j {j} x {x}");
            }
            let sup = (0..=2000)
                .map(|i| s.eval(j, -1.0 + 3.0 * i as f64 / 2000.0).abs())
                .fold(0.0, f64::max);
            assert!((sup - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_functions_are_independent() {
        let s = NaturalSpline::new(0.0, 1.0);
        let pts = [0.1, 0.35, 0.6, 0.9];
        let m = nalgebra::DMatrix::from_fn(4, 4, |i, j| s.eval(j, pts[i]));
        assert!(m.determinant().abs() > 1e-6);
    }

    #[test]
    fn quantiles_of_unconfounded_setting() {
        // X = √(2/3)A + √(1/3)ε: symmetric with variance 1/3.
        let alpha = AlphaConfig::defaults()[0];
        let (lo, hi) = x_quantiles(&alpha);
        assert!((lo + hi).abs() < 5e-3);
        assert!(hi > 0.8 && hi < 1.05, "{hi}");
        assert_eq!(x_quantiles(&alpha), (lo, hi));
    }

    #[test]
    fn quantiles_symmetric_without_x_noise() {
        let (lo, hi) = x_quantiles(&AlphaConfig::defaults()[2]);
        assert!((lo + hi).abs() <= 0.02);
    }

    #[test]
    fn zero_coefficients_give_zero_function() {
        let mut f = CausalFunction::sample(&AlphaConfig::defaults()[1], &mut ChaCha8Rng::seed_from_u64(2));
        f.coef = vec![0.0; CAUSAL_BASIS];
        assert!([-3.0, 0.0, 0.4, 5.0].iter().all(|&x| f.eval(x) == 0.0));
    }

    #[test]
    fn tails_of_sampled_functions() {
        let h = 1e-4;
        let fd2 = |f: &CausalFunction, x: f64| (f.eval(x + h) - 2.0 * f.eval(x) + f.eval(x - h)) / (h * h);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let base = CausalFunction::sample(&AlphaConfig::defaults()[0], &mut rng);
            assert!(fd2(&base, base.q_min - 1.0).abs() < 1e-4);
            assert!(fd2(&base, base.q_max + 1.0).abs() < 1e-4);
            assert_eq!(base.curvature_violation(0.0, &mut rng).unwrap(), base);

            let bent = base.curvature_violation(3.0, &mut rng).unwrap();
            assert_eq!(bent.kind, CausalKind::SplineWithCurvedTails);
            assert!((fd2(&bent, bent.q_max + 1.0) - bent.k2).abs() < 1e-4);
            assert!((fd2(&bent, bent.q_min - 1.0) - bent.k1).abs() < 1e-4);
            for t in [0.25, 1.0, 2.0] {
                let gap = bent.eval(bent.q_max + t) - base.eval(base.q_max + t);
                assert!((gap - 0.5 * bent.k2 * t * t).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn xi_moment_constant() {
        assert!((XI_SECOND_MOMENT - (0.09 + 0.04) / 3.0).abs() < 1e-15);
        assert!((xi_second_moment_mc(200_000, 3) - XI_SECOND_MOMENT).abs() < 1e-3);
    }

    #[test]
    fn interventions_act_on_the_right_variable() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scm = Scm::random(AlphaConfig::defaults()[1], 0.0, &mut rng).unwrap();
        let d = scm.sample(50, Intervention::HardOnX(1.5), true, &mut rng).unwrap();
        assert!(d.x.iter().all(|&x| x == 1.5));
        let d = scm.sample(50, Intervention::HardOnA(-0.7), false, &mut rng).unwrap();
        assert!(d.a.iter().all(|&a| a == -0.7));
        assert!(d.h.is_none());
        let d = scm.sample(50, Intervention::ConfoundingScale(2.0), true, &mut rng).unwrap();
        let h = d.h.as_ref().unwrap();
        assert!(d.x.iter().zip(h).all(|(x, h)| *x == 2.0 * h));
    }

    #[test]
    fn shift_moves_x_exactly() {
        let scm = Scm::random(AlphaConfig::defaults()[2], 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let d0 = scm.sample(30, Intervention::None, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let d1 = scm.sample(30, Intervention::ShiftOnX(0.75), false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (a, b) in d0.x.iter().zip(&d1.x) {
            assert!((b - a - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(AlphaConfig::new(0.0, 0.0, 0.0).is_err());
        assert!(AlphaConfig::new(f64::NAN, 1.0, 0.0).is_err());
        assert!(AlphaConfig::new(-1.0, 0.0, 0.0).is_err());
        assert!(AlphaConfig::new(0.6, 0.8, 0.0).is_ok());
        for a in AlphaConfig::defaults() {
            assert_eq!(AlphaConfig::new(a.alpha_a, a.alpha_h, a.alpha_eps), Ok(a));
        }
        let scm = Scm::random(AlphaConfig::defaults()[0], 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(scm.sample(0, Intervention::None, false, &mut rng), Err(ScmError::EmptySample));
        assert!(scm.sample(3, Intervention::HardOnX(f64::INFINITY), false, &mut rng).is_err());
        assert!(Scm::random(AlphaConfig::defaults()[0], -1.0, &mut rng).is_err());
        assert_eq!(
            scm.sample(3, Intervention::ConfoundingScale(0.0), false, &mut rng),
            Err(ScmError::BadConfoundingScale(0.0))
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn causal_function_is_unaffected_by_bends_inside(seed in any::<u64>(), t in 0.0f64..=1.0) {
            let alpha = AlphaConfig::defaults()[0];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut f = CausalFunction::random(&alpha, 2.0, &mut rng).unwrap();
            let x = f.q_min + t * (f.q_max - f.q_min);
            let bent = f.eval(x);
            f.k1 = 0.0;
            f.k2 = 0.0;
            prop_assert_eq!(bent, f.eval(x));
        }

        #[test]
        fn samples_are_deterministic_per_seed(seed in any::<u64>()) {
            let alpha = AlphaConfig::defaults()[1];
            let scm = Scm::random(alpha, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let a = scm.sample(10, Intervention::None, true, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
            let b = scm.sample(10, Intervention::None, true, &mut ChaCha8Rng::seed_from_u64(seed ^ 1)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
