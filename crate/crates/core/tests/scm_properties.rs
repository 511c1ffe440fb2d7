use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Uniform};

use nile::scm::{xi_second_moment_mc, AlphaConfig, Intervention, Scm, XI_SECOND_MOMENT};

fn ks_distance(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[test]
fn hard_intervention_on_x_leaves_noise_distribution_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scm = Scm::random(AlphaConfig::defaults()[2], 0.0, &mut rng).unwrap();
    let resid = |x0: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        let d = scm.sample(10_000, Intervention::HardOnX(x0), false, rng).unwrap();
        d.y.iter().map(|y| y - scm.f.eval(x0)).collect()
    };
    let r0 = resid(0.0, &mut rng);
    let r2 = resid(2.0, &mut rng);
    // Two-sample KS critical value at the 0.1% level.
    let crit = 1.95 * (2.0 / 10_000.0f64).sqrt();
    assert!(ks_distance(r0, r2) < crit);
}

#[test]
fn observational_x_is_standardized() {
    for (i, alpha) in AlphaConfig::defaults().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let scm = Scm::random(*alpha, 0.0, &mut rng).unwrap();
        let d = scm.sample(200_000, Intervention::None, false, &mut rng).unwrap();
        let n = d.x.len() as f64;
        let mean = d.x.iter().sum::<f64>() / n;
        let var = d.x.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0 / 3.0).abs() <= 0.003, "config {i}: var {var}");
    }
}

#[test]
fn instrument_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scm = Scm::random(AlphaConfig::defaults()[1], 0.0, &mut rng).unwrap();
    let d = scm.sample(10_000, Intervention::None, false, &mut rng).unwrap();
    let u = Uniform::new(-1.0, 1.0).unwrap();
    let mut a = d.a.clone();
    a.sort_by(f64::total_cmp);
    let n = a.len() as f64;
    let ks = a
        .iter()
        .enumerate()
        .map(|(i, &v)| (u.cdf(v) - i as f64 / n).abs().max((u.cdf(v) - (i + 1) as f64 / n).abs()))
        .fold(0.0, f64::max);
    assert!(ks < 1.95 / n.sqrt());
}

#[test]
fn noise_floor_constant() {
    assert!((xi_second_moment_mc(1_000_000, 3) - XI_SECOND_MOMENT).abs() <= 5e-4);
}
