//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints a PASS/FAIL line even when stdout is captured by
//! `cargo test`; exits nonzero if any criterion fails.
//!
//! Run alone with `cargo test --test acceptance`.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use nile::data::Dataset;
use nile::estimator::{nile_fit, NileFit, NileOptions, NileProblem};
use nile::experiments::{run_experiment, ExperimentConfig, ExperimentResult, Method};
use nile::ivtests::{IvTest, TestKind};
use nile::penreg::{cv_penalty, CvConfig, HatSpec, Smoother};
use nile::scm::{xi_second_moment_mc, AlphaConfig, Intervention, Scm, XI_SECOND_MOMENT};
use nile::splines::SplineBasis;
use nile::theory::{run_suite, ScenarioRow, SuiteConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

fn noise_floor() -> Outcome {
    let est = xi_second_moment_mc(1_000_000, 20_240_601);
    let err = (est - XI_SECOND_MOMENT).abs();
    outcome(err <= 5e-4, format!("MC {est:.6} vs {XI_SECOND_MOMENT:.6}, |diff| {err:.2e} (tol 5e-4)"))
}

fn lambda_regimes(res: &ExperimentResult) -> Outcome {
    let means: Vec<f64> = res.mean_lambda.iter().map(|m| m.unwrap_or(f64::NAN)).collect();
    let pass = means[0] <= 0.2 && means[1..].iter().all(|m| (1.0..=9.0).contains(m));
    outcome(
        pass,
        format!("mean lambda* per config {means:.3?} (need <= 0.2, then [1, 9])"),
    )
}

fn risk_curves(res: &ExperimentResult) -> Vec<(String, Outcome)> {
    let mut out = Vec::new();

    let mut worst_drop = 0.0f64;
    for c in 0..3 {
        for m in [Method::Nile, Method::OlsSpline] {
            for w in res.curve(c, m).windows(2) {
                worst_drop = worst_drop.max(w[0].mean_risk - w[1].mean_risk);
            }
        }
    }
    out.push((
        "3a risk curves nondecreasing".into(),
        outcome(worst_drop <= 0.0, format!("largest decrease {worst_drop:.3e}")),
    ));

    let rel = res
        .curve(0, Method::Nile)
        .iter()
        .zip(res.curve(0, Method::OlsSpline))
        .map(|(n, o)| (n.mean_risk - o.mean_risk).abs() / o.mean_risk)
        .fold(0.0f64, f64::max);
    out.push((
        "3b unconfounded NILE ~ OLS".into(),
        outcome(rel <= 0.10, format!("max relative difference {rel:.4} (tol 0.10)")),
    ));

    let last = |m| res.curve(2, m).last().map(|c| (c.strength, c.mean_risk)).unwrap();
    let (s, nile) = last(Method::Nile);
    let (_, ols) = last(Method::OlsSpline);
    out.push((
        "3c confounded NILE beats OLS at strength 2".into(),
        outcome(s == 2.0 && nile < ols, format!("strength {s}: NILE {nile:.4} vs OLS {ols:.4}")),
    ));
    out
}

/// Strong instrument, X = A + H/4, truth a cubic spline with six
/// coefficients on [-1.5, 1.5].
fn consistency() -> Outcome {
    let truth = SplineBasis::cubic(-1.5, 1.5, 6).unwrap();
    let theta0: Vec<f64> = (0..6).map(|j| (1.3 * j as f64).sin()).collect();
    let mut medians = Vec::new();
    for n in [200usize, 1000, 5000] {
        let errs: Vec<f64> = (0..20u64)
            .into_par_iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(r * 7919 + n as u64);
                let mut d = Dataset::default();
                for _ in 0..n {
                    let a: f64 = rng.random_range(-1.0..=1.0);
                    let h: f64 = rng.random_range(-1.0..=1.0);
                    let e: f64 = rng.random_range(-1.0..=1.0);
                    let x = a + 0.25 * h;
                    d.x.push(x);
                    d.a.push(a);
                    d.y.push(truth.eval_f_eta(&theta0, x).unwrap() + 0.3 * h + 0.2 * e);
                }
                let fit = nile_fit(&d, &NileOptions { seed: r, ..Default::default() }).unwrap();
                let (lo, hi) = (fit.basis_b.a(), fit.basis_b.b());
                (0..=1000)
                    .map(|i| {
                        let x = lo + (hi - lo) * i as f64 / 1000.0;
                        (fit.predict(x) - truth.eval_f_eta(&theta0, x).unwrap()).abs()
                    })
                    .fold(0.0, f64::max)
            })
            .collect();
        medians.push(median(errs));
    }
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    outcome(
        decreasing && medians[2] <= 0.1,
        format!("median sup error at n = 200, 1000, 5000: {medians:.4?} (need decreasing, last <= 0.1)"),
    )
}

fn rejection_rate(kind: TestKind) -> f64 {
    let alpha = AlphaConfig::defaults()[1];
    let rejections: usize = (0..500u64)
        .into_par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(m);
            let scm = Scm::random(alpha, 0.0, &mut rng).unwrap();
            let d = scm.sample(200, Intervention::None, false, &mut rng).unwrap();
            let lo = d.a.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = d.a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let basis = SplineBasis::cubic(lo, hi, 50).unwrap();
            let c = basis.design_matrix(&d.a, 0).unwrap();
            let pen = basis.curvature_penalty();
            let y = DVector::from_vec(d.y.clone());
            let delta = cv_penalty(&c, &pen, &y, &CvConfig { seed: m, ..Default::default() }).unwrap();
            let test = IvTest::new(kind, &c, &pen, delta, 0.05).unwrap();
            let r = DVector::from_iterator(200, d.x.iter().zip(&d.y).map(|(x, y)| y - scm.f.eval(*x)));
            test.evaluate(&r).unwrap().reject as usize
        })
        .sum();
    rejections as f64 / 500.0
}

fn test_level() -> Vec<(String, Outcome)> {
    let t2 = rejection_rate(TestKind::T2);
    let t1 = rejection_rate(TestKind::T1);
    vec![
        (
            "5 T2 level".into(),
            outcome((0.01..=0.12).contains(&t2), format!("rejection rate {t2:.3} (need [0.01, 0.12])")),
        ),
        (
            "5 T1 level".into(),
            outcome((0.02..=0.10).contains(&t1), format!("rejection rate {t1:.3} (need [0.02, 0.10])")),
        ),
    ]
}

fn theory_suite() -> Vec<(String, Outcome)> {
    let rows = run_suite(&SuiteConfig::default()).expect("theory suite runs");
    let groups: [(&str, &[&str]); 5] = [
        ("6a causal risk equals noise floor", &["causal_risk/", "mc_crosscheck/"]),
        ("6b identification failure numbers", &["non_identifiability/"]),
        ("6c bound at minimax solutions", &["minimax_bound/", "minimax_trend/"]),
        ("6d derivative bounds", &["bound_arith/", "bound_mc/"]),
        ("6e impossibility constructions", &["extrapolation/", "int_a/"]),
    ];
    let covered = rows
        .iter()
        .filter(|r| groups.iter().any(|(_, p)| p.iter().any(|p| r.scenario.starts_with(p))))
        .count();
    assert_eq!(covered, rows.len(), "every scenario belongs to a group");
    groups
        .iter()
        .map(|(name, prefixes)| {
            let mine: Vec<&ScenarioRow> = rows
                .iter()
                .filter(|r| prefixes.iter().any(|p| r.scenario.starts_with(p)))
                .collect();
            let failed: Vec<&str> = mine.iter().filter(|r| !r.pass).map(|r| r.scenario.as_str()).collect();
            let detail = if failed.is_empty() {
                format!("{} scenarios", mine.len())
            } else {
                format!("{} of {} failed: {}", failed.len(), mine.len(), failed.join(", "))
            };
            (name.to_string(), outcome(!mine.is_empty() && failed.is_empty(), detail))
        })
        .collect()
}

fn simulated(seed: u64, config: usize, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scm = Scm::random(AlphaConfig::defaults()[config], 0.0, &mut rng).unwrap();
    scm.sample(n, Intervention::None, false, &mut rng).unwrap()
}

fn greville(basis: &SplineBasis) -> Vec<f64> {
    let t = basis.knots();
    (0..basis.k()).map(|j| (t[j + 1] + t[j + 2] + t[j + 3]) / 3.0).collect()
}

fn properties() -> Vec<(String, Outcome)> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut out = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let a: f64 = rng.random_range(-5.0..0.0);
        let b = a + rng.random_range(0.1..10.0);
        let k = rng.random_range(4..60);
        let basis = SplineBasis::cubic(a, b, k).unwrap();
        for _ in 0..20 {
            let x = rng.random_range(a..=b);
            let s: f64 = basis.eval(x, 0).unwrap().iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    out.push(("7 spline partition of unity".into(), outcome(worst <= 1e-12, format!("max |sum - 1| {worst:.2e}"))));

    let mut worst = 0.0f64;
    for k in [4usize, 10, 50] {
        let basis = SplineBasis::cubic(-2.0, 3.0, k).unwrap();
        let pen = basis.curvature_penalty();
        let scale = pen.matrix().norm();
        let ones = vec![1.0; k];
        let line = greville(&basis);
        worst = worst.max(pen.quad_form(&ones).abs() / scale).max(pen.quad_form(&line).abs() / scale);
    }
    out.push(("7 penalty null space".into(), outcome(worst <= 1e-10, format!("max relative quad form {worst:.2e}"))));

    let d = simulated(5, 1, 200);
    let basis = SplineBasis::cubic(-1.8, 1.8, 30).unwrap();
    let c = basis.design_matrix(&d.a, 0).unwrap();
    let pen = basis.curvature_penalty();
    let mut spectrum_ok = true;
    let mut detail = String::new();
    for w in [1e-4, 1e-1, 10.0] {
        let s = Smoother::new(HatSpec { design: &c, penalty: &pen, weight: w }).unwrap();
        let traces: Vec<f64> = (1..=4).map(|p| s.trace_power(p)).collect();
        let ok = traces[0] <= 30.0 + 1e-8 && traces.windows(2).all(|t| t[1] <= t[0] + 1e-9) && traces[3] >= 0.0;
        let v = DVector::from_fn(200, |_, _| rng.random_range(-1.0..1.0));
        let contract = s.apply(&v).norm() <= v.norm() * (1.0 + 1e-10);
        spectrum_ok &= ok && contract;
        detail.push_str(&format!("w={w}: tr {:.3} ", traces[0]));
    }
    out.push(("7 hat operator spectrum in [0, 1]".into(), outcome(spectrum_ok, detail)));

    let d = simulated(9, 2, 200);
    let lo = d.x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = d.x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bb = SplineBasis::cubic(lo, hi, 20).unwrap();
    let alo = d.a.iter().copied().fold(f64::INFINITY, f64::min);
    let ahi = d.a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cb = SplineBasis::cubic(alo, ahi, 20).unwrap();
    let b = bb.design_matrix(&d.x, 0).unwrap();
    let c = cb.design_matrix(&d.a, 0).unwrap();
    let y = DVector::from_vec(d.y.clone());
    let (gamma, delta) = (1e-3, 1e-2);
    let problem = NileProblem::new(
        b.clone(),
        &c,
        y.clone(),
        bb.curvature_penalty(),
        &cb.curvature_penalty(),
        gamma,
        delta,
        TestKind::T2,
        0.05,
    )
    .unwrap();
    let p = Smoother::new(HatSpec { design: &c, penalty: &cb.curvature_penalty(), weight: delta }).unwrap();
    let pb = p.apply_columns(&b);
    let py = p.apply(&y);
    let mut worst = 0.0f64;
    for lambda in [0.0, 0.5, 3.0, 40.0] {
        let theta = problem.fit_theta(lambda, gamma).unwrap();
        let grad = b.tr_mul(&(&y - &b * &theta)) + (pb.tr_mul(&(&py - &pb * &theta)) * lambda)
            - bb.curvature_penalty().matrix() * &theta * gamma;
        let scale = b.tr_mul(&y).norm() + lambda * pb.tr_mul(&py).norm();
        worst = worst.max(grad.norm() / scale);
    }
    out.push((
        "7 normal-equation residuals".into(),
        outcome(worst <= 1e-7, format!("max relative gradient {worst:.2e}")),
    ));

    let lambdas: Vec<f64> = (0..60).map(|i| 1e-3 * 1.3f64.powi(i)).collect();
    let (test_v, tsls_v) = problem.monotonicity_violations(&lambdas).unwrap();
    out.push((
        "7 objective monotone in lambda".into(),
        outcome(
            test_v == 0 && tsls_v == 0,
            format!("{test_v} test-statistic and {tsls_v} TSLS-loss violations over {} lambdas", lambdas.len()),
        ),
    ));

    let fit_bits = |f: &NileFit| {
        let mut v: Vec<u64> = f.theta.iter().map(|t| t.to_bits()).collect();
        v.extend([f.gamma.to_bits(), f.delta.to_bits(), f.lambda_star.to_bits()]);
        v
    };
    let opts = NileOptions { seed: 4, ..Default::default() };
    let same_fit = fit_bits(&nile_fit(&d, &opts).unwrap()) == fit_bits(&nile_fit(&d, &opts).unwrap());
    let small = ExperimentConfig { n_models: 4, strengths: vec![0.0, 1.0, 2.0], ..Default::default() };
    let same_exp = run_experiment(&small).unwrap() == run_experiment(&small).unwrap();
    out.push((
        "7 deterministic reproducibility".into(),
        outcome(same_fit && same_exp, format!("fit identical: {same_fit}, experiment identical: {same_exp}")),
    ));
    out
}

fn report(name: &str, o: &Outcome, started: Instant, failures: &mut usize) {
    if !o.pass {
        *failures += 1;
    }
    println!(
        "{} {name}: {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed().as_secs_f64()
    );
}

fn main() {
    // Let `cargo test -- <filter>` style arguments through without effect;
    // `--list` must print nothing for test discovery.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut failures = 0;

    let t = Instant::now();
    report("1 noise floor constant", &noise_floor(), t, &mut failures);

    let t = Instant::now();
    let experiment = run_experiment(&ExperimentConfig::default()).expect("default experiment runs");
    println!("     default experiment: {} risk rows, {} failed fits [{:.1}s]", experiment.rows.len(), experiment.failures, t.elapsed().as_secs_f64());
    report("2 lambda* regimes", &lambda_regimes(&experiment), t, &mut failures);
    for (name, o) in risk_curves(&experiment) {
        report(&name, &o, t, &mut failures);
    }

    let t = Instant::now();
    report("4 consistency", &consistency(), t, &mut failures);

    let t = Instant::now();
    for (name, o) in test_level() {
        report(&name, &o, t, &mut failures);
    }

    let t = Instant::now();
    for (name, o) in theory_suite() {
        report(&name, &o, t, &mut failures);
    }

    let t = Instant::now();
    for (name, o) in properties() {
        report(&name, &o, t, &mut failures);
    }

    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
