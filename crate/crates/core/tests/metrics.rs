use fastslow_core::metrics::{
    bootstrap_w1, clt_verify, summarize_sweep, theoretical_bound, w1_vs_gaussian, CltOptions, WassersteinReport,
};
use fastslow_core::sde::{limit_gaussian_samples, ScaleRegime};
use fastslow_core::affine_oracle;
use proptest::prelude::*;

fn standard_normals(n: usize, seed: u64) -> Vec<f64> {
    limit_gaussian_samples(1.0f64, n, seed).unwrap()
}

#[test]
fn mean_shift_matches_quantile_coupling() {
    let z = standard_normals(10_000, 1);
    let w1 = w1_vs_gaussian(&z, 0.5, 1.0).unwrap();
    let boot = bootstrap_w1(&z, 0.5, 1.0, 400, 2).unwrap();
    assert!((w1 - 0.5).abs() <= 3.0 * boot.se, "w1={w1}, se={}", boot.se);
}

#[test]
fn scale_change_matches_quantile_coupling() {
    let z = standard_normals(10_000, 3);
    let exact = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
    let w1 = w1_vs_gaussian(&z, 0.0, 1.21).unwrap();
    let boot = bootstrap_w1(&z, 0.0, 1.21, 400, 4).unwrap();
    assert!((w1 - exact).abs() <= 3.0 * boot.se, "w1={w1}, exact={exact}, se={}", boot.se);
}

#[test]
fn empirical_distance_to_the_sampling_law_decays() {
    let small = standard_normals(10_000, 5);
    let large = standard_normals(100_000, 6);
    let w_small = w1_vs_gaussian(&small, 0.0, 1.0).unwrap();
    let w_large = w1_vs_gaussian(&large, 0.0, 1.0).unwrap();
    let se = bootstrap_w1(&large, 0.0, 1.0, 100, 7).unwrap().se;
    assert!(w_large <= 0.5 * w_small + se, "{w_large} vs {w_small}");
}

#[test]
fn report_gaps_and_domination() {
    let z: Vec<f64> = standard_normals(5_000, 8).iter().map(|v| 0.3 + 1.2 * v).collect();
    let r = WassersteinReport::from_samples(1.0, &z, 1.0, 200, 9).unwrap();
    assert!((r.mean_gap - 0.3).abs() < 0.06);
    assert!((r.sd_gap - 0.2).abs() < 0.05);
    assert!(r.w1 >= r.mean_gap - 0.5 * (r.ci_hi - r.ci_lo));
    assert!(r.ci_lo <= r.w1 && r.w1 <= r.ci_hi);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn w1_symmetries(
        samples in prop::collection::vec(-5.0f64..5.0, 2..60),
        mu in -2.0f64..2.0,
        sigma in 0.1f64..3.0,
        shift in -10.0f64..10.0,
        lambda in 0.1f64..10.0,
        rot in 0usize..60,
    ) {
        let base = w1_vs_gaussian(&samples, mu, sigma * sigma).unwrap();
        prop_assert!(base >= 0.0);

        let mut perm = samples.clone();
        perm.rotate_left(rot % samples.len());
        perm.reverse();
        prop_assert!((w1_vs_gaussian(&perm, mu, sigma * sigma).unwrap() - base).abs() <= 1e-12 * (1.0 + base));

        let shifted: Vec<f64> = samples.iter().map(|v| v + shift).collect();
        let ws = w1_vs_gaussian(&shifted, mu + shift, sigma * sigma).unwrap();
        prop_assert!((ws - base).abs() <= 1e-9 * (1.0 + base));

        let scaled: Vec<f64> = samples.iter().map(|v| v * lambda).collect();
        let wl = w1_vs_gaussian(&scaled, mu * lambda, (sigma * lambda).powi(2)).unwrap();
        prop_assert!((wl - lambda * base).abs() <= 1e-9 * (1.0 + lambda * base));
    }
}

#[test]
fn bound_at_the_equal_scale_example() {
    let r = ScaleRegime::new(0.01f64, 0.01, 1.0, 1.0).unwrap();
    let b = theoretical_bound(&r, 1.0, 0.1, 1.0, 1.0).unwrap();
    let q = 0.01f64.sqrt().sqrt();
    let hand = 2.0 * q + 0.01f64.powf(0.4) + 0.01f64.powf(0.4) + 2.0 * q + 2.0 * (-1.0f64 / 0.16).exp();
    assert!((b.value - hand).abs() < 1e-14, "{} vs {hand}", b.value);
}

#[test]
fn bound_decreases_as_eta_vanishes_at_fixed_epsilon() {
    let eps = 0.05;
    let mut prev = f64::INFINITY;
    for i in 0..40 {
        let eta = 0.05 * 0.8f64.powi(i);
        let r = ScaleRegime::new(eps, eta, f64::INFINITY, 1.0).unwrap();
        let b = theoretical_bound(&r, 1.0, 0.1, 1.0, 1.0).unwrap().value;
        assert!(b < prev);
        prev = b;
    }
    // remaining gap to the ε-terms is carried by η^{1/4} and (η/ε)^{1/2}
    let eta_min = 0.05 * 0.8f64.powi(39);
    let floor = eps.powf(0.25) + eps.powf(0.4);
    assert!(prev > floor && prev - floor < 2.0 * eta_min.powf(0.25));
}

#[test]
fn bound_vanishes_along_the_diagonal() {
    let mut prev = f64::INFINITY;
    for e in [1e-2, 1e-4, 1e-8, 1e-16] {
        let r = ScaleRegime::new(e, e, 1.0, 1.0).unwrap();
        let b = theoretical_bound(&r, 1.0, 0.1, 1.0, 1.0).unwrap().value;
        assert!(b < prev);
        prev = b;
    }
    assert!(prev < 1e-3);
}

#[test]
fn clt_runs_are_deterministic() {
    let model = affine_oracle::<f64>();
    let regime = ScaleRegime::new(0.05, 0.05, 1.0, 1.0).unwrap();
    let opts = CltOptions { bootstrap: 50, ..CltOptions::around(1.0) };
    let run = || clt_verify(&model, &regime, 1.0, 1.0, None, 400, &[0.5, 1.0], 11, &opts).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.reports.len(), 2);
    assert!((a.reports[1].sigma2 - 1.5 * (1.0 - (-2.0f64).exp())).abs() < 1e-5);
}

#[test]
fn sweep_summary_flags_and_envelope() {
    let mk = |w1: f64, lo: f64, hi: f64| WassersteinReport {
        t: 1.0,
        n: 100,
        w1,
        ci_lo: lo,
        ci_hi: hi,
        bootstrap_se: 0.01,
        mean_gap: 0.0,
        sd_gap: 0.0,
        sigma2: 1.0,
    };
    let pts = vec![
        (0.16, 0.16, mk(0.2, 0.18, 0.22)),
        (0.08, 0.08, mk(0.21, 0.19, 0.23)),
        (0.04, 0.04, mk(0.1, 0.02, 0.12)),
    ];
    let s = summarize_sweep(&pts, 1.0, 1.0, 1.0, 0.1).unwrap();
    assert!(s.decreasing);
    assert!(!s.dominated);
    assert_eq!(s.points.iter().filter(|p| p.noisy).count(), 1);
    assert!((s.points[0].envelope - 0.2).abs() < 1e-15);
}
