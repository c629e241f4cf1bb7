use fastslow_core::malliavin::quadruple::{analytic_with_edges, envelope_shape, KERNEL_EDGES};
use fastslow_core::malliavin::{quadruple_integral_analytic, quadruple_integral_check, quadruple_integral_quadrature};

/// Reference values at T = 1 from an independent adaptive quadrature
/// (scipy `dblquad` on the squared one-dimensional inner integral).
const FROZEN: [(f64, f64); 4] = [
    (2.0, 0.11055176055842757),
    (10.0, 0.0021375000522094656),
    (50.0, 1.9419999999454992e-05),
    (100.0, 2.463749999955619e-06),
];

#[test]
fn analytic_matches_frozen_reference() {
    for (k, v) in FROZEN {
        let a = quadruple_integral_analytic(k, 1.0);
        assert!((a - v).abs() <= 1e-9 * v, "k={k}: {a} vs {v}");
    }
}

/// Product-trapezoid sum over the 40⁴ cells: corner values weighted by the
/// number of cells sharing them.
fn brute_force(k: f64, t: f64, n: usize) -> f64 {
    let h = t / n as f64;
    let w: Vec<f64> = (0..=n).map(|i| if i == 0 || i == n { 0.5 } else { 1.0 }).collect();
    let x: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let mut total = 0.0;
    for (iu, &u) in x.iter().enumerate() {
        for (is, &s) in x.iter().enumerate() {
            let wus = w[iu] * w[is];
            let mut inner = 0.0;
            for (iv, &v) in x.iter().enumerate() {
                let a = (-k * ((u - v).abs() + (s - v).abs())).exp() * w[iv];
                for (iw, &ww) in x.iter().enumerate() {
                    inner += a * w[iw] * (-k * ((u - ww).abs() + (s - ww).abs())).exp();
                }
            }
            total += wus * inner;
        }
    }
    total * h.powi(4)
}

#[test]
fn analytic_matches_brute_force_grid() {
    let a = quadruple_integral_analytic(2.0, 1.0);
    let b = brute_force(2.0, 1.0, 40);
    assert!(((a - b) / a).abs() <= 1e-3, "{a} vs {b}");
}

#[test]
fn swapping_variable_roles_leaves_the_value_unchanged() {
    // (u, s) ↔ (v, w)
    let swapped: Vec<(usize, usize)> = KERNEL_EDGES.iter().map(|&(a, b)| (b - 2, a + 2)).collect();
    for k in [1.0, 2.0, 10.0, 100.0] {
        let a = analytic_with_edges(k, 1.0, &KERNEL_EDGES);
        let b = analytic_with_edges(k, 1.0, &swapped);
        assert!((a - b).abs() <= 1e-12 * a);
    }
}

#[test]
fn check_reports_envelope_and_flags() {
    let c = quadruple_integral_check(10.0, 1.0).unwrap();
    assert!((c.envelope - c.analytic).abs() <= 1e-12 * c.analytic);
    assert!(!c.analytic_only);
    assert!((c.envelope_constant * envelope_shape(10.0) - c.analytic).abs() < 1e-15);
    let far = quadruple_integral_check(100.0, 1.0).unwrap();
    assert!(far.analytic_only && far.quadrature.is_none());
    assert!(quadruple_integral_check(0.5, 1.0).is_err());
    assert!(quadruple_integral_quadrature(5.0, 2.0).is_some());
}

#[test]
fn horizon_scaling_for_large_k() {
    // for k T ≫ 1 the integral grows linearly in T with slope ≈ 5/(2 k³)
    let k = 40.0;
    let slope = quadruple_integral_analytic(k, 3.0) - quadruple_integral_analytic(k, 2.0);
    assert!((slope * k.powi(3) - 2.5).abs() < 1e-6, "{}", slope * k.powi(3));
}
