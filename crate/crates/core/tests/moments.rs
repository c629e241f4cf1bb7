use fastslow_core::malliavin::{moment_sweep, BoundId, MomentSelection, MomentSweepConfig};
use fastslow_core::sde::ScaleRegime;
use fastslow_core::{affine_oracle, bounded_coupled, CoefficientSet};

fn regimes(eps: &[f64]) -> Vec<ScaleRegime<f64>> {
    eps.iter().map(|&e| ScaleRegime::new(e, e, 1.0, 1.0).unwrap()).collect()
}

fn config(n_paths: usize) -> MomentSweepConfig {
    MomentSweepConfig {
        x0: 1.0,
        y0: 1.0,
        p: 1,
        n_paths,
        seed: 17,
        k: 1.0,
        selection: MomentSelection::default(),
    }
}

#[test]
fn affine_second_order_moments_vanish() {
    let model: CoefficientSet<f64> = affine_oracle();
    let sweep = moment_sweep(&model, &regimes(&[0.2, 0.1, 0.05]), &config(50)).unwrap();
    for id in [BoundId::Dw1W1X, BoundId::Dw1W2X, BoundId::Dw2W2X] {
        let r = sweep.report(id).unwrap();
        assert!(r.points.iter().all(|p| p.empirical == 0.0));
        assert!(r.all_pass());
        assert_eq!(r.ratio_spread(), 1.0);
    }
    // additive noise: D^{W1}X is deterministic and bounded by its initial value
    let r = sweep.report(BoundId::Dw1XSup).unwrap();
    for p in &r.points {
        assert!((p.empirical - p.epsilon).abs() < 1e-12, "{} vs {}", p.empirical, p.epsilon);
    }
}

#[test]
fn coupled_sweep_reports_are_consistent() {
    let model: CoefficientSet<f64> = bounded_coupled();
    let sweep = moment_sweep(&model, &regimes(&[0.2, 0.1, 0.05]), &config(200)).unwrap();
    assert_eq!(sweep.scaling.len(), 6);
    for r in &sweep.scaling {
        assert_eq!(r.points.len(), 3);
        assert!(r.points.iter().all(|p| p.empirical >= 0.0 && p.envelope > 0.0));
        assert!(r.passes[0]);
        let json = serde_json::to_string(r).unwrap();
        assert!(json.contains("\"C_fit\""));
    }
    let dy = sweep.decay_report(BoundId::DyW2).unwrap();
    // 30·eta exceeds the horizon after the anchor at T/4 for eta = 0.05
    assert_eq!(dy.points.len(), 3);
    assert!(!dy.warnings.is_empty());
    assert!(dy.points[0].empirical > dy.points[2].empirical);
}

#[test]
fn sweep_rejects_bad_inputs() {
    let model: CoefficientSet<f64> = affine_oracle();
    assert!(moment_sweep(&model, &regimes(&[0.1, 0.2]), &config(10)).is_err());
    let mut c = config(10);
    c.p = 3;
    assert!(moment_sweep(&model, &regimes(&[0.2, 0.1]), &c).is_err());
}
