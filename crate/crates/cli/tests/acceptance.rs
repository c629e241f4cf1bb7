//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion outside `KNOWN_FAILURES` fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use fastslow_core::homogenization::build_homogenized;
use fastslow_core::malliavin::{
    default_r_nodes, first_order_tangents, moment_sweep, quadruple_integral_analytic, quadruple_integral_check,
    z_process, BoundId, MomentSelection, MomentSweepConfig, Noise, TangentEngine,
};
use fastslow_core::metrics::{bootstrap_w1, clt_verify, limit_on_grid, rate_sweep, w1_vs_gaussian, CltOptions, EtaRule, RateSweepConfig};
use fastslow_core::numerics::mean_and_stderr;
use fastslow_core::sde::{limit_gaussian_samples, simulate_paths, ScaleRegime};
use fastslow_core::{affine_oracle, bounded_coupled, check_assumptions, CoefficientSet};
use nalgebra::{Matrix2, Vector2};
use serde_json::json;

type Check = Result<String, String>;

/// Criteria expected to fail, with the reason.
const KNOWN_FAILURES: &[(u32, &str)] = &[(
    10,
    "for kT >> 1 the integral grows like (5T/2) k^-3, so C fitted at k = 10 (about 2.14) cannot dominate at k = 50, 100",
)];

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn affine() -> CoefficientSet<f64> {
    affine_oracle()
}

fn coupled() -> CoefficientSet<f64> {
    bounded_coupled()
}

fn k_hat_p1(model: &CoefficientSet<f64>) -> f64 {
    check_assumptions(model, (-3.0, 3.0), (-4.0, 4.0), 61, 81, 1).unwrap().k_hat
}

fn homogenization_oracle() -> Check {
    let model = affine();
    let hom = build_homogenized(&model, (-3.0, 3.0), 61, 801, 1.0).map_err(|e| e.to_string())?;
    let mut c_err: f64 = 0.0;
    for r in &hom.rows {
        c_err = c_err.max((r.c_bar + r.x).abs());
    }
    for i in 0..=600 {
        let x = -3.0 + 0.01 * i as f64;
        c_err = c_err.max((hom.c_bar_at(x) + x).abs());
    }
    let mut phi_err: f64 = 0.0;
    for r in &hom.rows {
        let n = r.y.len();
        for j in n / 10..=n - 1 - n / 10 {
            phi_err = phi_err.max((r.phi[j] - (r.x - r.y[j])).abs());
        }
    }
    let limit = limit_on_grid(&hom, 1.0, 1.0, 0.0005).map_err(|e| e.to_string())?;
    let sigma2 = *limit.sigma2.last().unwrap();
    let exact = 1.5 * (1.0 - (-2.0f64).exp());
    let s_err = (sigma2 - exact).abs();
    ensure(
        c_err <= 1e-6 && phi_err <= 1e-5 && s_err <= 1e-6,
        format!("c_bar err {c_err:.2e}, phi err {phi_err:.2e}, sigma_1^2 err {s_err:.2e}"),
    )
}

/// `|f Φ' + τ²/2 Φ'' − (c − c̄)|` from differences of the tabulated `Φ`.
fn poisson_residual() -> Check {
    let mut worst: f64 = 0.0;
    for model in [affine(), coupled()] {
        let hom = build_homogenized(&model, (-3.0, 3.0), 31, 801, 1.0).map_err(|e| e.to_string())?;
        for r in &hom.rows {
            let n = r.y.len();
            let h = r.y[1] - r.y[0];
            for j in (n / 10).max(1)..=(n - 1 - n / 10).min(n - 2) {
                let d1 = (r.phi[j + 1] - r.phi[j - 1]) / (2.0 * h);
                let d2 = (r.phi[j + 1] - 2.0 * r.phi[j] + r.phi[j - 1]) / (h * h);
                let jets = model.jets(r.x, r.y[j]);
                let tau2 = jets.tau.value * jets.tau.value;
                let res = jets.f.value * d1 + 0.5 * tau2 * d2 - (jets.c.value - r.c_bar);
                worst = worst.max(res.abs());
            }
        }
    }
    ensure(worst <= 1e-4, format!("max residual {worst:.2e} over both models"))
}

fn assumption_constants() -> Check {
    let r = check_assumptions(&affine(), (-3.0, 3.0), (-4.0, 4.0), 61, 81, 2).map_err(|e| e.to_string())?;
    ensure(r.k_hat == 1.0 && r.m_hat == 1.0 && r.passes, format!("K_hat = {}, M_hat = {}", r.k_hat, r.m_hat))
}

fn clt_in_w1() -> Check {
    let regime = ScaleRegime::new(0.01, 0.01, 1.0, 1.0).unwrap();
    let res = clt_verify(&affine(), &regime, 1.0, 1.0, None, 10_000, &[1.0], 2024, &CltOptions::around(1.0))
        .map_err(|e| e.to_string())?;
    let r = &res.reports[0];
    ensure(
        r.w1 <= 0.15 && r.ci_hi <= 0.2,
        format!("w1 = {:.4}, 95% CI [{:.4}, {:.4}]", r.w1, r.ci_lo, r.ci_hi),
    )
}

fn rate_decrease() -> Check {
    let model = affine();
    let cfg = RateSweepConfig {
        x0: 1.0,
        y0: 1.0,
        gamma: 1.0,
        horizon: 1.0,
        n_paths: 10_000,
        seed: 77,
        k: k_hat_p1(&model),
        zeta: 0.1,
        options: CltOptions::around(1.0),
    };
    let s = rate_sweep(&model, &[0.16, 0.08, 0.04, 0.02], EtaRule::Equal, &cfg).map_err(|e| e.to_string())?;
    let w: Vec<String> = s
        .points
        .iter()
        .map(|p| format!("{:.4}<={:.4}", p.w1, p.envelope))
        .collect();
    ensure(
        s.decreasing && s.dominated,
        format!("w1 vs envelope [{}], slope {:.3}", w.join(", "), s.fit.slope),
    )
}

fn affine_flow(eta: f64, t: f64) -> Matrix2<f64> {
    (Matrix2::new(-2.0, 1.0, 1.0 / eta, -1.0 / eta) * t).exp()
}

fn first_order_oracle() -> Check {
    let model = affine();
    let (eps, eta) = (0.01, 0.01);
    let regime = ScaleRegime::new(eps, eta, 1.0, 1.0).unwrap();
    let bundle = simulate_paths(&model, &regime, 1.0, 1.0, Some(eta / 50.0), 1, 3).map_err(|e| e.to_string())?;
    let dt = bundle.dt;
    let engine = TangentEngine::new(&model, &bundle.paths[0], eps, eta, dt).map_err(|e| e.to_string())?;
    let nodes = default_r_nodes(engine.n_steps(), 16);
    let first = first_order_tangents(&engine, &nodes).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (i, &r) in nodes.iter().enumerate() {
        for (noise, init) in [
            (Noise::W1, Vector2::new(eps.sqrt(), 0.0)),
            (Noise::W2, Vector2::new(0.0, (2.0 / eta).sqrt())),
        ] {
            let tp = first.get(noise, i);
            for k in r..=engine.n_steps() {
                let exact = affine_flow(eta, (k - r) as f64 * dt) * init;
                let (x, y) = tp.at(k);
                for (num, ex) in [(x, exact[0]), (y, exact[1])] {
                    let e = if ex == 0.0 { num.abs() } else { ((num - ex) / ex).abs() };
                    worst = worst.max(e);
                }
            }
        }
    }
    ensure(worst <= 1e-3, format!("max relative error {worst:.2e} over 16 r-nodes"))
}

fn second_order_nullity() -> Check {
    let model = affine();
    let (eps, eta) = (0.02, 0.02);
    let regime = ScaleRegime::new(eps, eta, 1.0, 1.0).unwrap();
    let bundle = simulate_paths(&model, &regime, 1.0, 1.0, None, 64, 8).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for p in &bundle.paths {
        let engine = TangentEngine::new(&model, p, eps, eta, bundle.dt).map_err(|e| e.to_string())?;
        let first = first_order_tangents(&engine, &default_r_nodes(bundle.n_steps, 16)).map_err(|e| e.to_string())?;
        for j1 in Noise::BOTH {
            for j2 in Noise::BOTH {
                for u in 0..16 {
                    for v in 0..16 {
                        let d2 = engine
                            .second_order(j1, first.get(j1, u), j2, first.get(j2, v))
                            .map_err(|e| e.to_string())?;
                        worst = d2.dx.iter().chain(&d2.dy).fold(worst, |m, z| m.max(z.abs()));
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-12, format!("max |D2| = {worst:e} over 64 paths"))
}

fn z_process_check() -> Check {
    let model = affine();
    let eta = 0.02;
    let regime = ScaleRegime::new(0.02, eta, 1.0, 1.0).unwrap();
    let b = simulate_paths(&model, &regime, 1.0, 1.0, None, 4, 1).map_err(|e| e.to_string())?;
    let mut exact_err: f64 = 0.0;
    for p in &b.paths {
        for r in [0, 250, 700] {
            let z = z_process(&model, p, 0.02, eta, b.dt, r).map_err(|e| e.to_string())?;
            for (i, v) in z.iter().enumerate() {
                exact_err = exact_err.max((v - (-(i as f64) * b.dt / eta).exp()).abs());
            }
        }
    }

    let model = coupled();
    let k = k_hat_p1(&model);
    let (eps, eta) = (0.05, 0.05);
    let regime = ScaleRegime::new(eps, eta, 1.0, 1.0).unwrap();
    let b = simulate_paths(&model, &regime, 1.0, 1.0, None, 10_000, 42).map_err(|e| e.to_string())?;
    let r = b.n_steps / 4;
    let per_eta = (eta / b.dt).round() as usize;
    let lags = [1usize, 3, 10];
    let mut sq: Vec<Vec<f64>> = vec![Vec::with_capacity(b.paths.len()); lags.len()];
    for p in &b.paths {
        let z = z_process(&model, p, eps, eta, b.dt, r).map_err(|e| e.to_string())?;
        for (i, &l) in lags.iter().enumerate() {
            sq[i].push(z[l * per_eta].powi(2));
        }
    }
    let mut ok = exact_err <= 1e-12;
    let mut parts = vec![format!("affine err {exact_err:.1e}")];
    for (i, &l) in lags.iter().enumerate() {
        let (m, se) = mean_and_stderr(&sq[i]);
        let env = (-k * l as f64).exp();
        ok &= m <= env + 5.0 * se;
        parts.push(format!("E Z^2({l} eta) = {m:.3e} <= {env:.3e}"));
    }
    ensure(ok, parts.join(", "))
}

fn moment_scaling() -> Check {
    let model = coupled();
    let regimes: Vec<ScaleRegime<f64>> = [0.2, 0.1, 0.05, 0.025]
        .iter()
        .map(|&e| ScaleRegime::new(e, e, 1.0, 1.0).unwrap())
        .collect();
    let cfg = MomentSweepConfig {
        x0: 1.0,
        y0: 1.0,
        p: 1,
        n_paths: 2000,
        seed: 9,
        k: k_hat_p1(&model),
        selection: MomentSelection::default(),
    };
    let sweep = moment_sweep(&model, &regimes, &cfg).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for id in [BoundId::Dw1XSup, BoundId::Dw2XSup, BoundId::Dw1W1X] {
        let spread = sweep.report(id).unwrap().ratio_spread();
        ok &= spread <= 3.0;
        parts.push(format!("{id} spread {spread:.2}"));
    }
    for id in [BoundId::Dw1W2X, BoundId::Dw2W2X] {
        let d = sweep.decay_report(id).unwrap();
        let seps: Vec<f64> = d.points.iter().map(|p| p.separation).collect();
        ok &= d.monotone && seps == [1.0, 3.0, 10.0];
        let m: Vec<String> = d.points.iter().map(|p| format!("{:.2e}", p.empirical)).collect();
        parts.push(format!("{id} decay [{}] monotone={}", m.join(", "), d.monotone));
    }
    ensure(ok, parts.join("; "))
}

/// Product-trapezoid sum on the 40⁴ cell corners.
fn brute_force_quadruple(k: f64, t: f64, n: usize) -> f64 {
    let h = t / n as f64;
    let w: Vec<f64> = (0..=n).map(|i| if i == 0 || i == n { 0.5 } else { 1.0 }).collect();
    let x: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let mut total = 0.0;
    for (iu, &u) in x.iter().enumerate() {
        for (is, &s) in x.iter().enumerate() {
            let mut inner = 0.0;
            for (iv, &v) in x.iter().enumerate() {
                let a = (-k * ((u - v).abs() + (s - v).abs())).exp() * w[iv];
                for (iw, &z) in x.iter().enumerate() {
                    inner += a * w[iw] * (-k * ((u - z).abs() + (s - z).abs())).exp();
                }
            }
            total += w[iu] * w[is] * inner;
        }
    }
    total * h.powi(4)
}

fn quadruple_envelope() -> Check {
    let a = quadruple_integral_analytic(2.0, 1.0);
    let b = brute_force_quadruple(2.0, 1.0, 40);
    let rel = ((a - b) / a).abs();
    let mut ok = rel <= 1e-3;
    let mut parts = vec![format!("k=2 rel gap {rel:.2e}")];
    for k in [10.0, 50.0, 100.0] {
        let c = quadruple_integral_check(k, 1.0).map_err(|e| e.to_string())?;
        ok &= c.below_envelope;
        parts.push(format!("k={k}: {:.4e} vs envelope {:.4e}", c.analytic, c.envelope));
    }
    ensure(ok, parts.join(", "))
}

fn w1_estimator_oracle() -> Check {
    let z = limit_gaussian_samples(1.0f64, 10_000, 1).map_err(|e| e.to_string())?;
    let shift = w1_vs_gaussian(&z, 0.5, 1.0).map_err(|e| e.to_string())?;
    let se_shift = bootstrap_w1(&z, 0.5, 1.0, 400, 2).map_err(|e| e.to_string())?.se;
    let z = limit_gaussian_samples(1.0f64, 10_000, 3).map_err(|e| e.to_string())?;
    let scale = w1_vs_gaussian(&z, 0.0, 1.21).map_err(|e| e.to_string())?;
    let se_scale = bootstrap_w1(&z, 0.0, 1.21, 400, 4).map_err(|e| e.to_string())?.se;
    let exact_scale = 0.1 * (2.0 / std::f64::consts::PI).sqrt();
    ensure(
        (shift - 0.5).abs() <= 3.0 * se_shift && (scale - exact_scale).abs() <= 3.0 * se_scale,
        format!("shift {shift:.4} (se {se_shift:.4}), scale {scale:.4} vs {exact_scale:.4} (se {se_scale:.4})"),
    )
}

fn run_cli(dir: &Path, command: &str, config: &serde_json::Value, threads: usize) -> Result<Vec<(String, Vec<u8>)>, String> {
    let out = dir.join(format!("{command}-{threads}"));
    let mut cfg = config.clone();
    cfg["io"]["output_dir"] = json!(out);
    let path = dir.join(format!("{command}-{threads}.json"));
    fs::write(&path, cfg.to_string()).map_err(|e| e.to_string())?;
    let status = Command::new(env!("CARGO_BIN_EXE_fastslow"))
        .args([command, "--config"])
        .arg(&path)
        .args(["--threads", &threads.to_string()])
        .output()
        .map_err(|e| e.to_string())?
        .status;
    if !matches!(status.code(), Some(0 | 2 | 3)) {
        return Err(format!("{command} exited with {status}"));
    }
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    Ok(files)
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = json!({
        "model": "bounded_coupled",
        "regime": {"epsilon": [0.2, 0.1, 0.05], "gamma": 1, "horizon": 1},
        "grid": {"n_paths": 300, "r_grid": 8, "homogenization": {"nx": 41, "ny": 401}},
        "analysis": {"p": [1, 2], "bootstrap": 50, "functional_paths": 4},
        "io": {"seed": 31}
    });
    let mut compared = 0;
    for command in ["check-assumptions", "homogenize", "clt-verify", "malliavin-sweep", "rate-sweep", "bound-eval"] {
        let one = run_cli(dir.path(), command, &cfg, 1)?;
        let again = run_cli(dir.path(), command, &cfg, 1)?;
        let many = run_cli(dir.path(), command, &cfg, 4)?;
        if one.is_empty() || one != again || one != many {
            return Err(format!("{command}: outputs differ between reruns or thread counts"));
        }
        compared += one.len();
    }
    Ok(format!("{compared} data files identical across reruns and 1 vs 4 threads"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 12] = [
        (1, "homogenization oracle", homogenization_oracle),
        (2, "Poisson residual", poisson_residual),
        (3, "assumption constants", assumption_constants),
        (4, "CLT in W1", clt_in_w1),
        (5, "rate decrease", rate_decrease),
        (6, "first-order tangent oracle", first_order_oracle),
        (7, "second-order nullity", second_order_nullity),
        (8, "Z-process", z_process_check),
        (9, "moment scaling", moment_scaling),
        (10, "quadruple-integral envelope", quadruple_envelope),
        (11, "W1 estimator oracle", w1_estimator_oracle),
        (12, "determinism", determinism),
    ];
    let mut unexpected = 0;
    for (id, name, check) in criteria {
        let start = Instant::now();
        let result = check();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} ({secs:.1}s)"),
            Err(detail) => match KNOWN_FAILURES.iter().find(|(k, _)| *k == id) {
                Some((_, why)) => println!("FAIL {id:>2} {name}: {detail} ({secs:.1}s) [known: {why}]"),
                None => {
                    unexpected += 1;
                    println!("FAIL {id:>2} {name}: {detail} ({secs:.1}s)");
                }
            },
        }
    }
    if unexpected > 0 {
        std::process::exit(1);
    }
}
