//! The six commands. Each writes its data files through [`OutputDir`] and
//! returns the verdict; the caller adds the manifest.

use fastslow_core::homogenization::build_homogenized;
use fastslow_core::malliavin::{functional_moments, moment_sweep, BoundId, MomentSweepConfig};
use fastslow_core::metrics::{clt_verify_with, limit_on_grid, rate_sweep_pairs, theoretical_bound, RateSweepConfig};
use fastslow_core::{check_assumptions, AssumptionReport, CoefficientSet, HomogenizedModel64};

use crate::config::ExperimentConfig;
use crate::output::OutputDir;
use crate::{CliError, Command, Outcome};

pub fn run(command: Command, cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let model = cfg.model()?;
    match command {
        Command::CheckAssumptions => check(cfg, &model, out),
        Command::Homogenize => homogenize(cfg, &model, out),
        Command::CltVerify => clt(cfg, &model, out),
        Command::MalliavinSweep => malliavin(cfg, &model, out),
        Command::RateSweep => rate(cfg, &model, out),
        Command::BoundEval => bounds(cfg, out),
    }
}

fn assumption_report(cfg: &ExperimentConfig, model: &CoefficientSet<f64>, p: u32) -> Result<AssumptionReport, CliError> {
    let g = &cfg.grid.assumptions;
    Ok(check_assumptions(model, g.x_range, g.y_range, g.nx, g.ny, p)?)
}

/// `analysis.k`, or `K_hat` at `p = 1`.
fn envelope_rate(cfg: &ExperimentConfig, model: &CoefficientSet<f64>) -> Result<f64, CliError> {
    if let Some(k) = cfg.analysis.k {
        return Ok(k);
    }
    let r = assumption_report(cfg, model, 1)?;
    if !r.passes {
        return Err(CliError::Module(fastslow_core::Error::InvalidArgument(format!(
            "K_hat = {} at p = 1 is not positive; set analysis.k explicitly",
            r.k_hat
        ))));
    }
    Ok(r.k_hat)
}

fn homogenized(cfg: &ExperimentConfig, model: &CoefficientSet<f64>) -> Result<HomogenizedModel64, CliError> {
    let o = cfg.clt_options();
    Ok(build_homogenized(model, o.x_range, o.nx, o.ny, cfg.regime.gamma.0)?)
}

fn check(cfg: &ExperimentConfig, model: &CoefficientSet<f64>, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let mut outcome = Outcome::default();
    let mut reports = Vec::new();
    for &p in &cfg.analysis.p {
        let r = assumption_report(cfg, model, p)?;
        if !r.passes {
            outcome.fail(format!(
                "p={p}: dissipativity fails, K_hat={} with the worst grid point at (x={}, y={})",
                r.k_hat, r.worst_point.0, r.worst_point.1
            ));
        }
        if r.tau_min == 0.0 {
            outcome.fail(format!("p={p}: tau vanishes on the grid; the fast noise is degenerate"));
        }
        reports.push(r);
    }
    out.write_json("assumptions.json", &reports)?;
    Ok(outcome)
}

fn homogenize(cfg: &ExperimentConfig, model: &CoefficientSet<f64>, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let mut outcome = Outcome::default();
    let hom = homogenized(cfg, model)?;
    hom.warnings.iter().for_each(|w| outcome.warn(w.clone()));
    out.write_with("homogenized_summary.csv", |w| hom.write_summary_csv(w))?;
    out.write_with("homogenized_rows.csv", |w| hom.write_rows_csv(w))?;

    let regime = cfg.regimes()?[0];
    let (_, dt) = regime.time_grid(cfg.grid.dt)?;
    let limit = limit_on_grid(&hom, cfg.initial.x0, regime.horizon, dt)?;
    out.write_with("limit.csv", |w| {
        writeln!(w, "t,x_bar,psi,sigma2")?;
        for i in 0..limit.t_grid.len() {
            writeln!(w, "{:e},{:e},{:e},{:e}", limit.t_grid[i], limit.x_bar[i], limit.psi[i], limit.sigma2[i])?;
        }
        Ok(())
    })?;
    Ok(outcome)
}

fn clt(cfg: &ExperimentConfig, model: &CoefficientSet<f64>, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let mut outcome = Outcome::default();
    let hom = homogenized(cfg, model)?;
    let checkpoints = cfg.checkpoints();
    let mut results = Vec::new();
    for (i, regime) in cfg.regimes()?.iter().enumerate() {
        let res = clt_verify_with(
            model,
            &hom,
            regime,
            cfg.initial.x0,
            cfg.initial.y0,
            Some(cfg.aligned_dt(regime)?),
            cfg.grid.n_paths,
            &checkpoints,
            cfg.io.seed.wrapping_add(i as u64),
            cfg.analysis.bootstrap,
        )?;
        for w in &res.warnings {
            if !outcome.warnings.contains(w) {
                outcome.warn(w.clone());
            }
        }
        results.push(res);
    }
    out.write_with("clt.csv", |w| {
        writeln!(w, "epsilon,eta,{}", fastslow_core::metrics::WassersteinReport::csv_header())?;
        for res in &results {
            for r in &res.reports {
                writeln!(w, "{},{},{}", res.epsilon, res.eta, r.csv_row())?;
            }
        }
        Ok(())
    })?;
    out.write_json("clt.json", &results)?;
    Ok(outcome)
}

fn malliavin(cfg: &ExperimentConfig, model: &CoefficientSet<f64>, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let mut outcome = Outcome::default();
    let regimes = cfg.regimes()?;
    let k = envelope_rate(cfg, model)?;
    let gated: Vec<BoundId> = cfg.analysis.gated_bounds.clone().unwrap_or_else(|| BoundId::ALL.to_vec());
    for &p in &cfg.analysis.p {
        let sweep = moment_sweep(
            model,
            &regimes,
            &MomentSweepConfig {
                x0: cfg.initial.x0,
                y0: cfg.initial.y0,
                p,
                n_paths: cfg.grid.n_paths,
                seed: cfg.io.seed,
                k,
                selection: cfg.analysis.moments.clone(),
            },
        )?;
        for r in &sweep.scaling {
            r.warnings.iter().for_each(|w| outcome.warn(format!("p={p}: {w}")));
            if gated.contains(&r.bound_id) && !r.all_pass() {
                outcome.fail(format!("p={p}: {} exceeds C_fit times its envelope", r.bound_id));
            }
        }
        for d in &sweep.decay {
            d.warnings.iter().for_each(|w| outcome.warn(format!("p={p}: {w}")));
            if gated.contains(&d.bound_id) && !d.monotone_to_floor {
                outcome.fail(format!("p={p}: {} does not decay with the separation", d.bound_id));
            }
        }
        out.write_json(&format!("moments_p{p}.json"), &sweep)?;
        out.write_with(&format!("moments_p{p}.csv"), |w| {
            writeln!(w, "bound_id,p,epsilon,eta,empirical,envelope,stderr,C_fit,passes")?;
            for r in &sweep.scaling {
                let mut body = Vec::new();
                r.write_csv(&mut body)?;
                let text = String::from_utf8(body).expect("csv is utf-8");
                text.lines().skip(1).try_for_each(|l| writeln!(w, "{l}"))?;
            }
            Ok(())
        })?;
        out.write_with(&format!("decay_p{p}.csv"), |w| {
            writeln!(w, "bound_id,p,epsilon,eta,separation_over_eta,empirical,stderr,envelope")?;
            for d in &sweep.decay {
                let mut body = Vec::new();
                d.write_csv(&mut body)?;
                let text = String::from_utf8(body).expect("csv is utf-8");
                text.lines().skip(1).try_for_each(|l| writeln!(w, "{l}"))?;
            }
            Ok(())
        })?;
    }

    let functionals = regimes
        .iter()
        .enumerate()
        .map(|(i, r)| {
            functional_moments(
                model,
                r,
                cfg.initial.x0,
                cfg.initial.y0,
                cfg.analysis.functional_paths,
                cfg.grid.r_grid,
                cfg.io.seed.wrapping_add(i as u64),
            )
        })
        .collect::<fastslow_core::Result<Vec<_>>>()?;
    out.write_with("functionals.csv", |w| {
        writeln!(w, "epsilon,eta,n_paths,n_r,hnorm4,hnorm4_stderr,contraction,contraction_stderr")?;
        for f in &functionals {
            writeln!(
                w,
                "{},{},{},{},{:e},{:e},{:e},{:e}",
                f.epsilon, f.eta, f.n_paths, f.n_r, f.hnorm4, f.hnorm4_stderr, f.contraction, f.contraction_stderr
            )?;
        }
        Ok(())
    })?;
    Ok(outcome)
}

fn rate(cfg: &ExperimentConfig, model: &CoefficientSet<f64>, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let mut outcome = Outcome::default();
    let pairs: Vec<(f64, f64)> = cfg.regimes()?.iter().map(|r| (r.epsilon, r.eta)).collect();
    let sweep = rate_sweep_pairs(
        model,
        &pairs,
        &RateSweepConfig {
            x0: cfg.initial.x0,
            y0: cfg.initial.y0,
            gamma: cfg.regime.gamma.0,
            horizon: cfg.regime.horizon,
            n_paths: cfg.grid.n_paths,
            seed: cfg.io.seed,
            k: envelope_rate(cfg, model)?,
            zeta: cfg.analysis.zeta,
            options: cfg.clt_options(),
        },
    )?;
    sweep.warnings.iter().for_each(|w| outcome.warn(w.clone()));
    if !sweep.decreasing {
        outcome.fail("w1 does not decrease along the sweep, even up to one interval overlap");
    }
    if !sweep.dominated {
        outcome.fail("w1 exceeds the fitted envelope at some point");
    }
    out.write_with("rate.csv", |w| sweep.write_csv(w))?;
    out.write_json("rate.json", &sweep)?;
    Ok(outcome)
}

fn bounds(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let mut outcome = Outcome::default();
    // K enters only through e^{-KT/(16η)}; without an explicit value use 1
    let k = cfg.analysis.k.unwrap_or(1.0);
    let (zeta, c1, c2) = (cfg.analysis.zeta, cfg.analysis.c1, cfg.analysis.c2);
    let rows = cfg
        .regimes()?
        .iter()
        .map(|r| theoretical_bound(r, k, zeta, c1, c2).map(|b| (*r, b)))
        .collect::<fastslow_core::Result<Vec<_>>>()?;
    for (r, b) in &rows {
        if b.negative_drift {
            outcome.warn(format!("eta/eps - 1/gamma^2 < 0 at eps={}, eta={}; absolute value used", r.epsilon, r.eta));
        }
    }
    out.write_with("bounds.csv", |w| {
        writeln!(w, "epsilon,eta,gamma,horizon,k,zeta,c1,c2,first,second,value,negative_drift")?;
        for (r, b) in &rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{:e},{:e},{:e},{}",
                r.epsilon, r.eta, r.gamma, r.horizon, k, zeta, c1, c2, b.first, b.second, b.value, b.negative_drift
            )?;
        }
        Ok(())
    })?;
    Ok(outcome)
}
