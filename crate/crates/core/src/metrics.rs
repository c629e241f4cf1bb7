//! Wasserstein-1 distance of the fluctuations to their Gaussian limit,
//! the quantitative bound of the CLT, and rate regression over sweeps.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{invalid, Result};
use crate::homogenization::{build_homogenized, limit_ode, HomogenizedModel, LimitTrajectory};
use crate::numerics::{std_normal_cdf_antiderivative as big_g, std_normal_quantile};
use crate::rng::{stream, Channel};
use crate::scalar::Scalar;
use crate::sde::{fluctuations_from_states, simulate_at_nodes, ScaleRegime};

/// Default bootstrap resample count.
pub const BOOTSTRAP_RESAMPLES: usize = 400;

/// Largest step of the limit ODE; it is refined to divide the simulation step.
pub const ODE_DT_MAX: f64 = 1e-3;

/// Default exponent `ζ` of the bound.
pub const DEFAULT_ZETA: f64 = 0.1;

/// `∫ |c − Φ(z)| dz` over `[a, b]` in standard units.
fn cdf_gap(a: f64, b: f64, c: f64) -> f64 {
    if !(b > a) {
        return 0.0;
    }
    let below = |lo: f64, hi: f64| c * (hi - lo) - (big_g(hi) - big_g(lo));
    let above = |lo: f64, hi: f64| (big_g(hi) - big_g(lo)) - c * (hi - lo);
    let zc = std_normal_quantile(c);
    if zc <= a {
        above(a, b)
    } else if zc >= b {
        below(a, b)
    } else {
        below(a, zc) + above(zc, b)
    }
}

fn w1_sorted(sorted: &[f64], mu: f64, sd: f64) -> f64 {
    let n = sorted.len();
    if sd == 0.0 {
        return sorted.iter().map(|x| (x - mu).abs()).sum::<f64>() / n as f64;
    }
    let z: Vec<f64> = sorted.iter().map(|x| (x - mu) / sd).collect();
    let mut total = big_g(z[0]) + big_g(-z[n - 1]);
    for i in 1..n {
        total += cdf_gap(z[i - 1], z[i], i as f64 / n as f64);
    }
    sd * total.max(0.0)
}

fn checked_samples<T: Scalar>(samples: &[T]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(invalid("W1 needs at least two samples"));
    }
    let mut v: Vec<f64> = samples.iter().map(|s| s.as_f64()).collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid("W1 samples must be finite"));
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(v)
}

fn check_target(mu: f64, sigma2: f64) -> Result<()> {
    if !mu.is_finite() || !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(invalid("target needs finite mu and finite sigma2 >= 0"));
    }
    Ok(())
}

/// Exact `W1` between the empirical law of `samples` and `N(mu, sigma2)`,
/// integrating `|F_n − Φ|` in closed form between order statistics.
pub fn w1_vs_gaussian<T: Scalar>(samples: &[T], mu: f64, sigma2: f64) -> Result<f64> {
    check_target(mu, sigma2)?;
    let sorted = checked_samples(samples)?;
    Ok(w1_sorted(&sorted, mu, sigma2.sqrt()))
}

/// Percentile bootstrap of the W1 estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Standard deviation of the resampled estimates.
    pub se: f64,
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// 95% percentile interval from `resamples` resamples; resample `b` draws
/// its indices from the bootstrap stream `(seed, b)`.
pub fn bootstrap_w1<T: Scalar>(samples: &[T], mu: f64, sigma2: f64, resamples: usize, seed: u64) -> Result<Bootstrap> {
    check_target(mu, sigma2)?;
    if resamples < 2 {
        return Err(invalid("bootstrap needs at least two resamples"));
    }
    let data = checked_samples(samples)?;
    let n = data.len();
    let sd = sigma2.sqrt();
    let mut stats: Vec<f64> = (0..resamples as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream(seed, b, Channel::Bootstrap);
            let mut draw: Vec<f64> = (0..n).map(|_| data[rng.random_range(0..n)]).collect();
            draw.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            w1_sorted(&draw, mu, sd)
        })
        .collect();
    let mean = stats.iter().sum::<f64>() / resamples as f64;
    let var = stats.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (resamples - 1) as f64;
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(Bootstrap {
        ci_lo: quantile(&stats, 0.025),
        ci_hi: quantile(&stats, 0.975),
        se: var.sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WassersteinReport {
    pub t: f64,
    pub n: usize,
    pub w1: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub bootstrap_se: f64,
    /// `|mean(θ)|`
    pub mean_gap: f64,
    /// `|sd(θ) − σ_t|`
    pub sd_gap: f64,
    pub sigma2: f64,
}

impl WassersteinReport {
    /// W1 of `samples` against `N(0, sigma2)` with bootstrap interval and gaps.
    pub fn from_samples<T: Scalar>(t: f64, samples: &[T], sigma2: f64, resamples: usize, seed: u64) -> Result<Self> {
        let w1 = w1_vs_gaussian(samples, 0.0, sigma2)?;
        let boot = bootstrap_w1(samples, 0.0, sigma2, resamples, seed)?;
        let v: Vec<f64> = samples.iter().map(|s| s.as_f64()).collect();
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt();
        Ok(Self {
            t,
            n,
            w1,
            ci_lo: boot.ci_lo,
            ci_hi: boot.ci_hi,
            bootstrap_se: boot.se,
            mean_gap: mean.abs(),
            sd_gap: (sd - sigma2.sqrt()).abs(),
            sigma2,
        })
    }

    pub fn csv_header() -> &'static str {
        "t,n,w1,ci_lo,ci_hi,bootstrap_se,mean_gap,sd_gap,sigma2"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.t, self.n, self.w1, self.ci_lo, self.ci_hi, self.bootstrap_se, self.mean_gap, self.sd_gap, self.sigma2
        )
    }
}

/// Homogenization grid and bootstrap settings of a CLT run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltOptions {
    pub x_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
    pub bootstrap: usize,
}

impl CltOptions {
    /// `x0 ± 4` with 81 x-rows and 801 y-nodes.
    pub fn around(x0: f64) -> Self {
        Self {
            x_range: (x0 - 4.0, x0 + 4.0),
            nx: 81,
            ny: 801,
            bootstrap: BOOTSTRAP_RESAMPLES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltResult {
    pub epsilon: f64,
    pub eta: f64,
    pub gamma: f64,
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub reports: Vec<WassersteinReport>,
    pub warnings: Vec<String>,
}

impl CltResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{}", WassersteinReport::csv_header())?;
        for r in &self.reports {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

/// Limit ODE with variance on a grid that refines the simulation step
/// `dt` by an integer factor.
pub fn limit_on_grid<T: Scalar>(hom: &HomogenizedModel<T>, x0: T, horizon: T, dt: T) -> Result<LimitTrajectory<T>> {
    let m = (dt.as_f64() / ODE_DT_MAX - 1e-9).ceil().max(1.0);
    Ok(limit_ode(hom, x0, horizon, dt / T::lit(m))?.with_variance(hom))
}

/// CLT check against a prebuilt homogenized model.
#[allow(clippy::too_many_arguments)]
pub fn clt_verify_with<T: Scalar>(
    model: &CoefficientSet<T>,
    hom: &HomogenizedModel<T>,
    regime: &ScaleRegime<T>,
    x0: T,
    y0: T,
    dt: Option<T>,
    n_paths: usize,
    checkpoints: &[T],
    seed: u64,
    bootstrap: usize,
) -> Result<CltResult> {
    regime.validate()?;
    if checkpoints.is_empty() {
        return Err(invalid("at least one checkpoint is required"));
    }
    if n_paths < 2 {
        return Err(invalid("CLT check needs at least two paths"));
    }
    let (n_steps, dt) = regime.time_grid(dt)?;
    let grid: Vec<T> = (0..=n_steps).map(|k| T::from_usize_lossy(k) * dt).collect();
    let mut nodes = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        if !(t > T::zero()) || t > regime.horizon * T::lit(1.0 + 1e-12) {
            return Err(invalid(format!("checkpoint {t} outside (0, T]")));
        }
        nodes.push(crate::homogenization::node_index(&grid, dt, t)?);
    }
    let trajectory = limit_on_grid(hom, x0, regime.horizon, dt)?;
    let samples = simulate_at_nodes(model, regime, x0, y0, Some(dt), n_paths, seed, &nodes)?;
    let mut warnings = hom.warnings.clone();
    let (y_lo, y_hi) = hom.y_hull();
    if samples.y_min < y_lo || samples.y_max > y_hi {
        warnings.push(format!(
            "fast paths left the tabulated y-window [{y_lo}, {y_hi}]: observed [{}, {}]",
            samples.y_min, samples.y_max
        ));
    }
    let reports = nodes
        .iter()
        .zip(&samples.x)
        .map(|(&k, x_t)| {
            let t = grid[k];
            let fl = fluctuations_from_states(x_t, &trajectory, regime.epsilon, t)?;
            WassersteinReport::from_samples(t.as_f64(), &fl.theta, fl.limit_var.as_f64(), bootstrap, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CltResult {
        epsilon: regime.epsilon.as_f64(),
        eta: regime.eta.as_f64(),
        gamma: regime.gamma,
        horizon: regime.horizon.as_f64(),
        dt: dt.as_f64(),
        n_paths,
        reports,
        warnings,
    })
}

/// Homogenizes, simulates and compares `θ_t` with `N(0, σ_t²)` at each checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn clt_verify<T: Scalar>(
    model: &CoefficientSet<T>,
    regime: &ScaleRegime<T>,
    x0: T,
    y0: T,
    dt: Option<T>,
    n_paths: usize,
    checkpoints: &[T],
    seed: u64,
    options: &CltOptions,
) -> Result<CltResult> {
    let hom = build_homogenized(
        model,
        (T::lit(options.x_range.0), T::lit(options.x_range.1)),
        options.nx,
        options.ny,
        regime.gamma,
    )?;
    clt_verify_with(model, &hom, regime, x0, y0, dt, n_paths, checkpoints, seed, options.bootstrap)
}

/// Both bracketed sums of the quantitative CLT bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundValue {
    pub value: f64,
    /// Sum multiplying `C1`.
    pub first: f64,
    /// Sum multiplying `C2`.
    pub second: f64,
    /// `η/ε − 1/γ² < 0`; the absolute value was used under the root.
    pub negative_drift: bool,
}

/// `C1 (η^{1/4} + ε^{1/4} + |η/ε − γ⁻²|^{1/2} + (η/ε)^{1/2} η^{1/2−ζ} + ε^{1/2−ζ})
///  + C2 ((η/ε)^{1/2} η^{1/4} + (η/ε) η^{1/4} + (1 + η/ε) e^{−KT/(16η)})`.
pub fn theoretical_bound<T: Scalar>(regime: &ScaleRegime<T>, k: f64, zeta: f64, c1: f64, c2: f64) -> Result<BoundValue> {
    regime.validate()?;
    if !(zeta > 0.0 && zeta < 0.5) {
        return Err(invalid("zeta must lie in (0, 1/2)"));
    }
    if !(k > 0.0) {
        return Err(invalid("K must be positive"));
    }
    let eps = regime.epsilon.as_f64();
    let eta = regime.eta.as_f64();
    let horizon = regime.horizon.as_f64();
    let ratio = eta / eps;
    let drift = ratio - crate::homogenization::inv_gamma_sq(regime.gamma);
    let first = eta.powf(0.25)
        + eps.powf(0.25)
        + drift.abs().sqrt()
        + ratio.sqrt() * eta.powf(0.5 - zeta)
        + eps.powf(0.5 - zeta);
    let second = ratio.sqrt() * eta.powf(0.25) + ratio * eta.powf(0.25) + (1.0 + ratio) * (-k * horizon / (16.0 * eta)).exp();
    Ok(BoundValue {
        value: c1 * first + c2 * second,
        first,
        second,
        negative_drift: drift < 0.0,
    })
}

/// OLS of `log w1` on `log ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_rate(epsilon: &[f64], w1: &[f64]) -> Result<RateFit> {
    if epsilon.len() != w1.len() || epsilon.len() < 3 {
        return Err(invalid("rate fit needs at least three (epsilon, w1) points"));
    }
    if epsilon.iter().chain(w1).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(invalid("rate fit needs positive finite epsilon and w1"));
    }
    let x: Vec<f64> = epsilon.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = w1.iter().map(|v| v.ln()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(invalid("rate fit needs distinct epsilon values"));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// How `η` follows `ε` along a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum EtaRule {
    /// `η = ε`
    Equal,
    /// `η = factor · ε`
    Ratio { factor: f64 },
    /// `η = ε^exponent`
    Power { exponent: f64 },
}

impl EtaRule {
    pub fn eta(&self, epsilon: f64) -> f64 {
        match *self {
            EtaRule::Equal => epsilon,
            EtaRule::Ratio { factor } => factor * epsilon,
            EtaRule::Power { exponent } => epsilon.powf(exponent),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSweepConfig {
    pub x0: f64,
    pub y0: f64,
    pub gamma: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Exponential rate of the bound.
    pub k: f64,
    pub zeta: f64,
    pub options: CltOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub epsilon: f64,
    pub eta: f64,
    pub w1: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Bootstrap interval reaches below `w1/3` or above `3·w1`.
    pub noisy: bool,
    /// Bound with `C1 = C2` fitted at the first point.
    pub envelope: f64,
    pub negative_drift: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSweep {
    pub points: Vec<RatePoint>,
    pub fit: RateFit,
    /// Common value of `C1 = C2`.
    pub c_fit: f64,
    /// Each `w1` is below its predecessor or their intervals overlap.
    pub decreasing: bool,
    /// Each `w1` is at most its fitted envelope.
    pub dominated: bool,
    pub warnings: Vec<String>,
}

impl RateSweep {
    pub fn any_noisy(&self) -> bool {
        self.points.iter().any(|p| p.noisy)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epsilon,eta,w1,ci_lo,ci_hi,noisy,envelope,negative_drift")?;
        for p in &self.points {
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{},{:e},{}",
                p.epsilon, p.eta, p.w1, p.ci_lo, p.ci_hi, p.noisy, p.envelope, p.negative_drift
            )?;
        }
        Ok(())
    }
}

/// Assembles the sweep summary from per-point CLT results.
pub fn summarize_sweep(
    points: &[(f64, f64, WassersteinReport)],
    gamma: f64,
    horizon: f64,
    k: f64,
    zeta: f64,
) -> Result<RateSweep> {
    let eps: Vec<f64> = points.iter().map(|p| p.0).collect();
    let w1: Vec<f64> = points.iter().map(|p| p.2.w1).collect();
    let fit = fit_rate(&eps, &w1)?;
    let bounds = points
        .iter()
        .map(|&(e, h, _)| theoretical_bound(&ScaleRegime::new(e, h, gamma, horizon)?, k, zeta, 1.0, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let c_fit = w1[0] / bounds[0].value;
    let mut warnings = Vec::new();
    let out: Vec<RatePoint> = points
        .iter()
        .zip(&bounds)
        .map(|(&(e, h, ref r), b)| {
            let noisy = r.ci_lo < r.w1 / 3.0 || r.ci_hi > 3.0 * r.w1;
            if noisy {
                warnings.push(format!("noisy point at eps={e}: CI [{:.3e}, {:.3e}] vs w1 {:.3e}", r.ci_lo, r.ci_hi, r.w1));
            }
            if b.negative_drift {
                warnings.push(format!("eta/eps - 1/gamma^2 < 0 at eps={e}, eta={h}"));
            }
            RatePoint {
                epsilon: e,
                eta: h,
                w1: r.w1,
                ci_lo: r.ci_lo,
                ci_hi: r.ci_hi,
                noisy,
                envelope: c_fit * b.value,
                negative_drift: b.negative_drift,
            }
        })
        .collect();
    let decreasing = out.windows(2).all(|w| w[1].w1 <= w[0].w1 || w[1].ci_lo <= w[0].ci_hi);
    let dominated = out.iter().all(|p| p.w1 <= p.envelope * (1.0 + 1e-12));
    Ok(RateSweep {
        points: out,
        fit,
        c_fit,
        decreasing,
        dominated,
        warnings,
    })
}

/// CLT check at the horizon for each `ε` (decreasing), with `η` from the
/// rule; point `i` uses seed `seed + i`.
pub fn rate_sweep<T: Scalar>(
    model: &CoefficientSet<T>,
    epsilons: &[f64],
    eta_rule: EtaRule,
    cfg: &RateSweepConfig,
) -> Result<RateSweep> {
    let pairs: Vec<(f64, f64)> = epsilons.iter().map(|&e| (e, eta_rule.eta(e))).collect();
    rate_sweep_pairs(model, &pairs, cfg)
}

/// As [`rate_sweep`] with explicit `(ε, η)` points. The homogenized model
/// depends only on `γ` and is built once.
pub fn rate_sweep_pairs<T: Scalar>(model: &CoefficientSet<T>, pairs: &[(f64, f64)], cfg: &RateSweepConfig) -> Result<RateSweep> {
    if pairs.len() < 3 {
        return Err(invalid("rate sweep needs at least three points"));
    }
    if pairs.windows(2).any(|w| !(w[1].0 < w[0].0)) {
        return Err(invalid("sweep epsilons must be strictly decreasing"));
    }
    let o = &cfg.options;
    let hom = build_homogenized(model, (T::lit(o.x_range.0), T::lit(o.x_range.1)), o.nx, o.ny, cfg.gamma)?;
    let horizon = T::lit(cfg.horizon);
    let mut points = Vec::with_capacity(pairs.len());
    let mut warnings = Vec::new();
    for (i, &(e, h)) in pairs.iter().enumerate() {
        let regime = ScaleRegime::new(T::lit(e), T::lit(h), cfg.gamma, horizon)?;
        let res = clt_verify_with(
            model,
            &hom,
            &regime,
            T::lit(cfg.x0),
            T::lit(cfg.y0),
            None,
            cfg.n_paths,
            &[horizon],
            cfg.seed.wrapping_add(i as u64),
            o.bootstrap,
        )?;
        for w in res.warnings {
            if !warnings.contains(&w) {
                warnings.push(w);
            }
        }
        points.push((e, h, res.reports.into_iter().next().expect("one checkpoint")));
    }
    let mut sweep = summarize_sweep(&points, cfg.gamma, cfg.horizon, cfg.k, cfg.zeta)?;
    sweep.warnings.extend(warnings);
    Ok(sweep)
}
