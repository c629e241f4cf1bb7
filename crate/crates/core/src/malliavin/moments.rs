//! Monte Carlo moment checks of the tangent processes against their
//! scaling envelopes.

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tangents::{Noise, TangentEngine, TangentPath};
use crate::coefficients::CoefficientSet;
use crate::error::{invalid, Result};
use crate::numerics::mean_and_stderr;
use crate::scalar::Scalar;
use crate::sde::{simulate_single_path, ScaleRegime};

/// Standard error above this fraction of the mean marks a point under-sampled.
pub const UNDERSAMPLED_FRACTION: f64 = 0.3;

/// Factor applied to the coarsest-point ratio to obtain `C_fit`.
pub const C_FIT_MARGIN: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BoundId {
    /// `E sup_s |D_r^{W1} X_s|^{2p} ≤ C ε^p`
    #[serde(rename = "dw1_x_sup")]
    Dw1XSup,
    /// `E sup_s |D_r^{W2} X_s|^{2p} ≤ C (ε^p + η^p)`
    #[serde(rename = "dw2_x_sup")]
    Dw2XSup,
    /// `E |D_r^{W2} Y_t|^{2p} ≤ C (η^{-p} e^{-K(t-r)/η} + ε^p + η^p)`
    #[serde(rename = "dy_w2")]
    DyW2,
    /// `E |D²_{r1,r2}^{W1,W1} X_t|^{2p} ≤ C ε^{2p}`
    #[serde(rename = "dw1w1_x")]
    Dw1W1X,
    /// `≤ C (ε^{2p} + ε^p η^p + (ε/η)^p e^{-K(r1-r2)/η} 1{r1 ≥ r2})`
    #[serde(rename = "dw1w2_x")]
    Dw1W2X,
    /// `≤ C (ε^{2p} + η^{2p} + ε^p η^p + (1 + (ε/η)^p) e^{-K|r1-r2|/(2η)})`
    #[serde(rename = "dw2w2_x")]
    Dw2W2X,
}

impl BoundId {
    pub const ALL: [BoundId; 6] = [
        BoundId::Dw1XSup,
        BoundId::Dw2XSup,
        BoundId::DyW2,
        BoundId::Dw1W1X,
        BoundId::Dw1W2X,
        BoundId::Dw2W2X,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BoundId::Dw1XSup => "dw1_x_sup",
            BoundId::Dw2XSup => "dw2_x_sup",
            BoundId::DyW2 => "dy_w2",
            BoundId::Dw1W1X => "dw1w1_x",
            BoundId::Dw1W2X => "dw1w2_x",
            BoundId::Dw2W2X => "dw2w2_x",
        }
    }

    /// Envelope without its constant. `r1`, `r2`, `t` are times; `k` is the
    /// exponential rate.
    pub fn envelope(self, epsilon: f64, eta: f64, p: u32, k: f64, r1: f64, r2: f64, t: f64) -> f64 {
        let pi = p as i32;
        let (ep, hp) = (epsilon.powi(pi), eta.powi(pi));
        let ratio = (epsilon / eta).powi(pi);
        match self {
            BoundId::Dw1XSup => ep,
            BoundId::Dw2XSup => ep + hp,
            BoundId::DyW2 => (-k * (t - r1) / eta).exp() / hp + ep + hp,
            BoundId::Dw1W1X => ep * ep,
            BoundId::Dw1W2X => {
                let decay = if r1 >= r2 { ratio * (-k * (r1 - r2) / eta).exp() } else { 0.0 };
                ep * ep + ep * hp + decay
            }
            BoundId::Dw2W2X => {
                ep * ep + hp * hp + ep * hp + (1.0 + ratio) * (-k * (r1 - r2).abs() / (2.0 * eta)).exp()
            }
        }
    }
}

impl BoundId {
    /// Non-decaying part of the envelope, without its constant.
    pub fn floor(self, epsilon: f64, eta: f64, p: u32) -> f64 {
        let pi = p as i32;
        let (ep, hp) = (epsilon.powi(pi), eta.powi(pi));
        match self {
            BoundId::DyW2 => ep + hp,
            BoundId::Dw1W2X => ep * ep + ep * hp,
            BoundId::Dw2W2X => ep * ep + hp * hp + ep * hp,
            other => other.envelope(epsilon, eta, p, 0.0, 0.0, 0.0, 0.0),
        }
    }
}

impl std::fmt::Display for BoundId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Derivative and evaluation times, as fractions of `T` or multiples of `η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MomentSelection {
    /// `t − r` for `dy_w2` in the sweep, in units of `η`.
    pub dy_lag: f64,
    /// `r` for `dy_w2` in the sweep, as a fraction of `T`; moved earlier
    /// when `r + dy_lag·η` would pass the horizon.
    pub dy_anchor: f64,
    /// `(r1, r2)` of the second-order bounds in the sweep, as fractions of `T`.
    pub pair: (f64, f64),
    /// Earlier derivative time of the decay checks, as a fraction of `T`.
    pub decay_anchor: f64,
    /// Separations `r1 − r2` of the second-order decay checks, in units of `η`.
    pub pair_separations: Vec<f64>,
    /// Lags `t − r` of the `dy_w2` decay check, in units of `η`.
    pub dy_separations: Vec<f64>,
}

impl Default for MomentSelection {
    fn default() -> Self {
        Self {
            dy_lag: 3.0,
            dy_anchor: 0.5,
            pair: (0.5, 0.25),
            decay_anchor: 0.25,
            pair_separations: vec![1.0, 3.0, 10.0],
            dy_separations: vec![1.0, 3.0, 10.0, 30.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPoint {
    pub epsilon: f64,
    pub eta: f64,
    pub empirical: f64,
    pub envelope: f64,
    pub stderr: f64,
}

impl MomentPoint {
    pub fn ratio(&self) -> f64 {
        self.empirical / self.envelope
    }

    pub fn undersampled(&self) -> bool {
        self.empirical > 0.0 && self.stderr > UNDERSAMPLED_FRACTION * self.empirical
    }
}

/// One bound checked across a sweep of regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub bound_id: BoundId,
    pub p: u32,
    pub points: Vec<MomentPoint>,
    #[serde(rename = "C_fit")]
    pub c_fit: f64,
    pub passes: Vec<bool>,
    pub warnings: Vec<String>,
}

impl MomentReport {
    fn assemble(bound_id: BoundId, p: u32, points: Vec<MomentPoint>) -> Self {
        let c_fit = points.first().map_or(0.0, |pt| C_FIT_MARGIN * pt.ratio());
        let passes = points.iter().map(|pt| pt.empirical <= c_fit * pt.envelope).collect();
        let warnings = points
            .iter()
            .filter(|pt| pt.undersampled())
            .map(|pt| {
                format!(
                    "{bound_id}: under-sampled at eps={}, eta={} (stderr {:.3e} vs mean {:.3e})",
                    pt.epsilon, pt.eta, pt.stderr, pt.empirical
                )
            })
            .collect();
        Self {
            bound_id,
            p,
            points,
            c_fit,
            passes,
            warnings,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.passes.iter().all(|&b| b)
    }

    /// `max/min` of empirical/envelope over the sweep; 1 when every
    /// empirical moment vanishes.
    pub fn ratio_spread(&self) -> f64 {
        let ratios: Vec<f64> = self.points.iter().map(MomentPoint::ratio).collect();
        let hi = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        if hi == 0.0 {
            1.0
        } else {
            hi / lo
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bound_id,p,epsilon,eta,empirical,envelope,stderr,C_fit,passes")?;
        for (pt, pass) in self.points.iter().zip(&self.passes) {
            writeln!(
                w,
                "{},{},{},{},{:e},{:e},{:e},{:e},{}",
                self.bound_id, self.p, pt.epsilon, pt.eta, pt.empirical, pt.envelope, pt.stderr, self.c_fit, pass
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    /// Separation in units of `η`.
    pub separation: f64,
    pub empirical: f64,
    pub stderr: f64,
    pub envelope: f64,
}

/// One bound at a fixed regime as a function of a time separation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub bound_id: BoundId,
    pub p: u32,
    pub epsilon: f64,
    pub eta: f64,
    pub points: Vec<DecayPoint>,
    /// Each mean is at most the previous one plus three combined standard errors.
    pub monotone: bool,
    /// As `monotone`, except that points at or below the envelope floor
    /// (unit constant) may fluctuate among themselves.
    pub monotone_to_floor: bool,
    pub warnings: Vec<String>,
}

impl DecayReport {
    fn assemble(bound_id: BoundId, p: u32, epsilon: f64, eta: f64, points: Vec<DecayPoint>, mut warnings: Vec<String>) -> Self {
        let step_ok = |w: &[DecayPoint]| {
            let slack = 3.0 * (w[0].stderr * w[0].stderr + w[1].stderr * w[1].stderr).sqrt();
            w[1].empirical <= w[0].empirical + slack
        };
        let floor = bound_id.floor(epsilon, eta, p);
        let monotone = points.windows(2).all(step_ok);
        let monotone_to_floor = points
            .windows(2)
            .all(|w| step_ok(w) || (w[0].empirical <= floor && w[1].empirical <= floor));
        for pt in &points {
            if pt.empirical > 0.0 && pt.stderr > UNDERSAMPLED_FRACTION * pt.empirical {
                warnings.push(format!("{bound_id}: under-sampled at separation {}·eta", pt.separation));
            }
        }
        Self {
            bound_id,
            p,
            epsilon,
            eta,
            points,
            monotone,
            monotone_to_floor,
            warnings,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "bound_id,p,epsilon,eta,separation_over_eta,empirical,stderr,envelope")?;
        for pt in &self.points {
            writeln!(
                w,
                "{},{},{},{},{},{:e},{:e},{:e}",
                self.bound_id, self.p, self.epsilon, self.eta, pt.separation, pt.empirical, pt.stderr, pt.envelope
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSweep {
    pub scaling: Vec<MomentReport>,
    pub decay: Vec<DecayReport>,
}

impl MomentSweep {
    pub fn report(&self, id: BoundId) -> Option<&MomentReport> {
        self.scaling.iter().find(|r| r.bound_id == id)
    }

    pub fn decay_report(&self, id: BoundId) -> Option<&DecayReport> {
        self.decay.iter().find(|r| r.bound_id == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentSweepConfig {
    pub x0: f64,
    pub y0: f64,
    pub p: u32,
    pub n_paths: usize,
    pub seed: u64,
    /// Exponential rate of the envelopes.
    pub k: f64,
    pub selection: MomentSelection,
}

/// Nearest step index to `t`.
fn node(t: f64, dt: f64, n_steps: usize) -> Result<usize> {
    let k = (t / dt).round();
    if !(k >= 0.0) || k as usize > n_steps {
        return Err(invalid(format!("derivative time {t} outside the horizon")));
    }
    Ok(k as usize)
}

/// Quantity evaluated per path: the tangent, where to read it, and how.
#[derive(Debug, Clone, Copy)]
enum Probe {
    SupX(Noise, usize),
    Y(Noise, usize, usize),
    SecondX(Noise, usize, Noise, usize, usize),
}

struct TangentCache<'e, 'p, T> {
    engine: &'e TangentEngine<'p, T>,
    first: HashMap<(Noise, usize), TangentPath<T>>,
}

impl<'e, 'p, T: Scalar> TangentCache<'e, 'p, T> {
    fn first(&mut self, noise: Noise, r: usize) -> Result<&TangentPath<T>> {
        if !self.first.contains_key(&(noise, r)) {
            let tp = self.engine.first_order(noise, r)?;
            self.first.insert((noise, r), tp);
        }
        Ok(&self.first[&(noise, r)])
    }

    fn eval(&mut self, probe: Probe) -> Result<T> {
        Ok(match probe {
            Probe::SupX(noise, r) => self.first(noise, r)?.sup_abs_x(),
            Probe::Y(noise, r, t) => self.first(noise, r)?.at(t).1,
            Probe::SecondX(j1, r1, j2, r2, t) => {
                self.first(j1, r1)?;
                self.first(j2, r2)?;
                let (a, b) = (&self.first[&(j1, r1)], &self.first[&(j2, r2)]);
                self.engine.second_order(j1, a, j2, b)?.x_at(t)
            }
        })
    }
}

/// `(mean, stderr)` of `|probe|^{2p}` over paths, for every probe.
fn sample_moments<T: Scalar>(
    model: &CoefficientSet<T>,
    regime: &ScaleRegime<T>,
    cfg: &MomentSweepConfig,
    n_steps: usize,
    dt: T,
    probes: &[Probe],
) -> Result<Vec<(f64, f64)>> {
    let (x0, y0) = (T::lit(cfg.x0), T::lit(cfg.y0));
    let per_path: Vec<Vec<f64>> = (0..cfg.n_paths as u64)
        .into_par_iter()
        .map(|id| {
            let path = simulate_single_path(model, regime, x0, y0, n_steps, dt, cfg.seed, id)?;
            let engine = TangentEngine::new(model, &path, regime.epsilon, regime.eta, dt)?;
            let mut cache = TangentCache {
                engine: &engine,
                first: HashMap::new(),
            };
            probes
                .iter()
                .map(|&pr| Ok(cache.eval(pr)?.as_f64().abs().powi(2 * cfg.p as i32)))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..probes.len())
        .map(|i| {
            let column: Vec<f64> = per_path.iter().map(|v| v[i]).collect();
            mean_and_stderr(&column)
        })
        .collect())
}

/// Runs the six moment bounds across `regimes` (ordered by decreasing `ε`)
/// and the separation-decay checks at the last regime.
pub fn moment_sweep<T: Scalar>(
    model: &CoefficientSet<T>,
    regimes: &[ScaleRegime<T>],
    cfg: &MomentSweepConfig,
) -> Result<MomentSweep> {
    if regimes.is_empty() {
        return Err(invalid("moment sweep needs at least one regime"));
    }
    if !(1..=2).contains(&cfg.p) {
        return Err(invalid("moment order p must be 1 or 2"));
    }
    if cfg.n_paths < 2 {
        return Err(invalid("moment sweep needs at least two paths"));
    }
    if regimes.windows(2).any(|w| !(w[1].epsilon < w[0].epsilon)) {
        return Err(invalid("regimes must be ordered by decreasing epsilon"));
    }
    let sel = &cfg.selection;
    let p = cfg.p;
    let mut scaling_points: Vec<Vec<MomentPoint>> = vec![Vec::new(); BoundId::ALL.len()];
    for regime in regimes {
        regime.validate()?;
        let (n_steps, dt) = regime.time_grid(None)?;
        let (eps, eta, horizon, dtf) = (
            regime.epsilon.as_f64(),
            regime.eta.as_f64(),
            regime.horizon.as_f64(),
            dt.as_f64(),
        );
        // pulled back so that the lag fits inside the horizon
        let r_dy = node((sel.dy_anchor * horizon).min(horizon - sel.dy_lag * eta).max(0.0), dtf, n_steps)?;
        let t_dy = node((r_dy as f64) * dtf + sel.dy_lag * eta, dtf, n_steps)?;
        let r1 = node(sel.pair.0 * horizon, dtf, n_steps)?;
        let r2 = node(sel.pair.1 * horizon, dtf, n_steps)?;
        let probes = [
            Probe::SupX(Noise::W1, 0),
            Probe::SupX(Noise::W2, 0),
            Probe::Y(Noise::W2, r_dy, t_dy),
            Probe::SecondX(Noise::W1, r1, Noise::W1, r2, n_steps),
            Probe::SecondX(Noise::W1, r1, Noise::W2, r2, n_steps),
            Probe::SecondX(Noise::W2, r1, Noise::W2, r2, n_steps),
        ];
        let stats = sample_moments(model, regime, cfg, n_steps, dt, &probes)?;
        let times = [
            (0.0, 0.0),
            (0.0, 0.0),
            (r_dy as f64 * dtf, 0.0),
            (r1 as f64 * dtf, r2 as f64 * dtf),
            (r1 as f64 * dtf, r2 as f64 * dtf),
            (r1 as f64 * dtf, r2 as f64 * dtf),
        ];
        let evals = [0.0, 0.0, t_dy as f64 * dtf, horizon, horizon, horizon];
        for (i, id) in BoundId::ALL.iter().enumerate() {
            let (a, b) = times[i];
            scaling_points[i].push(MomentPoint {
                epsilon: eps,
                eta,
                empirical: stats[i].0,
                envelope: id.envelope(eps, eta, p, cfg.k, a, b, evals[i]),
                stderr: stats[i].1,
            });
        }
    }
    let scaling = BoundId::ALL
        .iter()
        .zip(scaling_points)
        .map(|(&id, pts)| MomentReport::assemble(id, p, pts))
        .collect();

    let regime = regimes.last().expect("nonempty");
    let (n_steps, dt) = regime.time_grid(None)?;
    let (eps, eta, horizon, dtf) = (
        regime.epsilon.as_f64(),
        regime.eta.as_f64(),
        regime.horizon.as_f64(),
        dt.as_f64(),
    );
    let anchor = node(sel.decay_anchor * horizon, dtf, n_steps)?;
    let anchor_t = anchor as f64 * dtf;
    let mut probes = Vec::new();
    let mut dy_kept = Vec::new();
    let mut pair_kept = Vec::new();
    let mut warnings = Vec::new();
    for &s in &sel.dy_separations {
        let t = anchor_t + s * eta;
        if t > horizon * (1.0 + 1e-9) {
            warnings.push(format!("dy_w2: separation {s}·eta exceeds the horizon; skipped"));
            continue;
        }
        probes.push(Probe::Y(Noise::W2, anchor, node(t, dtf, n_steps)?));
        dy_kept.push(s);
    }
    for &s in &sel.pair_separations {
        let r = anchor_t + s * eta;
        if r > horizon * (1.0 + 1e-9) {
            warnings.push(format!("second-order decay: separation {s}·eta exceeds the horizon; skipped"));
            continue;
        }
        pair_kept.push(s);
    }
    for &s in &pair_kept {
        let r1 = node(anchor_t + s * eta, dtf, n_steps)?;
        probes.push(Probe::SecondX(Noise::W1, r1, Noise::W2, anchor, n_steps));
    }
    for &s in &pair_kept {
        let r1 = node(anchor_t + s * eta, dtf, n_steps)?;
        probes.push(Probe::SecondX(Noise::W2, r1, Noise::W2, anchor, n_steps));
    }
    let stats = sample_moments(model, regime, cfg, n_steps, dt, &probes)?;
    let mut it = stats.into_iter();
    let mut collect = |id: BoundId, seps: &[f64], pair: bool| -> Vec<DecayPoint> {
        seps.iter()
            .map(|&s| {
                let (mean, se) = it.next().expect("one statistic per probe");
                let envelope = if pair {
                    id.envelope(eps, eta, p, cfg.k, anchor_t + s * eta, anchor_t, horizon)
                } else {
                    id.envelope(eps, eta, p, cfg.k, anchor_t, 0.0, anchor_t + s * eta)
                };
                DecayPoint {
                    separation: s,
                    empirical: mean,
                    stderr: se,
                    envelope,
                }
            })
            .collect()
    };
    let dy_points = collect(BoundId::DyW2, &dy_kept, false);
    let w1w2_points = collect(BoundId::Dw1W2X, &pair_kept, true);
    let w2w2_points = collect(BoundId::Dw2W2X, &pair_kept, true);
    let decay = vec![
        DecayReport::assemble(BoundId::DyW2, p, eps, eta, dy_points, warnings.clone()),
        DecayReport::assemble(BoundId::Dw1W2X, p, eps, eta, w1w2_points, warnings.clone()),
        DecayReport::assemble(BoundId::Dw2W2X, p, eps, eta, w2w2_points, warnings),
    ];
    Ok(MomentSweep { scaling, decay })
}
