//! Euler-Maruyama simulation of the slow-fast system
//!
//! ```text
//! dX = c(X, Y) dt + sqrt(eps) sigma(X, Y) dW1
//! dY = f(X, Y)/eta dt + tau(X, Y)/sqrt(eta) dW2
//! ```
//!
//! and the fluctuation samples `(X_t - X̄_t)/sqrt(eps)`.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{invalid, Error, Result};
use crate::homogenization::{node_index, LimitTrajectory};
use crate::rng::{std_normal, stream, Channel};
use crate::scalar::Scalar;

/// Steps per fast relaxation time required by the stability guard.
pub const STEPS_PER_RELAXATION: f64 = 20.0;

/// Small parameters, declared limit regime and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleRegime<T> {
    pub epsilon: T,
    pub eta: T,
    /// Declared limit of `sqrt(eps/eta)`; `inf` allowed.
    pub gamma: f64,
    pub horizon: T,
}

impl<T: Scalar> ScaleRegime<T> {
    pub fn new(epsilon: T, eta: T, gamma: f64, horizon: T) -> Result<Self> {
        let r = Self {
            epsilon,
            eta,
            gamma,
            horizon,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > T::zero()) || !self.epsilon.is_finite() {
            return Err(invalid("epsilon must be positive and finite"));
        }
        if !(self.eta > T::zero()) || !self.eta.is_finite() {
            return Err(invalid("eta must be positive and finite"));
        }
        if !(self.gamma > 0.0) {
            return Err(invalid("gamma must be positive (inf allowed)"));
        }
        if !(self.horizon > T::zero()) || !self.horizon.is_finite() {
            return Err(invalid("horizon T must be positive and finite"));
        }
        Ok(())
    }

    pub fn eta_over_epsilon(&self) -> f64 {
        (self.eta / self.epsilon).as_f64()
    }

    /// `|sqrt(eps/eta) - gamma|` for finite gamma.
    pub fn regime_drift(&self) -> Option<f64> {
        self.gamma
            .is_finite()
            .then(|| ((self.epsilon / self.eta).as_f64().sqrt() - self.gamma).abs())
    }

    /// `sqrt(eps) / D` with `D = sqrt(eta/eps)` for `gamma = inf` and
    /// `D = sqrt(eps/eta) - gamma` otherwise; must stay away from zero along an
    /// admissible sweep. Infinite when `D = 0`.
    pub fn normalization_quotient(&self) -> f64 {
        let eps = self.epsilon.as_f64();
        let eta = self.eta.as_f64();
        let d = if self.gamma.is_infinite() {
            (eta / eps).sqrt()
        } else {
            (eps / eta).sqrt() - self.gamma
        };
        if d == 0.0 {
            f64::INFINITY
        } else {
            eps.sqrt() / d
        }
    }

    pub fn max_dt(&self) -> T {
        self.eta / T::lit(STEPS_PER_RELAXATION)
    }

    /// Step count and step size for a requested `dt` (default `eta/20`).
    /// The step is shrunk so that it divides the horizon.
    pub fn time_grid(&self, dt: Option<T>) -> Result<(usize, T)> {
        let limit = self.max_dt();
        let dt = dt.unwrap_or(limit);
        if !(dt > T::zero()) {
            return Err(invalid("dt must be positive"));
        }
        if dt > limit * T::lit(1.0 + 1e-12) {
            return Err(Error::Stability {
                dt: dt.as_f64(),
                eta: self.eta.as_f64(),
                limit: limit.as_f64(),
            });
        }
        let n = (self.horizon / dt - T::lit(1e-9)).ceil().to_usize().unwrap_or(0).max(1);
        Ok((n, self.horizon / T::from_usize_lossy(n)))
    }
}

/// One simulated path with the increments that drove it.
#[derive(Debug, Clone, PartialEq)]
pub struct Path<T> {
    pub id: u64,
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub dw1: Vec<T>,
    pub dw2: Vec<T>,
}

/// Paths on a shared uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle<T> {
    pub dt: T,
    pub n_steps: usize,
    pub x0: T,
    pub y0: T,
    pub epsilon: T,
    pub eta: T,
    pub master_seed: u64,
    pub paths: Vec<Path<T>>,
}

impl<T: Scalar> PathBundle<T> {
    pub fn t_grid(&self) -> Vec<T> {
        (0..=self.n_steps).map(|k| self.dt * T::from_usize_lossy(k)).collect()
    }

    /// Smallest and largest fast state visited by any path.
    pub fn y_range(&self) -> (T, T) {
        self.paths.iter().flat_map(|p| p.y.iter()).fold(
            (T::infinity(), T::neg_infinity()),
            |(lo, hi), &v| (lo.min(v), hi.max(v)),
        )
    }

    /// Little-endian dump: header `n_paths: u64, n_steps: u64, dt, x0, y0,
    /// epsilon, eta: f64, master_seed: u64`, then per path the blocks
    /// `X[n_steps+1], Y[n_steps+1], dW1[n_steps], dW2[n_steps]` as `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&(self.paths.len() as u64).to_le_bytes())?;
        w.write_all(&(self.n_steps as u64).to_le_bytes())?;
        for v in [self.dt, self.x0, self.y0, self.epsilon, self.eta] {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        w.write_all(&self.master_seed.to_le_bytes())?;
        for p in &self.paths {
            for block in [&p.x, &p.y, &p.dw1, &p.dw2] {
                for v in block.iter() {
                    w.write_all(&v.as_f64().to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`PathBundle::write_binary`]. Path ids are the block order.
    pub fn read_binary<R: Read>(mut r: R) -> io::Result<Self> {
        let mut buf = [0u8; 8];
        let mut word = |r: &mut R| -> io::Result<[u8; 8]> {
            r.read_exact(&mut buf)?;
            Ok(buf)
        };
        let n_paths = u64::from_le_bytes(word(&mut r)?) as usize;
        let n_steps = u64::from_le_bytes(word(&mut r)?) as usize;
        let mut head = [0f64; 5];
        for h in &mut head {
            *h = f64::from_le_bytes(word(&mut r)?);
        }
        let master_seed = u64::from_le_bytes(word(&mut r)?);
        let mut block = |r: &mut R, len: usize| -> io::Result<Vec<T>> {
            (0..len)
                .map(|_| word(r).map(|b| T::lit(f64::from_le_bytes(b))))
                .collect()
        };
        let mut paths = Vec::with_capacity(n_paths);
        for id in 0..n_paths {
            let x = block(&mut r, n_steps + 1)?;
            let y = block(&mut r, n_steps + 1)?;
            let dw1 = block(&mut r, n_steps)?;
            let dw2 = block(&mut r, n_steps)?;
            paths.push(Path {
                id: id as u64,
                x,
                y,
                dw1,
                dw2,
            });
        }
        Ok(Self {
            dt: T::lit(head[0]),
            n_steps,
            x0: T::lit(head[1]),
            y0: T::lit(head[2]),
            epsilon: T::lit(head[3]),
            eta: T::lit(head[4]),
            master_seed,
            paths,
        })
    }

    /// Columns `path_id,t,X,Y`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "path_id,t,X,Y")?;
        let t = self.t_grid();
        for p in &self.paths {
            for k in 0..=self.n_steps {
                writeln!(
                    w,
                    "{},{:e},{:e},{:e}",
                    p.id,
                    t[k].as_f64(),
                    p.x[k].as_f64(),
                    p.y[k].as_f64()
                )?;
            }
        }
        Ok(())
    }
}

/// One Euler-Maruyama step.
#[inline]
pub fn em_step<T: Scalar>(
    model: &CoefficientSet<T>,
    sqrt_eps: T,
    inv_eta: T,
    inv_sqrt_eta: T,
    x: T,
    y: T,
    dt: T,
    dw1: T,
    dw2: T,
) -> (T, T) {
    let c = model.c.value(x, y);
    let sigma = model.sigma.value(x, y);
    let f = model.f.value(x, y);
    let tau = model.tau.value(x, y);
    (
        x + c * dt + sqrt_eps * sigma * dw1,
        y + f * inv_eta * dt + tau * inv_sqrt_eta * dw2,
    )
}

/// Integrates one path driven by the given increments.
pub fn integrate_path<T: Scalar>(
    model: &CoefficientSet<T>,
    epsilon: T,
    eta: T,
    x0: T,
    y0: T,
    dt: T,
    dw1: &[T],
    dw2: &[T],
    path_id: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if dw1.len() != dw2.len() {
        return Err(invalid("increment arrays differ in length"));
    }
    let n = dw1.len();
    let (se, ie, ise) = (epsilon.sqrt(), T::one() / eta, T::one() / eta.sqrt());
    let mut xs = Vec::with_capacity(n + 1);
    let mut ys = Vec::with_capacity(n + 1);
    let (mut x, mut y) = (x0, y0);
    xs.push(x);
    ys.push(y);
    for k in 0..n {
        (x, y) = em_step(model, se, ie, ise, x, y, dt, dw1[k], dw2[k]);
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::BlowUp {
                path: path_id as usize,
                step: k + 1,
            });
        }
        xs.push(x);
        ys.push(y);
    }
    Ok((xs, ys))
}

/// Increments `sqrt(dt) N(0,1)` of path `path_id` on both channels.
pub fn path_increments<T: Scalar>(master_seed: u64, path_id: u64, n_steps: usize, dt: T) -> (Vec<T>, Vec<T>) {
    let sq = dt.sqrt();
    let mut r1 = stream(master_seed, path_id, Channel::W1);
    let mut r2 = stream(master_seed, path_id, Channel::W2);
    let dw1 = (0..n_steps).map(|_| sq * std_normal::<T>(&mut r1)).collect();
    let dw2 = (0..n_steps).map(|_| sq * std_normal::<T>(&mut r2)).collect();
    (dw1, dw2)
}

/// Simulates one stored path.
pub fn simulate_single_path<T: Scalar>(
    model: &CoefficientSet<T>,
    regime: &ScaleRegime<T>,
    x0: T,
    y0: T,
    n_steps: usize,
    dt: T,
    master_seed: u64,
    path_id: u64,
) -> Result<Path<T>> {
    let (dw1, dw2) = path_increments(master_seed, path_id, n_steps, dt);
    let (x, y) = integrate_path(model, regime.epsilon, regime.eta, x0, y0, dt, &dw1, &dw2, path_id)?;
    Ok(Path {
        id: path_id,
        x,
        y,
        dw1,
        dw2,
    })
}

/// Simulates `n_paths` stored paths on `[0, T]`; `dt` defaults to `eta/20`.
pub fn simulate_paths<T: Scalar>(
    model: &CoefficientSet<T>,
    regime: &ScaleRegime<T>,
    x0: T,
    y0: T,
    dt: Option<T>,
    n_paths: usize,
    master_seed: u64,
) -> Result<PathBundle<T>> {
    regime.validate()?;
    if n_paths == 0 {
        return Err(invalid("n_paths must be >= 1"));
    }
    let (n_steps, dt) = regime.time_grid(dt)?;
    let paths = (0..n_paths as u64)
        .into_par_iter()
        .map(|id| simulate_single_path(model, regime, x0, y0, n_steps, dt, master_seed, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(PathBundle {
        dt,
        n_steps,
        x0,
        y0,
        epsilon: regime.epsilon,
        eta: regime.eta,
        master_seed,
        paths,
    })
}

/// Slow states at selected nodes, without storing whole paths.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSamples<T> {
    pub dt: T,
    pub n_steps: usize,
    pub nodes: Vec<usize>,
    /// `x[i][p]`: node `i`, path `p`
    pub x: Vec<Vec<T>>,
    pub y_min: T,
    pub y_max: T,
}

/// Same paths as [`simulate_paths`] (identical increments), recording only
/// `X` at the step indices `nodes`.
pub fn simulate_at_nodes<T: Scalar>(
    model: &CoefficientSet<T>,
    regime: &ScaleRegime<T>,
    x0: T,
    y0: T,
    dt: Option<T>,
    n_paths: usize,
    master_seed: u64,
    nodes: &[usize],
) -> Result<NodeSamples<T>> {
    regime.validate()?;
    if n_paths == 0 {
        return Err(invalid("n_paths must be >= 1"));
    }
    let (n_steps, dt) = regime.time_grid(dt)?;
    if nodes.iter().any(|&k| k > n_steps) {
        return Err(invalid("requested node beyond the horizon"));
    }
    let (se, ie, ise) = (regime.epsilon.sqrt(), T::one() / regime.eta, T::one() / regime.eta.sqrt());
    let sq = dt.sqrt();
    let per_path = (0..n_paths as u64)
        .into_par_iter()
        .map(|id| {
            let mut r1 = stream(master_seed, id, Channel::W1);
            let mut r2 = stream(master_seed, id, Channel::W2);
            let (mut x, mut y) = (x0, y0);
            let (mut lo, mut hi) = (y0, y0);
            let mut out = vec![T::zero(); nodes.len()];
            let record = |k: usize, x: T, out: &mut [T]| {
                for (slot, &node) in out.iter_mut().zip(nodes) {
                    if node == k {
                        *slot = x;
                    }
                }
            };
            record(0, x, &mut out);
            for k in 0..n_steps {
                let dw1 = sq * std_normal::<T>(&mut r1);
                let dw2 = sq * std_normal::<T>(&mut r2);
                (x, y) = em_step(model, se, ie, ise, x, y, dt, dw1, dw2);
                if !x.is_finite() || !y.is_finite() {
                    return Err(Error::BlowUp {
                        path: id as usize,
                        step: k + 1,
                    });
                }
                lo = lo.min(y);
                hi = hi.max(y);
                record(k + 1, x, &mut out);
            }
            Ok((out, lo, hi))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut x = vec![Vec::with_capacity(n_paths); nodes.len()];
    let (mut y_min, mut y_max) = (T::infinity(), T::neg_infinity());
    for (vals, lo, hi) in per_path {
        for (i, v) in vals.into_iter().enumerate() {
            x[i].push(v);
        }
        y_min = y_min.min(lo);
        y_max = y_max.max(hi);
    }
    Ok(NodeSamples {
        dt,
        n_steps,
        nodes: nodes.to_vec(),
        x,
        y_min,
        y_max,
    })
}

/// `θ = (X_t - X̄_t)/sqrt(eps)` across paths at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationSample<T> {
    pub t: T,
    pub theta: Vec<T>,
    pub limit_mean: T,
    pub limit_var: T,
}

/// θ from slow states at time `t` and the limit trajectory.
pub fn fluctuations_from_states<T: Scalar>(
    x_t: &[T],
    trajectory: &LimitTrajectory<T>,
    epsilon: T,
    t: T,
) -> Result<FluctuationSample<T>> {
    let k = trajectory.node_index(t)?;
    let x_bar = trajectory.x_bar[k];
    let scale = T::one() / epsilon.sqrt();
    let theta: Vec<T> = x_t.iter().map(|&x| (x - x_bar) * scale).collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite fluctuation sample"));
    }
    let limit_var = trajectory.sigma2.get(k).copied().unwrap_or(T::nan());
    Ok(FluctuationSample {
        t,
        theta,
        limit_mean: T::zero(),
        limit_var,
    })
}

/// θ at time `t` for every path of a bundle. `t` must be a node of both grids
/// within half a step. The limit variance is read from `trajectory.sigma2`
/// (NaN if it was not filled).
pub fn fluctuation_samples<T: Scalar>(
    bundle: &PathBundle<T>,
    trajectory: &LimitTrajectory<T>,
    t: T,
) -> Result<FluctuationSample<T>> {
    let k = node_index(&bundle.t_grid(), bundle.dt, t)?;
    let x_t: Vec<T> = bundle.paths.iter().map(|p| p.x[k]).collect();
    fluctuations_from_states(&x_t, trajectory, bundle.epsilon, t)
}

/// `n` draws from `N(0, sigma2)` on the limit-law stream of `seed`.
pub fn limit_gaussian_samples<T: Scalar>(sigma2: T, n: usize, seed: u64) -> Result<Vec<T>> {
    if !(sigma2 >= T::zero()) {
        return Err(invalid("limit variance must be nonnegative"));
    }
    let sd = sigma2.sqrt();
    let mut rng = stream(seed, 0, Channel::Limit);
    Ok((0..n).map(|_| sd * std_normal::<T>(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::affine_oracle;

    #[test]
    fn stability_guard() {
        let r = ScaleRegime::new(0.01f64, 0.01, 1.0, 1.0).unwrap();
        assert!(matches!(r.time_grid(Some(0.001)), Err(Error::Stability { .. })));
        let (n, dt) = r.time_grid(None).unwrap();
        assert_eq!(n, 2000);
        assert!((dt - 5e-4).abs() < 1e-18);
        let (n, dt) = r.time_grid(Some(3e-4)).unwrap();
        assert_eq!(n, 3334);
        assert!(dt <= 3e-4);
        assert!(ScaleRegime::new(0.0, 0.01, 1.0, 1.0).is_err());
    }

    #[test]
    fn quotient_and_drift() {
        let r = ScaleRegime::new(0.04, 0.01, 1.0, 1.0).unwrap();
        assert!((r.regime_drift().unwrap() - 1.0).abs() < 1e-12);
        assert!((r.normalization_quotient() - 0.2).abs() < 1e-12);
        let r = ScaleRegime::new(0.01, 0.01, 1.0, 1.0).unwrap();
        assert!(r.normalization_quotient().is_infinite());
        let r = ScaleRegime::new(0.01, 0.0001, f64::INFINITY, 1.0).unwrap();
        assert!(r.regime_drift().is_none());
        assert!((r.normalization_quotient() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_dump_round_trips() {
        let model = affine_oracle::<f64>();
        let r = ScaleRegime::new(0.1, 0.1, 1.0, 0.1).unwrap();
        let b = simulate_paths(&model, &r, 1.0, 1.0, None, 3, 11).unwrap();
        let mut buf = Vec::new();
        b.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 * (8 + 3 * (2 * (b.n_steps + 1) + 2 * b.n_steps)));
        let back = PathBundle::<f64>::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn node_samples_match_stored_paths() {
        let model = affine_oracle::<f64>();
        let r = ScaleRegime::new(0.1, 0.1, 1.0, 0.5).unwrap();
        let b = simulate_paths(&model, &r, 1.0, 1.0, None, 5, 3).unwrap();
        let nodes = [0, b.n_steps / 2, b.n_steps];
        let s = simulate_at_nodes(&model, &r, 1.0, 1.0, None, 5, 3, &nodes).unwrap();
        for (i, &k) in nodes.iter().enumerate() {
            for (p, path) in b.paths.iter().enumerate() {
                assert_eq!(s.x[i][p], path.x[k]);
            }
        }
        assert_eq!(s.y_min, b.y_range().0);
    }

    #[test]
    fn degenerate_and_negative_limit_samples() {
        assert!(limit_gaussian_samples(0.0f64, 10, 1).unwrap().iter().all(|&v| v == 0.0));
        assert!(limit_gaussian_samples(-1.0f64, 10, 1).is_err());
        assert_eq!(
            limit_gaussian_samples(2.0f64, 10, 5).unwrap(),
            limit_gaussian_samples(2.0f64, 10, 5).unwrap()
        );
    }
}
