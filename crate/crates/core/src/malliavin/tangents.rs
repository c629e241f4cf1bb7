//! First- and second-order tangent processes along a stored path.
//!
//! Coefficients are frozen at the left node of each step. The fast equation
//! keeps its own linear part exact: the homogeneous solution is multiplied
//! by `ζ_k = exp(∂₂f dt/η + ∂₂τ ΔW²/√η − (∂₂τ)² dt/(2η))`, the step factor
//! of the Z-process, and the `∂₁f DX` forcing is interpolated linearly
//! across the step (weights `φ₁ − φ₂`, `φ₂` of `∂₂f dt/η`). The slow drift
//! is trapezoidal. Both implicit couplings are linear, so each step is a
//! closed-form 2×2 solve. Noise terms are evaluated at the left node.
//! The scheme is second order on deterministic tangent systems, preserves
//! exact zeros, and reproduces `D^{W2}Y = Q1 + Q2` step by step.

use crate::coefficients::{CoefficientSet, ModelJets};
use crate::error::{invalid, Error, Result};
use crate::numerics::{phi1, phi2};
use crate::scalar::Scalar;
use crate::sde::Path;

/// Brownian channel of a derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Noise {
    W1,
    W2,
}

impl Noise {
    pub const BOTH: [Noise; 2] = [Noise::W1, Noise::W2];

    pub fn index(self) -> usize {
        match self {
            Noise::W1 => 0,
            Noise::W2 => 1,
        }
    }

    fn number(self) -> usize {
        self.index() + 1
    }
}

/// `(DX, DY)` from step `start` to the end of the path; zero before `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentPath<T> {
    pub start: usize,
    pub dx: Vec<T>,
    pub dy: Vec<T>,
}

impl<T: Scalar> TangentPath<T> {
    #[inline]
    pub fn at(&self, k: usize) -> (T, T) {
        if k < self.start {
            (T::zero(), T::zero())
        } else {
            (self.dx[k - self.start], self.dy[k - self.start])
        }
    }

    pub fn x_at(&self, k: usize) -> T {
        self.at(k).0
    }

    /// Largest `|DX|` over the stored steps.
    pub fn sup_abs_x(&self) -> T {
        self.dx.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, lambda: T) -> Self {
        Self {
            start: self.start,
            dx: self.dx.iter().map(|&v| v * lambda).collect(),
            dy: self.dy.iter().map(|&v| v * lambda).collect(),
        }
    }
}

/// Per-step coefficient data of one path, shared by every tangent system on it.
pub struct TangentEngine<'a, T> {
    path: &'a Path<T>,
    jets: Vec<ModelJets<T>>,
    /// `log ζ_k`
    log_zeta: Vec<T>,
    zeta: Vec<T>,
    /// `φ₁(z) dt/η` with `z = ∂₂f dt/η`
    forcing: Vec<T>,
    /// `φ₂(z) dt/η`, the weight of the right-node forcing
    forcing_right: Vec<T>,
    sqrt_eps: T,
    inv_sqrt_eta: T,
    dt: T,
}

impl<'a, T: Scalar> TangentEngine<'a, T> {
    /// `epsilon` may be zero here (pure fast noise).
    pub fn new(model: &CoefficientSet<T>, path: &'a Path<T>, epsilon: T, eta: T, dt: T) -> Result<Self> {
        let n = path.dw1.len();
        if path.x.len() != n + 1 || path.y.len() != n + 1 || path.dw2.len() != n {
            return Err(invalid("path arrays are inconsistent"));
        }
        if !(epsilon >= T::zero()) || !(eta > T::zero()) || !(dt > T::zero()) {
            return Err(invalid("tangents need epsilon >= 0, eta > 0, dt > 0"));
        }
        let jets: Vec<ModelJets<T>> = (0..=n).map(|k| model.jets(path.x[k], path.y[k])).collect();
        let ratio = dt / eta;
        let inv_sqrt_eta = T::one() / eta.sqrt();
        let mut log_zeta = Vec::with_capacity(n);
        let mut forcing = Vec::with_capacity(n);
        let mut forcing_right = Vec::with_capacity(n);
        for k in 0..n {
            let z = jets[k].f.d2 * ratio;
            let t2 = jets[k].tau.d2;
            log_zeta.push(z + t2 * path.dw2[k] * inv_sqrt_eta - t2 * t2 * ratio * T::lit(0.5));
            forcing.push(phi1(z) * ratio);
            forcing_right.push(phi2(z) * ratio);
        }
        let zeta = log_zeta.iter().map(|v| v.exp()).collect();
        Ok(Self {
            path,
            jets,
            log_zeta,
            zeta,
            forcing,
            forcing_right,
            sqrt_eps: epsilon.sqrt(),
            inv_sqrt_eta,
            dt,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.log_zeta.len()
    }

    pub fn jets(&self, k: usize) -> &ModelJets<T> {
        &self.jets[k]
    }

    /// One step from node `k` with explicit sources `[c, σ, f, τ]` added to
    /// the respective linear parts.
    #[inline]
    fn step(&self, k: usize, x: T, y: T, src: [T; 4]) -> (T, T) {
        let j = &self.jets[k];
        let half = T::lit(0.5);
        let g = self.forcing[k];
        let g1 = self.forcing_right[k];
        let y_hat = self.zeta[k] * y
            + g * src[2]
            + (g - g1) * j.f.d1 * x
            + self.inv_sqrt_eta * (j.tau.d1 * x + src[3]) * self.path.dw2[k];
        let c1 = g1 * j.f.d1;
        let num = x
            + self.dt * (half * j.c.d1 * x + half * j.c.d2 * (y + y_hat) + src[0])
            + self.sqrt_eps * (j.sigma.d1 * x + j.sigma.d2 * y + src[1]) * self.path.dw1[k];
        let den = T::one() - half * self.dt * (j.c.d1 + j.c.d2 * c1);
        let x_next = num / den;
        (x_next, y_hat + c1 * x_next)
    }

    /// Initial value of the first-order tangent perturbed at step `k`.
    pub fn first_order_initial(&self, noise: Noise, k: usize) -> (T, T) {
        let j = &self.jets[k];
        match noise {
            Noise::W1 => (self.sqrt_eps * j.sigma.value, T::zero()),
            Noise::W2 => (T::zero(), j.tau.value * self.inv_sqrt_eta),
        }
    }

    /// Tangent system started at step `start` with the given initial value.
    /// Sources are zero, so the result is linear in `initial`.
    pub fn propagate_first(&self, start: usize, initial: (T, T), channel: usize) -> Result<TangentPath<T>> {
        let n = self.n_steps();
        if start > n {
            return Err(invalid("tangent start beyond the path"));
        }
        let len = n + 1 - start;
        let mut dx = Vec::with_capacity(len);
        let mut dy = Vec::with_capacity(len);
        let (mut x, mut y) = initial;
        dx.push(x);
        dy.push(y);
        let zero = T::zero();
        for k in start..n {
            let (x_next, y_next) = self.step(k, x, y, [zero; 4]);
            x = x_next;
            y = y_next;
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::TangentBlowUp {
                    channel,
                    r_index: start,
                    step: k + 1,
                });
            }
            dx.push(x);
            dy.push(y);
        }
        Ok(TangentPath { start, dx, dy })
    }

    /// `D_r^{W^j}(X, Y)` with `r` the time of step `start`.
    pub fn first_order(&self, noise: Noise, start: usize) -> Result<TangentPath<T>> {
        let init = self.first_order_initial(noise, start);
        self.propagate_first(start, init, noise.number())
    }

    /// `Z_{r,2}` from step `start` on, as the exponential of the cumulated
    /// log step factors.
    pub fn z_process(&self, start: usize) -> Result<Vec<T>> {
        let n = self.n_steps();
        if start > n {
            return Err(invalid("Z-process start beyond the path"));
        }
        let mut out = Vec::with_capacity(n + 1 - start);
        let mut acc = T::zero();
        out.push(T::one());
        for k in start..n {
            acc += self.log_zeta[k];
            let z = acc.exp();
            if !z.is_finite() {
                return Err(Error::Overflow {
                    r_index: start,
                    step: k + 1,
                });
            }
            out.push(z);
        }
        Ok(out)
    }

    /// `(Q1, Q2)` with `Q1 = Z τ(X_r, Y_r)/√η` and `Q2` the remainder driven
    /// by `D^{W2}X`. Fails if `Q1 + Q2` departs from `D^{W2}Y` by more than
    /// `1e-6 (1 + |D|)`.
    pub fn q_decomposition(&self, first_w2: &TangentPath<T>) -> Result<(Vec<T>, Vec<T>)> {
        let start = first_w2.start;
        let z = self.z_process(start)?;
        let q1_0 = self.jets[start].tau.value * self.inv_sqrt_eta;
        let q1: Vec<T> = z.iter().map(|&v| v * q1_0).collect();
        let n = self.n_steps();
        let mut q2 = Vec::with_capacity(z.len());
        let mut acc = T::zero();
        q2.push(acc);
        for k in start..n {
            let j = &self.jets[k];
            let dx = first_w2.dx[k - start];
            let dx_next = first_w2.dx[k + 1 - start];
            let g1 = self.forcing_right[k];
            acc = self.zeta[k] * acc
                + (self.forcing[k] - g1) * j.f.d1 * dx
                + self.inv_sqrt_eta * j.tau.d1 * dx * self.path.dw2[k]
                + g1 * j.f.d1 * dx_next;
            q2.push(acc);
        }
        let tol = T::lit(1e-6);
        for (i, ((&a, &b), &d)) in q1.iter().zip(&q2).zip(&first_w2.dy).enumerate() {
            let residual = (a + b - d).abs();
            if !(residual <= tol * (T::one() + d.abs())) {
                return Err(Error::Decomposition {
                    residual: residual.as_f64(),
                    step: start + i,
                });
            }
        }
        Ok((q1, q2))
    }

    /// `α₁` (σ) or `α₂` (τ) for the pair `(a = D_{r1}^{j1}, b = D_{r2}^{j2})`.
    fn alpha(&self, slow: bool, j1: Noise, a: &TangentPath<T>, j2: Noise, b: &TangentPath<T>) -> T {
        let active = if slow { Noise::W1 } else { Noise::W2 };
        let term = |jets: &ModelJets<T>, other: (T, T)| {
            let g = if slow { jets.sigma } else { jets.tau };
            g.d1 * other.0 + g.d2 * other.1
        };
        let first = if j1 == active {
            term(&self.jets[a.start], b.at(a.start))
        } else {
            T::zero()
        };
        let second = if j2 == active {
            term(&self.jets[b.start], a.at(b.start))
        } else {
            T::zero()
        };
        first + second
    }

    /// `D²_{r1,r2}^{W^{j1},W^{j2}}(X, Y)` from the first-order tangents
    /// `a = D_{r1}^{W^{j1}}` and `b = D_{r2}^{W^{j2}}` on this path. The
    /// assembled system is symmetric under swapping `(j1, a)` with `(j2, b)`.
    pub fn second_order(&self, j1: Noise, a: &TangentPath<T>, j2: Noise, b: &TangentPath<T>) -> Result<TangentPath<T>> {
        let n = self.n_steps();
        let start = a.start.max(b.start);
        let len = n + 1 - start;
        let mut dx = Vec::with_capacity(len);
        let mut dy = Vec::with_capacity(len);
        let mut x = self.sqrt_eps * self.alpha(true, j1, a, j2, b);
        let mut y = self.alpha(false, j1, a, j2, b) * self.inv_sqrt_eta;
        dx.push(x);
        dy.push(y);
        let channel = 10 * j1.number() + j2.number();
        for k in start..n {
            let j = &self.jets[k];
            let (ax, ay) = a.at(k);
            let (bx, by) = b.at(k);
            let xx = ax * bx;
            let mixed = ax * by + ay * bx;
            let yy = ay * by;
            let quad = |g: &crate::coefficients::Jet<T>| g.d11 * xx + g.d12 * mixed + g.d22 * yy;
            let src = [quad(&j.c), quad(&j.sigma), quad(&j.f), quad(&j.tau)];
            let (x_next, y_next) = self.step(k, x, y, src);
            x = x_next;
            y = y_next;
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::TangentBlowUp {
                    channel,
                    r_index: start,
                    step: k + 1,
                });
            }
            dx.push(x);
            dy.push(y);
        }
        Ok(TangentPath { start, dx, dy })
    }
}

/// First-order tangents for both channels at every node of `r_nodes`.
#[derive(Debug, Clone)]
pub struct FirstOrderTangents<T> {
    pub r_nodes: Vec<usize>,
    /// `[channel][r]`
    pub paths: [Vec<TangentPath<T>>; 2],
}

impl<T: Scalar> FirstOrderTangents<T> {
    pub fn get(&self, noise: Noise, r: usize) -> &TangentPath<T> {
        &self.paths[noise.index()][r]
    }
}

/// `D_r^{W^j}` for `j ∈ {1, 2}` and every step index in `r_nodes`.
pub fn first_order_tangents<T: Scalar>(engine: &TangentEngine<'_, T>, r_nodes: &[usize]) -> Result<FirstOrderTangents<T>> {
    let build = |noise: Noise| -> Result<Vec<TangentPath<T>>> {
        r_nodes.iter().map(|&k| engine.first_order(noise, k)).collect()
    };
    Ok(FirstOrderTangents {
        r_nodes: r_nodes.to_vec(),
        paths: [build(Noise::W1)?, build(Noise::W2)?],
    })
}

/// Second-order tangent keyed by channels and r-grid positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairKey {
    pub j1: Noise,
    pub r1: usize,
    pub j2: Noise,
    pub r2: usize,
}

pub fn second_order_tangents<T: Scalar>(
    engine: &TangentEngine<'_, T>,
    first: &FirstOrderTangents<T>,
    pairs: &[PairKey],
) -> Result<Vec<TangentPath<T>>> {
    pairs
        .iter()
        .map(|p| engine.second_order(p.j1, first.get(p.j1, p.r1), p.j2, first.get(p.j2, p.r2)))
        .collect()
}

/// All four channel pairs over the full r-grid, evaluated at step `k`:
/// `values[((i*2 + j)*n_r + u)*n_r + v] = D²_{u,v}^{W^i,W^j} X` at step `k`.
pub fn second_order_grid_at<T: Scalar>(
    engine: &TangentEngine<'_, T>,
    first: &FirstOrderTangents<T>,
    k: usize,
) -> Result<Vec<T>> {
    let n_r = first.r_nodes.len();
    let mut values = vec![T::zero(); 4 * n_r * n_r];
    for i in Noise::BOTH {
        for j in Noise::BOTH {
            for u in 0..n_r {
                for v in 0..n_r {
                    let (a, b) = (first.get(i, u), first.get(j, v));
                    if a.start.max(b.start) > k {
                        continue;
                    }
                    let d2 = engine.second_order(i, a, j, b)?;
                    values[((i.index() * 2 + j.index()) * n_r + u) * n_r + v] = d2.x_at(k);
                }
            }
        }
    }
    Ok(values)
}
