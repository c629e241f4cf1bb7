//! Malliavin tangent processes along stored paths and the functionals and
//! moment checks built on them.

pub mod functionals;
pub mod moments;
pub mod quadruple;
pub mod tangents;

pub use functionals::{contraction_norm_second, hnorm_first, SecondOrderGrid, MIN_R_NODES};
pub use moments::{
    moment_sweep, BoundId, DecayPoint, DecayReport, MomentPoint, MomentReport, MomentSelection, MomentSweep,
    MomentSweepConfig,
};
pub use quadruple::{quadruple_integral_analytic, quadruple_integral_check, quadruple_integral_quadrature, QuadrupleCheck};
pub use tangents::{
    first_order_tangents, second_order_grid_at, second_order_tangents, FirstOrderTangents, Noise, PairKey,
    TangentEngine, TangentPath,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{invalid, Result};
use crate::numerics::{linspace, mean_and_stderr};
use crate::scalar::Scalar;
use crate::sde::{simulate_paths, Path, ScaleRegime};

/// `n_r` equispaced step indices covering `[0, n_steps]`, rounded to the
/// nearest node.
pub fn default_r_nodes(n_steps: usize, n_r: usize) -> Vec<usize> {
    linspace(0.0f64, n_steps as f64, n_r)
        .into_iter()
        .map(|v| v.round() as usize)
        .collect()
}

/// `Z_{r,2}` on one path from step `r` on.
pub fn z_process<T: Scalar>(model: &CoefficientSet<T>, path: &Path<T>, epsilon: T, eta: T, dt: T, r: usize) -> Result<Vec<T>> {
    TangentEngine::new(model, path, epsilon, eta, dt)?.z_process(r)
}

/// `(Q1, Q2)` on one path from step `r` on.
pub fn q_decomposition<T: Scalar>(
    model: &CoefficientSet<T>,
    path: &Path<T>,
    epsilon: T,
    eta: T,
    dt: T,
    r: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let engine = TangentEngine::new(model, path, epsilon, eta, dt)?;
    let d = engine.first_order(Noise::W2, r)?;
    engine.q_decomposition(&d)
}

/// `‖DX_t‖⁴_H` on one path, with the tangents read at step `t`.
pub fn path_hnorm<T: Scalar>(first: &FirstOrderTangents<T>, dt: T, t: usize) -> Result<T> {
    let mut r_times = Vec::new();
    let mut w1 = Vec::new();
    let mut w2 = Vec::new();
    for (i, &r) in first.r_nodes.iter().enumerate() {
        if r > t {
            continue;
        }
        r_times.push(T::from_usize_lossy(r) * dt);
        w1.push(first.paths[0][i].x_at(t));
        w2.push(first.paths[1][i].x_at(t));
    }
    hnorm_first(&r_times, &w1, &w2)
}

/// Monte Carlo means of `‖DX_T‖⁴_H` and `‖D²X_T ⊗₁ D²X_T‖²` at one regime.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalMoments {
    pub epsilon: f64,
    pub eta: f64,
    pub n_paths: usize,
    pub n_r: usize,
    pub hnorm4: f64,
    pub hnorm4_stderr: f64,
    pub contraction: f64,
    pub contraction_stderr: f64,
}

/// Both functionals on `n_paths` fresh paths with an `n_r`-node r-grid.
pub fn functional_moments<T: Scalar>(
    model: &CoefficientSet<T>,
    regime: &ScaleRegime<T>,
    x0: T,
    y0: T,
    n_paths: usize,
    n_r: usize,
    seed: u64,
) -> Result<FunctionalMoments> {
    if n_r < MIN_R_NODES {
        return Err(invalid(format!("functionals need at least {MIN_R_NODES} r-nodes")));
    }
    if n_paths < 2 {
        return Err(invalid("functionals need at least two paths"));
    }
    let bundle = simulate_paths(model, regime, x0, y0, None, n_paths, seed)?;
    let (dt, n) = (bundle.dt, bundle.n_steps);
    let nodes = default_r_nodes(n, n_r);
    let r_times: Vec<T> = nodes.iter().map(|&k| T::from_usize_lossy(k) * dt).collect();
    let per_path: Vec<(f64, f64)> = bundle
        .paths
        .par_iter()
        .map(|p| {
            let engine = TangentEngine::new(model, p, regime.epsilon, regime.eta, dt)?;
            let first = first_order_tangents(&engine, &nodes)?;
            let h = path_hnorm(&first, dt, n)?;
            let grid = SecondOrderGrid::new(n_r, second_order_grid_at(&engine, &first, n)?)?;
            let c = contraction_norm_second(&r_times, &grid)?;
            Ok((h.as_f64(), c.as_f64()))
        })
        .collect::<Result<_>>()?;
    let (h, c): (Vec<f64>, Vec<f64>) = per_path.into_iter().unzip();
    let (hnorm4, hnorm4_stderr) = mean_and_stderr(&h);
    let (contraction, contraction_stderr) = mean_and_stderr(&c);
    Ok(FunctionalMoments {
        epsilon: regime.epsilon.as_f64(),
        eta: regime.eta.as_f64(),
        n_paths,
        n_r,
        hnorm4,
        hnorm4_stderr,
        contraction,
        contraction_stderr,
    })
}
