//! Deterministic limit objects: invariant density of the frozen fast process,
//! averaged drift, Poisson corrector, effective diffusion, limit ODE and the
//! limiting fluctuation variance.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{invalid, Error, Result};
use crate::numerics::{
    cumulative_corrected, cumulative_corrected_from_right, linspace, trapezoid, NaturalCubicSpline,
};
use crate::scalar::Scalar;

/// Boundary/peak density ratio above which a window is rejected.
pub const TRUNCATION_LIMIT: f64 = 1e-8;
/// Boundary/peak density ratio the automatic window aims for.
pub const WINDOW_TARGET: f64 = 1e-10;
/// Half-width of the initial window in units of the curvature width.
const WINDOW_HALF_WIDTHS: f64 = 8.0;
const WINDOW_GROWTH: f64 = 1.5;
const MAX_WIDENINGS: usize = 40;
/// Density ratio below which the corrector is extended instead of evaluated.
const UNDERFLOW_RATIO: f64 = 1e-300;
/// Residual tolerance of the Poisson equation on row interiors.
pub const RESIDUAL_TOLERANCE: f64 = 1e-4;
/// Fraction of the window cut from each side when checking residuals.
const INTERIOR_MARGIN: f64 = 0.1;

/// `1/gamma^2`, with `gamma = inf` mapping to zero.
pub fn inv_gamma_sq(gamma: f64) -> f64 {
    if gamma.is_infinite() {
        0.0
    } else {
        1.0 / (gamma * gamma)
    }
}

/// `(log m)'(y) = 2f/tau^2 - 2 d2tau/tau` and its y-derivative.
fn log_density_slope<T: Scalar>(model: &CoefficientSet<T>, x: T, y: T) -> (T, T) {
    let f = model.f.jet(x, y);
    let tau = model.tau.jet(x, y);
    let two = T::lit(2.0);
    let t2 = tau.value * tau.value;
    let slope = two * f.value / t2 - two * tau.d2 / tau.value;
    let curvature = two * f.d2 / t2 - T::lit(4.0) * f.value * tau.d2 / (t2 * tau.value)
        - two * tau.d22 / tau.value
        + two * tau.d2 * tau.d2 / t2;
    (slope, curvature)
}

/// Mode-centred window `[y_c - 8s, y_c + 8s]`, widened per side by 1.5x
/// until the boundary density falls below `1e-10` of the peak.
pub fn y_window<T: Scalar>(model: &CoefficientSet<T>, x: T, ny: usize) -> Result<(T, T)> {
    let g = |y: T| log_density_slope(model, x, y).0;
    let fail = |reason: &str| Error::Homogenization {
        x: x.as_f64(),
        reason: reason.to_string(),
    };
    // Bracket the mode of the density: g > 0 to the left, g < 0 to the right.
    let (mut a, mut b) = (-T::one(), T::one());
    let mut expansions = 0;
    while !(g(a) > T::zero()) || !(g(b) < T::zero()) {
        if !(g(a) > T::zero()) {
            a = a * T::lit(2.0);
        }
        if !(g(b) < T::zero()) {
            b = b * T::lit(2.0);
        }
        expansions += 1;
        if expansions > 60 {
            return Err(fail("fast drift is not confining: no density mode found"));
        }
    }
    for _ in 0..200 {
        let mid = (a + b) * T::lit(0.5);
        if mid == a || mid == b {
            break;
        }
        if g(mid) > T::zero() {
            a = mid;
        } else {
            b = mid;
        }
    }
    let yc = (a + b) * T::lit(0.5);
    let curvature = log_density_slope(model, x, yc).1;
    let s = if curvature < T::zero() && curvature.is_finite() {
        T::one() / (-curvature).sqrt()
    } else {
        T::one()
    };
    let half = T::lit(WINDOW_HALF_WIDTHS) * s;
    let (mut lo, mut hi) = (yc - half, yc + half);
    for _ in 0..MAX_WIDENINGS {
        let row = density_unchecked(model, x, (lo, hi), ny)?;
        let n = row.m.len();
        let peak = row.m.iter().copied().fold(T::zero(), T::max);
        let left = row.m[0] / peak;
        let right = row.m[n - 1] / peak;
        let target = T::lit(WINDOW_TARGET);
        if left < target && right < target {
            return Ok((lo, hi));
        }
        if !(left < target) {
            lo = yc - (yc - lo) * T::lit(WINDOW_GROWTH);
        }
        if !(right < target) {
            hi = yc + (hi - yc) * T::lit(WINDOW_GROWTH);
        }
    }
    Err(fail("window widening did not reach the boundary mass target"))
}

/// Normalized invariant density on a uniform y-grid.
#[derive(Debug, Clone)]
pub struct DensityRow<T> {
    pub x: T,
    pub y: Vec<T>,
    pub h: T,
    pub m: Vec<T>,
    /// `(log m)'` at the nodes.
    pub log_slope: Vec<T>,
    /// max(boundary density) / peak density
    pub boundary_ratio: f64,
}

fn density_unchecked<T: Scalar>(
    model: &CoefficientSet<T>,
    x: T,
    window: (T, T),
    ny: usize,
) -> Result<DensityRow<T>> {
    let y = linspace(window.0, window.1, ny);
    let h = y[1] - y[0];
    let two = T::lit(2.0);
    let mut integrand = Vec::with_capacity(ny);
    let mut integrand_d = Vec::with_capacity(ny);
    let mut log_tau_sq = Vec::with_capacity(ny);
    let mut log_slope = Vec::with_capacity(ny);
    for &yj in &y {
        let f = model.f.jet(x, yj);
        let tau = model.tau.jet(x, yj);
        let t2 = tau.value * tau.value;
        if !(t2 > T::zero()) || !f.is_finite() || !tau.is_finite() {
            return Err(Error::Homogenization {
                x: x.as_f64(),
                reason: format!("tau^2 must be positive and finite on the window (y={yj})"),
            });
        }
        integrand.push(two * f.value / t2);
        integrand_d.push(two * f.d2 / t2 - T::lit(4.0) * f.value * tau.d2 / (t2 * tau.value));
        log_tau_sq.push(t2.ln());
        log_slope.push(two * f.value / t2 - two * tau.d2 / tau.value);
    }
    let exponent = cumulative_corrected(&integrand, &integrand_d, h);
    let log_m: Vec<T> = exponent.iter().zip(&log_tau_sq).map(|(&e, &l)| e - l).collect();
    let top = log_m.iter().copied().fold(T::neg_infinity(), T::max);
    let mut m: Vec<T> = log_m.iter().map(|&l| (l - top).exp()).collect();
    let mass = trapezoid(&m, h);
    for v in &mut m {
        *v /= mass;
    }
    let peak = m.iter().copied().fold(T::zero(), T::max);
    let boundary_ratio = (m[0].max(m[ny - 1]) / peak).as_f64();
    Ok(DensityRow {
        x,
        y,
        h,
        m,
        log_slope,
        boundary_ratio,
    })
}

/// `m(y|x) ∝ tau^-2 exp(∫ 2f/tau^2)`, normalized by the trapezoid rule.
pub fn invariant_density<T: Scalar>(
    model: &CoefficientSet<T>,
    x: T,
    window: (T, T),
    ny: usize,
) -> Result<DensityRow<T>> {
    if ny < 64 {
        return Err(invalid("invariant density needs ny >= 64"));
    }
    if !(window.0 < window.1) {
        return Err(invalid("y-window must be non-empty"));
    }
    let row = density_unchecked(model, x, window, ny)?;
    if row.boundary_ratio > TRUNCATION_LIMIT {
        return Err(Error::Truncation {
            x: x.as_f64(),
            lo: window.0.as_f64(),
            hi: window.1.as_f64(),
            ratio: row.boundary_ratio,
            limit: TRUNCATION_LIMIT,
        });
    }
    Ok(row)
}

/// `c̄(x) = ∫ c(x, y) m(y|x) dy`.
pub fn averaged_drift<T: Scalar>(model: &CoefficientSet<T>, row: &DensityRow<T>) -> T {
    let integrand: Vec<T> = row
        .y
        .iter()
        .zip(&row.m)
        .map(|(&y, &m)| model.c.value(row.x, y) * m)
        .collect();
    trapezoid(&integrand, row.h)
}

/// Corrector row and the boundary-quality diagnostics of its construction.
#[derive(Debug, Clone)]
pub struct PoissonRow<T> {
    pub phi: Vec<T>,
    pub dy_phi: Vec<T>,
    pub warnings: Vec<String>,
}

/// Solves `f Φ' + tau^2/2 Φ'' = c - c̄` with `∫ Φ m = 0`.
///
/// `Φ' = 2 I / (tau^2 m)` with `I(y) = ∫_{-inf}^y (c - c̄) m`; left of the
/// density mode `I` is accumulated from the lower end, right of it as
/// `-∫_y^{inf}`, so neither side loses digits to cancellation. The mass beyond
/// each window end is estimated from the local exponential decay of `m`.
pub fn solve_poisson<T: Scalar>(
    model: &CoefficientSet<T>,
    row: &DensityRow<T>,
    c_bar: T,
) -> PoissonRow<T> {
    let n = row.y.len();
    let x = row.x;
    let two = T::lit(2.0);
    let mut g = Vec::with_capacity(n);
    let mut dg = Vec::with_capacity(n);
    let mut centered = Vec::with_capacity(n);
    let mut tau_sq = Vec::with_capacity(n);
    let mut f_val = Vec::with_capacity(n);
    for j in 0..n {
        let c = model.c.jet(x, row.y[j]);
        let tau = model.tau.value(x, row.y[j]);
        let cc = c.value - c_bar;
        let m = row.m[j];
        g.push(cc * m);
        dg.push(c.d2 * m + cc * m * row.log_slope[j]);
        centered.push(cc);
        tau_sq.push(tau * tau);
        f_val.push(model.f.value(x, row.y[j]));
    }
    let left_tail = if row.log_slope[0] > T::zero() {
        g[0] / row.log_slope[0]
    } else {
        T::zero()
    };
    let right_tail = if row.log_slope[n - 1] < T::zero() {
        -g[n - 1] / row.log_slope[n - 1]
    } else {
        T::zero()
    };
    let from_left = cumulative_corrected(&g, &dg, row.h);
    let from_right = cumulative_corrected_from_right(&g, &dg, row.h);
    let mode = row
        .m
        .iter()
        .enumerate()
        .fold(0, |best, (j, &v)| if v > row.m[best] { j } else { best });
    let peak = row.m[mode];
    let floor = T::lit(UNDERFLOW_RATIO) * peak;

    let mut dy_phi = vec![T::nan(); n];
    for j in 0..n {
        if row.m[j] > floor {
            let integral = if j <= mode {
                left_tail + from_left[j]
            } else {
                -(from_right[j] + right_tail)
            };
            dy_phi[j] = two * integral / (tau_sq[j] * row.m[j]);
        }
    }
    let mut warnings = Vec::new();
    let valid: Vec<usize> = (0..n).filter(|&j| dy_phi[j].is_finite()).collect();
    if valid.len() < n {
        warnings.push(format!(
            "x={}: density underflow on {} of {n} nodes; corrector extended from the nearest valid node",
            x,
            n - valid.len()
        ));
        if let (Some(&first), Some(&last)) = (valid.first(), valid.last()) {
            for j in 0..first {
                dy_phi[j] = dy_phi[first];
            }
            for j in last + 1..n {
                dy_phi[j] = dy_phi[last];
            }
        }
    }
    // Φ'' from the equation itself keeps the cumulative rule fourth order.
    let d2_phi: Vec<T> = (0..n)
        .map(|j| two * (centered[j] - f_val[j] * dy_phi[j]) / tau_sq[j])
        .collect();
    let mut phi = cumulative_corrected(&dy_phi, &d2_phi, row.h);
    let weighted: Vec<T> = phi.iter().zip(&row.m).map(|(&p, &m)| p * m).collect();
    let shift = trapezoid(&weighted, row.h) / trapezoid(&row.m, row.h);
    for p in &mut phi {
        *p -= shift;
    }
    PoissonRow {
        phi,
        dy_phi,
        warnings,
    }
}

/// Largest `|f Φ' + tau^2/2 Φ'' - (c - c̄)|` over the central 80% of the row,
/// with `Φ''` from central differences of `Φ'`.
pub fn poisson_residual<T: Scalar>(
    model: &CoefficientSet<T>,
    row: &DensityRow<T>,
    c_bar: T,
    dy_phi: &[T],
) -> T {
    let n = row.y.len();
    let margin = ((n as f64) * INTERIOR_MARGIN).ceil() as usize;
    let lo = margin.max(1);
    let hi = n.saturating_sub(margin.max(1));
    let mut worst = T::zero();
    for j in lo..hi {
        let y = row.y[j];
        let f = model.f.value(row.x, y);
        let tau = model.tau.value(row.x, y);
        let c = model.c.value(row.x, y);
        let second = (dy_phi[j + 1] - dy_phi[j - 1]) / (row.h + row.h);
        let r = (f * dy_phi[j] + tau * tau * T::lit(0.5) * second - (c - c_bar)).abs();
        if r > worst || r.is_nan() {
            worst = r;
        }
    }
    worst
}

/// `q = sigma^2 + gamma^-2 (Φ' tau)^2`; exactly `sigma^2` when `gamma = inf`.
pub fn local_q<T: Scalar>(model: &CoefficientSet<T>, x: T, y: T, dy_phi: T, gamma: f64) -> T {
    let sigma = model.sigma.value(x, y);
    if gamma.is_infinite() {
        return sigma * sigma;
    }
    let tau = model.tau.value(x, y);
    let corr = dy_phi * tau;
    sigma * sigma + T::lit(inv_gamma_sq(gamma)) * corr * corr
}

/// One slow-state node of a [`HomogenizedModel`].
#[derive(Debug, Clone)]
pub struct HomogenizedRow<T> {
    pub x: T,
    pub y: Vec<T>,
    pub density: Vec<T>,
    pub phi: Vec<T>,
    pub dy_phi: Vec<T>,
    pub c_bar: T,
    pub q_bar: T,
    pub boundary_ratio: f64,
    /// ∫ Φ m over the row, should vanish.
    pub centering: T,
    pub residual: T,
}

/// Tabulated limit objects over an x-grid, with natural cubic splines in x.
#[derive(Debug, Clone)]
pub struct HomogenizedModel<T> {
    pub model_name: String,
    pub x_grid: Vec<T>,
    pub rows: Vec<HomogenizedRow<T>>,
    pub c_bar: Vec<T>,
    pub q_bar: Vec<T>,
    pub gamma: f64,
    pub warnings: Vec<String>,
    c_bar_spline: NaturalCubicSpline<T>,
    q_bar_spline: NaturalCubicSpline<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowField {
    Density,
    Phi,
    DyPhi,
}

fn build_row<T: Scalar>(model: &CoefficientSet<T>, x: T, ny: usize, gamma: f64) -> Result<(HomogenizedRow<T>, Vec<String>)> {
    let window = y_window(model, x, ny)?;
    let density = invariant_density(model, x, window, ny)?;
    let c_bar = averaged_drift(model, &density);
    let poisson = solve_poisson(model, &density, c_bar);
    let q: Vec<T> = (0..ny)
        .map(|j| local_q(model, x, density.y[j], poisson.dy_phi[j], gamma) * density.m[j])
        .collect();
    let q_bar = trapezoid(&q, density.h);
    let weighted: Vec<T> = poisson.phi.iter().zip(&density.m).map(|(&p, &m)| p * m).collect();
    let centering = trapezoid(&weighted, density.h);
    let residual = poisson_residual(model, &density, c_bar, &poisson.dy_phi);
    let mut warnings = poisson.warnings;
    if !(residual <= T::lit(RESIDUAL_TOLERANCE)) {
        warnings.push(format!(
            "x={x}: Poisson residual {:e} exceeds {RESIDUAL_TOLERANCE:e} on the row interior",
            residual.as_f64()
        ));
    }
    if !c_bar.is_finite() || !q_bar.is_finite() {
        return Err(Error::Homogenization {
            x: x.as_f64(),
            reason: "non-finite averaged coefficients".into(),
        });
    }
    Ok((
        HomogenizedRow {
            x,
            y: density.y,
            density: density.m,
            phi: poisson.phi,
            dy_phi: poisson.dy_phi,
            c_bar,
            q_bar,
            boundary_ratio: density.boundary_ratio,
            centering,
            residual,
        },
        warnings,
    ))
}

/// Tabulates density, c̄, Φ, ∂_yΦ and q̄ on `nx` equispaced x-nodes.
pub fn build_homogenized<T: Scalar>(
    model: &CoefficientSet<T>,
    x_range: (T, T),
    nx: usize,
    ny: usize,
    gamma: f64,
) -> Result<HomogenizedModel<T>> {
    if nx < 2 {
        return Err(invalid("homogenization needs nx >= 2"));
    }
    if !(x_range.0 < x_range.1) {
        return Err(invalid("x-range must be non-empty"));
    }
    if ny < 64 {
        return Err(invalid("homogenization needs ny >= 64"));
    }
    if !(gamma > 0.0) {
        return Err(invalid("gamma must be positive (inf allowed)"));
    }
    let x_grid = linspace(x_range.0, x_range.1, nx);
    let built: Vec<(HomogenizedRow<T>, Vec<String>)> = x_grid
        .par_iter()
        .map(|&x| build_row(model, x, ny, gamma))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(nx);
    let mut warnings = Vec::new();
    for (row, w) in built {
        rows.push(row);
        warnings.extend(w);
    }
    let c_bar: Vec<T> = rows.iter().map(|r| r.c_bar).collect();
    let q_bar: Vec<T> = rows.iter().map(|r| r.q_bar).collect();
    let c_bar_spline = NaturalCubicSpline::new(x_grid.clone(), c_bar.clone())?;
    let q_bar_spline = NaturalCubicSpline::new(x_grid.clone(), q_bar.clone())?;
    Ok(HomogenizedModel {
        model_name: model.name.clone(),
        x_grid,
        rows,
        c_bar,
        q_bar,
        gamma,
        warnings,
        c_bar_spline,
        q_bar_spline,
    })
}

impl<T: Scalar> HomogenizedModel<T> {
    pub fn x_hull(&self) -> (T, T) {
        (self.x_grid[0], self.x_grid[self.x_grid.len() - 1])
    }

    pub fn c_bar_at(&self, x: T) -> T {
        self.c_bar_spline.eval(x)
    }

    pub fn c_bar_prime_at(&self, x: T) -> T {
        self.c_bar_spline.derivative(x)
    }

    pub fn q_bar_at(&self, x: T) -> T {
        self.q_bar_spline.eval(x)
    }

    /// Cubic-spline interpolation of a row field in y.
    pub fn row_value(&self, row: usize, field: RowField, y: T) -> Result<T> {
        let r = self
            .rows
            .get(row)
            .ok_or_else(|| invalid(format!("row {row} out of range")))?;
        let values = match field {
            RowField::Density => &r.density,
            RowField::Phi => &r.phi,
            RowField::DyPhi => &r.dy_phi,
        };
        Ok(NaturalCubicSpline::new(r.y.clone(), values.clone())?.eval(y))
    }

    /// Smallest and largest y covered by any row window.
    pub fn y_hull(&self) -> (T, T) {
        self.rows.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), r| {
            (lo.min(r.y[0]), hi.max(r.y[r.y.len() - 1]))
        })
    }

    /// Columns `x,y,m,phi,dy_phi`.
    pub fn write_rows_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y,m,phi,dy_phi")?;
        for r in &self.rows {
            for j in 0..r.y.len() {
                writeln!(
                    w,
                    "{:e},{:e},{:e},{:e},{:e}",
                    r.x.as_f64(),
                    r.y[j].as_f64(),
                    r.density[j].as_f64(),
                    r.phi[j].as_f64(),
                    r.dy_phi[j].as_f64()
                )?;
            }
        }
        Ok(())
    }

    /// Columns `x,c_bar,q_bar`.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,c_bar,q_bar")?;
        for r in &self.rows {
            writeln!(w, "{:e},{:e},{:e}", r.x.as_f64(), r.c_bar.as_f64(), r.q_bar.as_f64())?;
        }
        Ok(())
    }
}

/// Limit ODE solution, its linearization and the limiting variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitTrajectory<T> {
    pub dt: T,
    pub t_grid: Vec<T>,
    pub x_bar: Vec<T>,
    pub psi: Vec<T>,
    /// Empty until [`LimitTrajectory::with_variance`] fills it.
    pub sigma2: Vec<T>,
}

/// RK4 for `X̄' = c̄(X̄)`, `Ψ' = c̄'(X̄) Ψ`, `X̄(0) = Ψ(0) = x0`.
/// The step is `T / ceil(T / dt)`.
pub fn limit_ode<T: Scalar>(hom: &HomogenizedModel<T>, x0: T, horizon: T, dt: T) -> Result<LimitTrajectory<T>> {
    if !(dt > T::zero()) || !(horizon > T::zero()) {
        return Err(invalid("limit ODE needs dt > 0 and T > 0"));
    }
    let (lo, hi) = hom.x_hull();
    if x0 < lo || x0 > hi {
        return Err(invalid(format!("x0={x0} outside the x-grid hull [{lo}, {hi}]")));
    }
    let n = (horizon / dt - T::lit(1e-9)).ceil().to_usize().unwrap_or(0).max(1);
    let h = horizon / T::from_usize_lossy(n);
    let rhs = |x: T, p: T| (hom.c_bar_at(x), hom.c_bar_prime_at(x) * p);
    let half = T::lit(0.5);
    let sixth = T::one() / T::lit(6.0);
    let mut t_grid = Vec::with_capacity(n + 1);
    let mut xs = Vec::with_capacity(n + 1);
    let mut ps = Vec::with_capacity(n + 1);
    let (mut x, mut p) = (x0, x0);
    t_grid.push(T::zero());
    xs.push(x);
    ps.push(p);
    for k in 0..n {
        let (k1x, k1p) = rhs(x, p);
        let (k2x, k2p) = rhs(x + half * h * k1x, p + half * h * k1p);
        let (k3x, k3p) = rhs(x + half * h * k2x, p + half * h * k2p);
        let (k4x, k4p) = rhs(x + h * k3x, p + h * k3p);
        x += h * sixth * (k1x + T::lit(2.0) * (k2x + k3x) + k4x);
        p += h * sixth * (k1p + T::lit(2.0) * (k2p + k3p) + k4p);
        let t = h * T::from_usize_lossy(k + 1);
        if !x.is_finite() || x < lo || x > hi {
            return Err(Error::DomainEscape {
                time: t.as_f64(),
                value: x.as_f64(),
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            });
        }
        t_grid.push(t);
        xs.push(x);
        ps.push(p);
    }
    Ok(LimitTrajectory {
        dt: h,
        t_grid,
        x_bar: xs,
        psi: ps,
        sigma2: Vec::new(),
    })
}

impl<T: Scalar> LimitTrajectory<T> {
    /// Fills `sigma2` with the trapezoid rule for
    /// `∫_0^t exp(2∫_s^t c̄'(X̄_u) du) q̄(X̄_s) ds`, evaluated recursively.
    pub fn with_variance(mut self, hom: &HomogenizedModel<T>) -> Self {
        let n = self.t_grid.len();
        let half_h = self.dt * T::lit(0.5);
        let slope: Vec<T> = self.x_bar.iter().map(|&x| hom.c_bar_prime_at(x)).collect();
        let q: Vec<T> = self.x_bar.iter().map(|&x| hom.q_bar_at(x)).collect();
        let mut s2 = Vec::with_capacity(n);
        s2.push(T::zero());
        for k in 0..n - 1 {
            let growth = (T::lit(2.0) * half_h * (slope[k] + slope[k + 1])).exp();
            let next = growth * (s2[k] + half_h * q[k]) + half_h * q[k + 1];
            s2.push(next);
        }
        self.sigma2 = s2;
        self
    }

    /// Index of the node at `t`, within half a step.
    pub fn node_index(&self, t: T) -> Result<usize> {
        node_index(&self.t_grid, self.dt, t)
    }
}

pub(crate) fn node_index<T: Scalar>(grid: &[T], dt: T, t: T) -> Result<usize> {
    let k = (t / dt).round().to_usize().unwrap_or(usize::MAX).min(grid.len().saturating_sub(1));
    let tol = dt * T::lit(0.5);
    if grid.is_empty() || (grid[k] - t).abs() > tol {
        let nearest = grid.get(k).copied().unwrap_or(T::nan());
        return Err(Error::Alignment {
            t: t.as_f64(),
            nearest: nearest.as_f64(),
            tolerance: tol.as_f64(),
        });
    }
    Ok(k)
}

/// Limiting variance `σ_t²` at a node of the trajectory.
pub fn limit_variance<T: Scalar>(hom: &HomogenizedModel<T>, trajectory: &LimitTrajectory<T>, t: T) -> Result<T> {
    let k = trajectory.node_index(t)?;
    if trajectory.sigma2.len() == trajectory.t_grid.len() {
        return Ok(trajectory.sigma2[k]);
    }
    let filled = trajectory.clone().with_variance(hom);
    Ok(filled.sigma2[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::{affine_oracle, bounded_coupled};

    #[test]
    fn affine_density_is_standard_gaussian_around_x() {
        let model = affine_oracle::<f64>();
        let w = y_window(&model, 0.7, 801).unwrap();
        let row = invariant_density(&model, 0.7, w, 801).unwrap();
        let reference = model.reference.unwrap();
        for (y, m) in row.y.iter().zip(&row.m) {
            assert!((m - (reference.density)(0.7, *y)).abs() < 1e-6);
        }
    }

    #[test]
    fn narrow_window_is_a_truncation_error() {
        let model = affine_oracle::<f64>();
        match invariant_density(&model, 0.0, (-2.0, 2.0), 128) {
            Err(Error::Truncation { ratio, .. }) => assert!(ratio > TRUNCATION_LIMIT),
            other => panic!("expected truncation error, got {other:?}"),
        }
        assert!(invariant_density(&model, 0.0, (-2.0, 2.0), 16).is_err());
    }

    #[test]
    fn y_independent_drift_has_zero_corrector() {
        let model = CoefficientSet::<f64>::from_expressions("flat", "sin(x)", "1", "x - y", "sqrt(2)").unwrap();
        let w = y_window(&model, 0.3, 401).unwrap();
        let row = invariant_density(&model, 0.3, w, 401).unwrap();
        let cb = averaged_drift(&model, &row);
        assert!((cb - 0.3f64.sin()).abs() < 1e-12);
        let p = solve_poisson(&model, &row, cb);
        assert!(p.phi.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn q_cases() {
        let model = affine_oracle::<f64>();
        assert_eq!(local_q(&model, 0.1, 0.2, -1.0, f64::INFINITY), 1.0);
        assert!((local_q(&model, 0.1, 0.2, -1.0, 1.0) - 3.0).abs() < 1e-14);
        assert_eq!(local_q(&model, 0.1, 0.2, 0.0, 0.5), 1.0);
    }

    #[test]
    fn bounded_model_rows_satisfy_invariants() {
        let model = bounded_coupled::<f64>();
        let hom = build_homogenized(&model, (-2.0, 2.0), 9, 801, 1.0).unwrap();
        for r in &hom.rows {
            assert!((trapezoid(&r.density, r.y[1] - r.y[0]) - 1.0).abs() < 1e-8);
            assert!(r.centering.abs() < 1e-6);
            assert!(r.residual < 1e-4, "residual {} at x={}", r.residual, r.x);
        }
        assert!(hom.c_bar[4].abs() < 1e-10, "c_bar(0) = {}", hom.c_bar[4]);
    }

    #[test]
    fn two_node_grid_interpolates_linearly() {
        let model = affine_oracle::<f64>();
        let hom = build_homogenized(&model, (-1.0, 1.0), 2, 256, 1.0).unwrap();
        assert!((hom.c_bar_at(0.25) + 0.25).abs() < 1e-9);
        assert!((hom.c_bar_prime_at(0.25) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn ode_with_zero_drift_is_constant() {
        let model = CoefficientSet::<f64>::from_expressions("still", "0", "1", "x - y", "sqrt(2)").unwrap();
        let hom = build_homogenized(&model, (-1.0, 1.0), 5, 128, f64::INFINITY).unwrap();
        let tr = limit_ode(&hom, 0.4, 1.0, 0.01).unwrap();
        assert!(tr.x_bar.iter().all(|&x| (x - 0.4).abs() < 1e-15));
        assert!(tr.psi.iter().all(|&p| (p - 0.4).abs() < 1e-15));
    }

    #[test]
    fn escape_from_the_hull_is_reported() {
        let model = CoefficientSet::<f64>::from_expressions("push", "1", "1", "x - y", "sqrt(2)").unwrap();
        let hom = build_homogenized(&model, (-1.0, 1.0), 5, 128, 1.0).unwrap();
        match limit_ode(&hom, 0.0, 2.0, 0.01) {
            Err(Error::DomainEscape { time, .. }) => assert!((time - 1.0).abs() < 0.02),
            other => panic!("expected escape, got {other:?}"),
        }
    }
}
