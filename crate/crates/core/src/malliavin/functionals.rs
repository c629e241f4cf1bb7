//! Norm functionals of the tangent processes at a fixed evaluation time.

use crate::error::{invalid, Result};
use crate::numerics::trapezoid_weights;
use crate::scalar::Scalar;

/// Minimum number of derivative times for the quadratures below.
pub const MIN_R_NODES: usize = 8;

fn sort_order<T: Scalar>(r_times: &[T]) -> Result<Vec<usize>> {
    if r_times.len() < MIN_R_NODES {
        return Err(invalid(format!("need at least {MIN_R_NODES} r-nodes, got {}", r_times.len())));
    }
    if r_times.iter().any(|r| !r.is_finite()) {
        return Err(invalid("r-nodes must be finite"));
    }
    let mut order: Vec<usize> = (0..r_times.len()).collect();
    order.sort_by(|&a, &b| r_times[a].partial_cmp(&r_times[b]).expect("finite"));
    Ok(order)
}

/// `(∫ |D_u^{W1}X|² + |D_u^{W2}X|² du)²` by the trapezoid rule over the
/// r-nodes. The nodes may be given in any order.
pub fn hnorm_first<T: Scalar>(r_times: &[T], d_w1x: &[T], d_w2x: &[T]) -> Result<T> {
    if d_w1x.len() != r_times.len() || d_w2x.len() != r_times.len() {
        return Err(invalid("tangent arrays must match the r-grid"));
    }
    let order = sort_order(r_times)?;
    let nodes: Vec<T> = order.iter().map(|&i| r_times[i]).collect();
    let w = trapezoid_weights(&nodes);
    let integral = order
        .iter()
        .zip(&w)
        .fold(T::zero(), |acc, (&i, &wi)| acc + wi * (d_w1x[i] * d_w1x[i] + d_w2x[i] * d_w2x[i]));
    Ok(integral * integral)
}

/// Second-order tangents of X at one evaluation time on an `n_r × n_r` grid
/// for all four channel pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderGrid<T> {
    pub n_r: usize,
    /// `values[((i*2 + k)*n_r + u)*n_r + v] = D²_{u,v}^{W^i,W^k} X_t`
    pub values: Vec<T>,
}

impl<T: Scalar> SecondOrderGrid<T> {
    pub fn new(n_r: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != 4 * n_r * n_r {
            return Err(invalid("second-order grid has the wrong length"));
        }
        Ok(Self { n_r, values })
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize, u: usize, v: usize) -> T {
        self.values[((i * 2 + k) * self.n_r + u) * self.n_r + v]
    }
}

/// `‖D²X ⊗₁ D²X‖²`: for each channel pair `(i, j)` form
/// `M_{v,w} = Σ_k ∫ D²_{u,v}^{i,k} D²_{u,w}^{k,j} du`, then sum
/// `∫∫ M_{v,w}² dv dw` over `(i, j)`. Trapezoid weights in every variable.
pub fn contraction_norm_second<T: Scalar>(r_times: &[T], grid: &SecondOrderGrid<T>) -> Result<T> {
    if grid.n_r != r_times.len() {
        return Err(invalid("second-order grid does not match the r-grid"));
    }
    let order = sort_order(r_times)?;
    let n = order.len();
    let nodes: Vec<T> = order.iter().map(|&i| r_times[i]).collect();
    let w = trapezoid_weights(&nodes);
    let mut total = T::zero();
    let mut m = vec![T::zero(); n * n];
    for i in 0..2 {
        for j in 0..2 {
            m.iter_mut().for_each(|x| *x = T::zero());
            for k in 0..2 {
                for (pu, &u) in order.iter().enumerate() {
                    for (pv, &v) in order.iter().enumerate() {
                        let a = w[pu] * grid.get(i, k, u, v);
                        if a == T::zero() {
                            continue;
                        }
                        for (pw, &ww) in order.iter().enumerate() {
                            m[pv * n + pw] += a * grid.get(k, j, u, ww);
                        }
                    }
                }
            }
            for pv in 0..n {
                for pw in 0..n {
                    let x = m[pv * n + pw];
                    total += w[pv] * w[pw] * x * x;
                }
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::linspace;

    #[test]
    fn hnorm_of_constant_tangents() {
        let r = linspace(0.0f64, 2.0, 9);
        let ones = vec![1.0; 9];
        let v = hnorm_first(&r, &ones, &ones).unwrap();
        assert!((v - 16.0).abs() < 1e-12);
        assert_eq!(hnorm_first(&r, &[0.0; 9], &[0.0; 9]).unwrap(), 0.0);
        assert!(hnorm_first(&r[..7], &ones[..7], &ones[..7]).is_err());
    }

    #[test]
    fn contraction_of_constant_kernel() {
        let t = 1.5f64;
        let r = linspace(0.0, t, 8);
        let grid = SecondOrderGrid::new(8, vec![1.0; 4 * 64]).unwrap();
        let v = contraction_norm_second(&r, &grid).unwrap();
        assert!((v - 16.0 * t.powi(4)).abs() < 1e-10 * v);
    }
}
