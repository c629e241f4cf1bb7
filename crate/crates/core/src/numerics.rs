//! Quadrature, interpolation and Gaussian special functions.

use crate::error::{invalid, Result};
use crate::scalar::Scalar;

/// `n` equispaced nodes covering `[lo, hi]` (both endpoints included).
pub fn linspace<T: Scalar>(lo: T, hi: T, n: usize) -> Vec<T> {
    if n == 1 {
        return vec![lo];
    }
    let step = (hi - lo) / T::from_usize_lossy(n - 1);
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                lo + step * T::from_usize_lossy(i)
            }
        })
        .collect()
}

/// Composite trapezoid rule on a uniform grid with spacing `h`.
pub fn trapezoid<T: Scalar>(values: &[T], h: T) -> T {
    match values.len() {
        0 | 1 => T::zero(),
        n => {
            let inner: T = values[1..n - 1].iter().copied().sum();
            h * (inner + (values[0] + values[n - 1]) * T::lit(0.5))
        }
    }
}

/// Trapezoid rule on an arbitrary ascending grid.
pub fn trapezoid_nonuniform<T: Scalar>(nodes: &[T], values: &[T]) -> T {
    nodes
        .windows(2)
        .zip(values.windows(2))
        .map(|(x, v)| (x[1] - x[0]) * (v[0] + v[1]) * T::lit(0.5))
        .sum()
}

/// Trapezoid quadrature weights for an ascending, possibly nonuniform grid.
pub fn trapezoid_weights<T: Scalar>(nodes: &[T]) -> Vec<T> {
    let n = nodes.len();
    let mut w = vec![T::zero(); n];
    for i in 0..n.saturating_sub(1) {
        let half = (nodes[i + 1] - nodes[i]) * T::lit(0.5);
        w[i] += half;
        w[i + 1] += half;
    }
    w
}

/// Cumulative integral from the first node, trapezoid rule with the
/// Euler-Maclaurin end correction `-h^2/12 (g'(y) - g'(y_0))`.
/// Fourth-order accurate when `derivative` is the exact derivative of `values`.
pub fn cumulative_corrected<T: Scalar>(values: &[T], derivative: &[T], h: T) -> Vec<T> {
    let n = values.len();
    let mut out = vec![T::zero(); n];
    let corr = h * h / T::lit(12.0);
    let mut acc = T::zero();
    for j in 1..n {
        acc += h * (values[j - 1] + values[j]) * T::lit(0.5);
        out[j] = acc - corr * (derivative[j] - derivative[0]);
    }
    out
}

/// Cumulative integral towards the last node: `out[j] = \int_{y_j}^{y_end} g`.
pub fn cumulative_corrected_from_right<T: Scalar>(values: &[T], derivative: &[T], h: T) -> Vec<T> {
    let n = values.len();
    let mut out = vec![T::zero(); n];
    if n == 0 {
        return out;
    }
    let corr = h * h / T::lit(12.0);
    let mut acc = T::zero();
    for j in (0..n - 1).rev() {
        acc += h * (values[j] + values[j + 1]) * T::lit(0.5);
        out[j] = acc - corr * (derivative[n - 1] - derivative[j]);
    }
    out
}

/// Natural cubic spline through `(x_i, y_i)`; linear extrapolation beyond the ends.
#[derive(Debug, Clone)]
pub struct NaturalCubicSpline<T> {
    x: Vec<T>,
    y: Vec<T>,
    /// second derivatives at the knots
    m: Vec<T>,
}

impl<T: Scalar> NaturalCubicSpline<T> {
    pub fn new(x: Vec<T>, y: Vec<T>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(invalid("spline needs at least two knots and matching lengths"));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("spline knots must be strictly ascending"));
        }
        let mut m = vec![T::zero(); n];
        if n > 2 {
            // Thomas algorithm for the interior second derivatives.
            let k = n - 2;
            let mut diag = vec![T::zero(); k];
            let mut rhs = vec![T::zero(); k];
            let mut upper = vec![T::zero(); k];
            for i in 0..k {
                let h0 = x[i + 1] - x[i];
                let h1 = x[i + 2] - x[i + 1];
                diag[i] = T::lit(2.0) * (h0 + h1);
                upper[i] = h1;
                rhs[i] = T::lit(6.0) * ((y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] = rhs[i] - w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self { x, y, m })
    }

    pub fn knots(&self) -> &[T] {
        &self.x
    }

    fn segment(&self, t: T) -> usize {
        let n = self.x.len();
        match self
            .x
            .binary_search_by(|v| v.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    fn end_slope(&self, left: bool) -> T {
        let n = self.x.len();
        if left {
            let h = self.x[1] - self.x[0];
            (self.y[1] - self.y[0]) / h - h * (T::lit(2.0) * self.m[0] + self.m[1]) / T::lit(6.0)
        } else {
            let h = self.x[n - 1] - self.x[n - 2];
            (self.y[n - 1] - self.y[n - 2]) / h
                + h * (self.m[n - 2] + T::lit(2.0) * self.m[n - 1]) / T::lit(6.0)
        }
    }

    pub fn eval(&self, t: T) -> T {
        let n = self.x.len();
        if t < self.x[0] {
            return self.y[0] + self.end_slope(true) * (t - self.x[0]);
        }
        if t > self.x[n - 1] {
            return self.y[n - 1] + self.end_slope(false) * (t - self.x[n - 1]);
        }
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        let six = T::lit(6.0);
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / six
    }

    pub fn derivative(&self, t: T) -> T {
        let n = self.x.len();
        if t < self.x[0] {
            return self.end_slope(true);
        }
        if t > self.x[n - 1] {
            return self.end_slope(false);
        }
        let i = self.segment(t);
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        let six = T::lit(6.0);
        let three = T::lit(3.0);
        (self.y[i + 1] - self.y[i]) / h
            + ((T::one() - three * a * a) * self.m[i] + (three * b * b - T::one()) * self.m[i + 1]) * h
                / six
    }
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal distribution function, accurate in both tails.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Inverse of the standard normal distribution function.
pub fn std_normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(p)
}

/// Antiderivative of the standard normal distribution function,
/// `G(z) = z Phi(z) + phi(z)`, vanishing at `-inf`.
pub fn std_normal_cdf_antiderivative(z: f64) -> f64 {
    if z < -8.0 {
        // Mills-ratio tail: G(z) = phi(z) (1/z^2 - 3/z^4 + ...), avoids cancellation.
        let z2 = z * z;
        return std_normal_pdf(z) / z2 * (1.0 - 3.0 / z2 + 15.0 / (z2 * z2));
    }
    z * std_normal_cdf(z) + std_normal_pdf(z)
}

/// `phi_1(z) = (e^z - 1)/z`, with the removable singularity filled.
pub fn phi1<T: Scalar>(z: T) -> T {
    if z.abs() < T::lit(1e-8) {
        T::one() + z * T::lit(0.5)
    } else {
        z.exp_m1() / z
    }
}

/// `phi_2(z) = (e^z - 1 - z)/z^2`; Taylor series near zero.
pub fn phi2<T: Scalar>(z: T) -> T {
    if z.abs() < T::lit(1e-3) {
        T::lit(0.5) + z * (T::one() / T::lit(6.0) + z * (T::one() / T::lit(24.0) + z / T::lit(120.0)))
    } else {
        (z.exp_m1() - z) / (z * z)
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr<T: Scalar>(values: &[T]) -> (T, T) {
    let n = values.len();
    if n == 0 {
        return (T::nan(), T::nan());
    }
    let nf = T::from_usize_lossy(n);
    let mean = values.iter().copied().sum::<T>() / nf;
    if n < 2 {
        return (mean, T::nan());
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (nf - T::one());
    (mean, (var / nf).sqrt())
}

/// Unbiased sample variance.
pub fn sample_variance<T: Scalar>(values: &[T]) -> T {
    let n = values.len();
    if n < 2 {
        return T::zero();
    }
    let nf = T::from_usize_lossy(n);
    let mean = values.iter().copied().sum::<T>() / nf;
    values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (nf - T::one())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn spline_reproduces_linear_data_exactly() {
        let x = linspace(-3.0, 3.0, 7);
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let s = NaturalCubicSpline::new(x, y).unwrap();
        for t in [-4.0, -2.5, 0.1, 2.9, 5.0] {
            assert_relative_eq!(s.eval(t), 2.0 * t - 1.0, epsilon = 1e-12);
            assert_relative_eq!(s.derivative(t), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn two_knot_spline_is_linear() {
        let s = NaturalCubicSpline::new(vec![0.0, 1.0], vec![1.0, 3.0]).unwrap();
        assert_relative_eq!(s.eval(0.25), 1.5, epsilon = 1e-14);
        assert_relative_eq!(s.derivative(0.7), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn spline_interpolates_smooth_function() {
        let x = linspace(0.0, std::f64::consts::PI, 101);
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let s = NaturalCubicSpline::new(x, y).unwrap();
        assert_relative_eq!(s.eval(1.234), 1.234f64.sin(), epsilon = 1e-6);
        assert_relative_eq!(s.derivative(1.234), 1.234f64.cos(), epsilon = 1e-4);
    }

    #[test]
    fn corrected_cumulative_integral_is_fourth_order() {
        let err = |n: usize| {
            let x = linspace(0.0f64, 2.0, n);
            let h = x[1] - x[0];
            let v: Vec<f64> = x.iter().map(|t| t.exp()).collect();
            let c = cumulative_corrected(&v, &v, h);
            (c[n - 1] - (2.0f64.exp() - 1.0)).abs()
        };
        let ratio = err(21) / err(41);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
        let x = linspace(0.0f64, 2.0, 41);
        let h = x[1] - x[0];
        let v: Vec<f64> = x.iter().map(|t| t.exp()).collect();
        let right = cumulative_corrected_from_right(&v, &v, h);
        assert_relative_eq!(right[0], 2.0f64.exp() - 1.0, epsilon = 1e-6);
    }

    #[test]
    fn gaussian_helpers() {
        assert_relative_eq!(std_normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(std_normal_quantile(std_normal_cdf(1.3)), 1.3, epsilon = 1e-9);
        // G(z) - G(-z) = z
        for z in [0.3, 1.7, 4.0] {
            assert_relative_eq!(
                std_normal_cdf_antiderivative(z) - std_normal_cdf_antiderivative(-z),
                z,
                epsilon = 1e-12
            );
        }
        // tail branch continuity
        let a = std_normal_cdf_antiderivative(-8.0 - 1e-9);
        let b = (-8.0f64) * std_normal_cdf(-8.0) + std_normal_pdf(-8.0);
        assert_relative_eq!(a, b, max_relative = 1e-4);
    }

    #[test]
    fn phi1_limits() {
        assert_relative_eq!(phi1(0.0f64), 1.0);
        assert_relative_eq!(phi1(-0.02f64), (1.0 - (-0.02f64).exp()) / 0.02, max_relative = 1e-13);
        assert_relative_eq!(phi2(0.0f64), 0.5);
        for z in [-0.9e-3f64, -1.1e-3, -0.05, 0.3] {
            let series: f64 = (0..30).map(|k| z.powi(k) / (1..=k + 2).map(|i| i as f64).product::<f64>()).sum();
            assert_relative_eq!(phi2(z), series, max_relative = 1e-11);
        }
    }
}
