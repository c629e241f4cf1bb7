//! Model definitions: the drift and diffusion coefficients of the slow and
//! fast components together with their first and second partials.

pub mod expr;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::linspace;
use crate::scalar::Scalar;
use expr::{Expr, Var};

/// Value and partials up to second order of a function of `(x, y)`.
/// The mixed partial is stored once.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Jet<T> {
    pub value: T,
    pub d1: T,
    pub d2: T,
    pub d11: T,
    pub d12: T,
    pub d22: T,
}

impl<T: Scalar> Jet<T> {
    pub fn constant(value: T) -> Self {
        Self {
            value,
            d1: T::zero(),
            d2: T::zero(),
            d11: T::zero(),
            d12: T::zero(),
            d22: T::zero(),
        }
    }

    fn fields(&self) -> [T; 6] {
        [self.value, self.d1, self.d2, self.d11, self.d12, self.d22]
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }
}

/// A real function of `(x, y)` that reports its own partials.
pub trait CoefficientFn<T>: Send + Sync {
    fn jet(&self, x: T, y: T) -> Jet<T>;

    fn value(&self, x: T, y: T) -> T {
        self.jet(x, y).value
    }
}

struct ClosureFn<F>(F);

impl<T, F> CoefficientFn<T> for ClosureFn<F>
where
    F: Fn(T, T) -> Jet<T> + Send + Sync,
{
    fn jet(&self, x: T, y: T) -> Jet<T> {
        (self.0)(x, y)
    }
}

/// Wraps a closure returning a full jet.
pub fn jet_fn<T: 'static, F>(f: F) -> Arc<dyn CoefficientFn<T>>
where
    F: Fn(T, T) -> Jet<T> + Send + Sync + 'static,
{
    Arc::new(ClosureFn(f))
}

pub fn constant_fn<T: Scalar>(value: T) -> Arc<dyn CoefficientFn<T>> {
    jet_fn(move |_, _| Jet::constant(value))
}

/// Expression-defined coefficient with symbolically differentiated partials.
#[derive(Debug, Clone)]
pub struct ExprFn {
    source: String,
    trees: [Expr; 6],
}

impl ExprFn {
    pub fn parse(source: &str) -> Result<Self> {
        let value = Expr::parse(source)?;
        let d1 = value.derivative(Var::X);
        let d2 = value.derivative(Var::Y);
        let d11 = d1.derivative(Var::X);
        let d12 = d1.derivative(Var::Y);
        let d22 = d2.derivative(Var::Y);
        Ok(Self {
            source: source.to_string(),
            trees: [value, d1, d2, d11, d12, d22],
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

impl<T: Scalar> CoefficientFn<T> for ExprFn {
    fn jet(&self, x: T, y: T) -> Jet<T> {
        let [v, d1, d2, d11, d12, d22] = &self.trees;
        Jet {
            value: v.eval(x, y),
            d1: d1.eval(x, y),
            d2: d2.eval(x, y),
            d11: d11.eval(x, y),
            d12: d12.eval(x, y),
            d22: d22.eval(x, y),
        }
    }

    fn value(&self, x: T, y: T) -> T {
        self.trees[0].eval(x, y)
    }
}

/// Closed forms available for oracle models, in `f64`.
#[derive(Clone, Copy)]
pub struct ReferenceSolution {
    pub density: fn(x: f64, y: f64) -> f64,
    pub c_bar: fn(x: f64) -> f64,
    pub phi: fn(x: f64, y: f64) -> f64,
    pub dy_phi: fn(x: f64, y: f64) -> f64,
    /// Limiting fluctuation variance at time `t`, given `1/gamma^2`.
    pub limit_variance: fn(t: f64, inv_gamma_sq: f64) -> f64,
}

impl fmt::Debug for ReferenceSolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ReferenceSolution { .. }")
    }
}

/// The four coefficient functions of a slow-fast model.
#[derive(Clone)]
pub struct CoefficientSet<T> {
    pub name: String,
    pub c: Arc<dyn CoefficientFn<T>>,
    pub sigma: Arc<dyn CoefficientFn<T>>,
    pub f: Arc<dyn CoefficientFn<T>>,
    pub tau: Arc<dyn CoefficientFn<T>>,
    pub reference: Option<ReferenceSolution>,
}

impl<T> fmt::Debug for CoefficientSet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("name", &self.name)
            .field("reference", &self.reference.is_some())
            .finish_non_exhaustive()
    }
}

/// All 24 values returned by [`CoefficientSet::eval_all`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelJets<T> {
    pub c: Jet<T>,
    pub sigma: Jet<T>,
    pub f: Jet<T>,
    pub tau: Jet<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    C,
    Sigma,
    F,
    Tau,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::C, Component::Sigma, Component::F, Component::Tau];

    pub fn name(self) -> &'static str {
        match self {
            Component::C => "c",
            Component::Sigma => "sigma",
            Component::F => "f",
            Component::Tau => "tau",
        }
    }
}

impl<T: Scalar> CoefficientSet<T> {
    /// Model from four expression strings over `x`, `y`.
    pub fn from_expressions(name: &str, c: &str, sigma: &str, f: &str, tau: &str) -> Result<Self> {
        let wrap = |label: &str, src: &str| -> Result<Arc<dyn CoefficientFn<T>>> {
            ExprFn::parse(src)
                .map(|e| Arc::new(e) as Arc<dyn CoefficientFn<T>>)
                .map_err(|e| Error::Expression(format!("{label}: {e}")))
        };
        Ok(Self {
            name: name.to_string(),
            c: wrap("c", c)?,
            sigma: wrap("sigma", sigma)?,
            f: wrap("f", f)?,
            tau: wrap("tau", tau)?,
            reference: None,
        })
    }

    pub fn component(&self, which: Component) -> &Arc<dyn CoefficientFn<T>> {
        match which {
            Component::C => &self.c,
            Component::Sigma => &self.sigma,
            Component::F => &self.f,
            Component::Tau => &self.tau,
        }
    }

    /// Unchecked jets for hot loops; callers check the state they produce.
    #[inline]
    pub fn jets(&self, x: T, y: T) -> ModelJets<T> {
        ModelJets {
            c: self.c.jet(x, y),
            sigma: self.sigma.jet(x, y),
            f: self.f.jet(x, y),
            tau: self.tau.jet(x, y),
        }
    }

    /// Every value and partial of the four functions at `(x, y)`.
    pub fn eval_all(&self, x: T, y: T) -> Result<ModelJets<T>> {
        if !x.is_finite() || !y.is_finite() {
            return Err(invalid(format!("evaluation point ({x}, {y}) is not finite")));
        }
        let jets = self.jets(x, y);
        for (which, jet) in Component::ALL.iter().zip([jets.c, jets.sigma, jets.f, jets.tau]) {
            if !jet.is_finite() {
                return Err(Error::ModelEvaluation {
                    model: self.name.clone(),
                    function: which.name(),
                    x: x.as_f64(),
                    y: y.as_f64(),
                });
            }
        }
        Ok(jets)
    }

    /// Adds a y-independent function `g(x)` to the slow drift.
    pub fn with_shifted_drift(&self, g: Arc<dyn CoefficientFn<T>>) -> Self
    where
        T: 'static,
    {
        let base = Arc::clone(&self.c);
        let c = jet_fn(move |x, y| {
            let a = base.jet(x, y);
            let b = g.jet(x, y);
            Jet {
                value: a.value + b.value,
                d1: a.d1 + b.d1,
                d2: a.d2 + b.d2,
                d11: a.d11 + b.d11,
                d12: a.d12 + b.d12,
                d22: a.d22 + b.d22,
            }
        });
        Self {
            name: format!("{}+shift", self.name),
            c,
            reference: None,
            ..self.clone()
        }
    }
}

/// Rectangular evaluation domain for assumption checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub nx: usize,
    pub ny: usize,
}

/// Grid-checked dissipativity constants for moment order `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub model: String,
    pub p: u32,
    pub m_hat: f64,
    pub k_hat: f64,
    pub grid: GridSpec,
    pub passes: bool,
    /// Grid point where the dissipativity expression is largest.
    pub worst_point: (f64, f64),
    pub tau_min: f64,
}

/// Computes `M_hat` and `K_hat` as exact suprema over a tensor grid.
pub fn check_assumptions<T: Scalar>(
    model: &CoefficientSet<T>,
    x_range: (f64, f64),
    y_range: (f64, f64),
    nx: usize,
    ny: usize,
    p: u32,
) -> Result<AssumptionReport> {
    if !(x_range.0 < x_range.1) || !(y_range.0 < y_range.1) {
        return Err(invalid("assumption grid ranges must be non-empty"));
    }
    if nx < 2 || ny < 2 {
        return Err(invalid("assumption grid needs nx, ny >= 2"));
    }
    if p < 1 {
        return Err(invalid("moment order p must be >= 1"));
    }
    let two_p = T::lit(2.0 * p as f64);
    let a = two_p - T::one(); // 2p - 1
    let b = two_p - T::lit(2.0); // 2p - 2
    let xs = linspace(T::lit(x_range.0), T::lit(x_range.1), nx);
    let ys = linspace(T::lit(y_range.0), T::lit(y_range.1), ny);

    let mut m_sup = T::neg_infinity();
    let mut k_sup = T::neg_infinity();
    let mut worst = (xs[0], ys[0]);
    let mut tau_min = T::infinity();
    for &x in &xs {
        for &y in &ys {
            let j = model.eval_all(x, y)?;
            let f1 = j.f.d1.abs();
            let t1 = j.tau.d1 * j.tau.d1;
            let t2 = j.tau.d2 * j.tau.d2;
            let m = f1 + T::lit(2.0) * a * t1 + t2;
            let k = a * f1 + a * b * t1 + two_p * a * t2 + two_p * j.f.d2;
            if m > m_sup {
                m_sup = m;
            }
            if k > k_sup {
                k_sup = k;
                worst = (x, y);
            }
            tau_min = tau_min.min(j.tau.value.abs());
        }
    }
    let k_hat = -k_sup.as_f64();
    Ok(AssumptionReport {
        model: model.name.clone(),
        p,
        m_hat: m_sup.as_f64(),
        k_hat,
        grid: GridSpec {
            x_range,
            y_range,
            nx,
            ny,
        },
        passes: k_hat > 0.0,
        worst_point: (worst.0.as_f64(), worst.1.as_f64()),
        tau_min: tau_min.as_f64(),
    })
}

/// Largest relative gap between supplied partials and central differences,
/// `|supplied - fd| / (1 + |supplied|)`. Second partials are differenced from
/// the supplied first partials.
pub fn validate_partials<T: Scalar>(model: &CoefficientSet<T>, points: &[(T, T)], h: T) -> T {
    let two_h = h + h;
    let mut worst = T::zero();
    let mut record = |supplied: T, fd: T| {
        let gap = (supplied - fd).abs() / (T::one() + supplied.abs());
        if gap > worst || gap.is_nan() {
            worst = if gap.is_nan() { T::infinity() } else { gap };
        }
    };
    for &(x, y) in points {
        for which in Component::ALL {
            let g = model.component(which);
            let j = g.jet(x, y);
            let xp = g.jet(x + h, y);
            let xm = g.jet(x - h, y);
            let yp = g.jet(x, y + h);
            let ym = g.jet(x, y - h);
            record(j.d1, (xp.value - xm.value) / two_h);
            record(j.d2, (yp.value - ym.value) / two_h);
            record(j.d11, (xp.d1 - xm.d1) / two_h);
            record(j.d12, (yp.d1 - ym.d1) / two_h);
            record(j.d12, (xp.d2 - xm.d2) / two_h);
            record(j.d22, (yp.d2 - ym.d2) / two_h);
        }
    }
    worst
}

pub const AFFINE_ORACLE: &str = "affine_oracle";
pub const BOUNDED_COUPLED: &str = "bounded_coupled";

/// Built-in model names.
pub const BUILTIN_MODELS: [&str; 2] = [AFFINE_ORACLE, BOUNDED_COUPLED];

/// `c = y - 2x`, `sigma = 1`, `f = x - y`, `tau = sqrt 2`. Every limit object
/// has a closed form.
pub fn affine_oracle<T: Scalar>() -> CoefficientSet<T> {
    let c = jet_fn(|x: T, y: T| Jet {
        value: y - T::lit(2.0) * x,
        d1: T::lit(-2.0),
        d2: T::one(),
        ..Jet::constant(T::zero())
    });
    let f = jet_fn(|x: T, y: T| Jet {
        value: x - y,
        d1: T::one(),
        d2: -T::one(),
        ..Jet::constant(T::zero())
    });
    CoefficientSet {
        name: AFFINE_ORACLE.into(),
        c,
        sigma: constant_fn(T::one()),
        f,
        tau: constant_fn(T::SQRT_2()),
        reference: Some(ReferenceSolution {
            density: |x, y| {
                (-0.5 * (y - x) * (y - x)).exp() / (2.0 * std::f64::consts::PI).sqrt()
            },
            c_bar: |x| -x,
            phi: |x, y| x - y,
            dy_phi: |_, _| -1.0,
            limit_variance: |t, inv_gamma_sq| {
                let q_bar = 1.0 + 2.0 * inv_gamma_sq;
                q_bar * (-(-2.0 * t).exp_m1()) / 2.0
            },
        }),
    }
}

/// `c = tanh y - tanh(x)/2`, `sigma = 1 + cos x cos y / 10`,
/// `f = tanh(x)/2 - y`, `tau = sqrt 2`. Bounded derivatives, full coupling.
pub fn bounded_coupled<T: Scalar>() -> CoefficientSet<T> {
    let half = T::lit(0.5);
    let tenth = T::lit(0.1);
    let c = jet_fn(move |x: T, y: T| {
        let (tx, ty) = (x.tanh(), y.tanh());
        let (sx, sy) = (T::one() - tx * tx, T::one() - ty * ty);
        Jet {
            value: ty - half * tx,
            d1: -half * sx,
            d2: sy,
            d11: tx * sx, // -1/2 * (-2 tanh sech^2)
            d12: T::zero(),
            d22: -T::lit(2.0) * ty * sy,
        }
    });
    let sigma = jet_fn(move |x: T, y: T| {
        let (cx, sx, cy, sy) = (x.cos(), x.sin(), y.cos(), y.sin());
        Jet {
            value: T::one() + tenth * cx * cy,
            d1: -tenth * sx * cy,
            d2: -tenth * cx * sy,
            d11: -tenth * cx * cy,
            d12: tenth * sx * sy,
            d22: -tenth * cx * cy,
        }
    });
    let f = jet_fn(move |x: T, y: T| {
        let tx = x.tanh();
        let sx = T::one() - tx * tx;
        Jet {
            value: half * tx - y,
            d1: half * sx,
            d2: -T::one(),
            d11: -tx * sx,
            d12: T::zero(),
            d22: T::zero(),
        }
    });
    CoefficientSet {
        name: BOUNDED_COUPLED.into(),
        c,
        sigma,
        f,
        tau: constant_fn(T::SQRT_2()),
        reference: None,
    }
}

/// Looks up a built-in model by name.
pub fn builtin<T: Scalar>(name: &str) -> Option<CoefficientSet<T>> {
    match name {
        AFFINE_ORACLE => Some(affine_oracle()),
        BOUNDED_COUPLED => Some(bounded_coupled()),
        _ => None,
    }
}
