//! Slow-fast stochastic systems: homogenized limits, Malliavin tangent
//! processes and Wasserstein verification of the fluctuation CLT.
//!
//! Numerical routines are generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64` for everyday use.

pub mod coefficients;
pub mod error;
pub mod homogenization;
pub mod malliavin;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod sde;

pub use coefficients::{
    affine_oracle, bounded_coupled, builtin, check_assumptions, validate_partials,
    AssumptionReport, CoefficientFn, CoefficientSet, Jet, ModelJets,
};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type CoefficientSet64 = CoefficientSet<f64>;
pub type ScaleRegime64 = sde::ScaleRegime<f64>;
pub type PathBundle64 = sde::PathBundle<f64>;
pub type HomogenizedModel64 = homogenization::HomogenizedModel<f64>;
pub type LimitTrajectory64 = homogenization::LimitTrajectory<f64>;
pub type TangentPath64 = malliavin::TangentPath<f64>;

/// Crate version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
