//! flowlab simulates coupled diffusion flows dX = b_t(X)dt + sigma_t(X)dW
//! together with their variational processes (the tangent matrix grad X and
//! the Hessian tensor grad^2 X), evaluates the forward-backward decomposition
//! of the difference of two flows
//!
//! ```text
//! X_{s,t}(x) - Xbar_{s,t}(x) = T_{s,t}(Delta a, Delta b)(x) + S_{s,t}(Delta sigma)(x)
//! ```
//!
//! where T is a tangent/Hessian-weighted time integral and S is a two-sided
//! (Skorohod) stochastic integral realized as a mixed Riemann sum, and checks
//! the associated quantitative bounds by Monte Carlo against closed-form
//! linear-model oracles.
//!
//! Module map:
//! - [`model`]: drift/diffusion pairs with analytic derivatives, the catalog.
//! - [`regularity`]: spectral contraction and polynomial-growth conditions.
//! - [`paths`]: Brownian grids, bridge refinement, Euler integrators, restarts.
//! - [`interpolation`]: the T quadrature, the Skorohod sum S, residuals, and
//!   the 1D Skorohod variance via Malliavin derivative products.
//! - [`estimators`]: moment engine, Bismut-Elworthy-Li gradient/Hessian
//!   weights, semigroup-difference and invariant-shift estimators.
//! - [`experiments`]: scripted bound verifications with pass/fail verdicts.
//! - [`variance_oracle`]: independent exact linear-model evaluators used by
//!   the test suite; they share no numerical kernels with [`paths`].
//! - [`cli`]: configuration, orchestration, and result persistence.

pub mod cli;
pub mod estimators;
pub mod experiments;
pub mod guide;
pub mod interpolation;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod paths;
pub mod regularity;
pub mod rng;
pub mod stats;
pub mod variance_oracle;

/// Errors surfaced by simulation and estimation entry points.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("model evaluation produced a non-finite value at t={t}, x={x:?}")]
    NonFiniteModel { t: f64, x: Vec<f64> },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("index {index} out of range (grid has {steps} steps)")]
    IndexOutOfRange { index: usize, steps: usize },
    #[error("path diverged at node {node}: state left the explosion cap")]
    Diverged { node: usize },
    #[error("freeze interval {big_h} is not an integer multiple of the step {h}")]
    FreezeNotMultiple { big_h: f64, h: f64 },
    #[error("all {0} sample paths diverged; estimate undefined")]
    AllDiverged(usize),
    #[error("diffusion matrix a(x) has eigenvalue {eig} below the floor {floor}")]
    SingularDiffusion { eig: f64, floor: f64 },
    #[error("ellipticity constant must be positive, got {0}")]
    NonPositiveEllipticity(f64),
    #[error("moment condition fails: beta_2({n}) = {value} <= 0")]
    MomentConditionFails { n: u32, value: f64 },
    #[error("ergodicity check failed: {0}")]
    NotErgodic(String),
    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("unsupported oracle configuration: {0}")]
    UnsupportedOracle(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Build a configuration error carrying the offending field path.
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config { field: field.to_string(), message: message.into() }
    }
}
