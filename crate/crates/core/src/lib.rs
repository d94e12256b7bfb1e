//! Parameter estimation for ODE models that also estimates the variance of
//! the numerical solver's discretization error.
//!
//! The estimator alternates an isotonic weight update ([`isotonic`]) with a
//! weighted least-squares parameter update whose gradient is computed exactly
//! by a discrete adjoint sweep ([`adjoint`]).
//!
//! ```
//! use odeirls::estimate::{fit, FitOptions, Method, ProbSettings};
//! use odeirls::{Protocol, Scheme};
//!
//! let protocol = Protocol::lorenz();
//! let data = protocol.generate(11, true)?.observations;
//! let problem = protocol.problem(data, Scheme::Rk4, 0.005)?;
//! let prob = ProbSettings { samples: 100, seed: 11 };
//! let result = fit(&problem, &protocol.theta0(), Method::Irls, prob, &FitOptions::default())?;
//! assert!(protocol.error(&result.theta_hat)? < 0.05);
//! # Ok::<(), odeirls::Error>(())
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod error;
pub mod estimate;
pub mod inference;
pub mod integrate;
pub mod isotonic;
pub mod models;
pub mod protocol;
mod optim;

pub use error::{Error, Result};
pub use estimate::{
    EstimationProblem, FitOptions, FitResult, Method, ObservationSet, WeightMatrix,
};
pub use integrate::{NumericalSolution, Scheme, TimeGrid};
pub use models::{builtin, BuiltinModel, OdeModel, ParameterVector};
pub use protocol::{ErrorMeasure, Protocol};
