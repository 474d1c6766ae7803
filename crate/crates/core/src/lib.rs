//! Solver and simulation harness for partially observed linear-quadratic
//! leader-follower (Stackelberg) stochastic differential games.
//!
//! Pipeline: [`model`] validation, follower and leader Riccati solves
//! ([`riccati`]), derived coefficient families ([`coefficients`]), path
//! simulation with filters and the Girsanov density ([`paths`]), feedback
//! laws and costs ([`equilibrium`]) and numerical certification ([`verify`],
//! [`suite`]).

pub mod coefficients;
pub mod equilibrium;
pub mod error;
pub mod io;
pub mod linalg;
pub mod lsmc;
pub mod model;
pub mod paths;
pub mod pipeline;
pub mod presets;
pub mod riccati;
pub mod scenario;
pub mod suite;
pub mod verify;

pub use error::{FailureClass, Result, SlqError};
pub use model::{AssumptionReport, CoefficientPath, GameSpec, Interp, TimeGrid};
