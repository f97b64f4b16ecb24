//! Numerical construction of multiple warped product expanding Ricci
//! solitons: desingularized ODE flow from the singular orbit, asymptotic
//! cone extraction, and shooting for prescribed cones.

pub mod error;
pub mod integrator;
pub mod model;
pub mod seeding;
pub mod analysis;
pub mod subsystem;
pub mod shooting;

pub use error::{Error, Result};
