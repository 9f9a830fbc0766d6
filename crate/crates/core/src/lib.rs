pub mod cli;
pub mod error;
pub mod fitting;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod quadrature;
pub mod simulation;
pub mod spline;

pub use error::{GcaError, Result};
