//! Reset control toolkit: CgLp elements, higher-order sinusoidal input
//! describing functions, hybrid simulation and quadratic stability
//! certificates.

pub mod config;
pub mod elements;
pub mod error;
pub mod hosidf;
pub mod linalg;
pub mod lmi;
pub mod sim;
pub mod stability;

pub use error::{Error, Result};
