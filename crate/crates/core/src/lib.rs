//! Rotation-parametrized state-space layers with Hankel nuclear-norm regularization.

pub mod compress;
pub mod error;
pub mod gramians;
pub mod hankel;
pub mod linalg;
pub mod lti;
pub mod net;
pub mod scan;

pub use error::{Error, Result};
