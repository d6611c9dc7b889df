pub mod apps;
pub mod bounds;
pub mod calculus;
pub mod error;
pub mod gauss;
pub mod hoeffding;
pub mod kernels;
pub mod linalg;
pub mod marginals;
pub mod rng;
pub mod scenario;
pub mod statistics;

pub use error::{Error, Result};
