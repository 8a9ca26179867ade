pub mod autodiff;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod predictive;
pub mod seed;

pub use error::{Error, Result};
