pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod proposal;
pub mod sensitivity;

pub use error::{Error, Result};
