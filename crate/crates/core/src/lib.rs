pub mod accounting;
pub mod analysis;
pub mod arc;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod kernel;
pub mod reparam;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use kernel::{Matrix, Rng};
