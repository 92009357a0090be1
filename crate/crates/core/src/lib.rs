pub mod augmentation;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod ops;
pub mod training;

pub use error::{Error, Result};
