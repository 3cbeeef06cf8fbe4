pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod pca;
pub mod rng;
pub mod synth;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
