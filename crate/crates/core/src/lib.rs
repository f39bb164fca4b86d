pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod content;
pub mod convert;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod nn;
pub mod perturb;
pub mod pbtc;
pub mod pitch;
pub mod synth;
pub mod training;
mod util;

pub use error::{Error, Result};
pub use matrix::Matrix;
