//! Small neural-network toolkit over `candle-core`: a named parameter
//! store, the layers the model needs, and Adam.

mod conv;
mod gradcheck;
mod layers;
mod optim;
mod params;

pub use layers::{
    leaky_relu, masked_mean, sequence_mask, sigmoid, Conv1d, ConvTranspose1d, Embedding, LayerNorm,
};
pub use conv::conv1d;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::{Init, ParamBuilder, ParamStore};

pub use candle_core::{DType, Device, Tensor, Var};
