//! Partitioned-view contrastive pre-training for grayscale vision transformers.
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod numeric;
pub mod partition;
pub mod patching;
pub mod probes;
pub mod rng;
pub mod trainer;
pub mod tsp_loss;

pub use config::RunConfig;
pub use encoder::{Encoder, EncoderConfig, EncoderParams};
pub use error::{Error, Result};
pub use numeric::{Gradients, Graph, Tensor, Var};
pub use patching::ImageGray;
pub use probes::LabeledEmbeddings;
pub use trainer::{TrainConfig, TrainState};
pub use tsp_loss::LossParams;
