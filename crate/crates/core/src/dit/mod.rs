//! Rectified-flow transformer over face tokens: conditioning, training and generation.

mod condition;
mod config;
mod generate;
mod model;
mod train;

pub use condition::{condition_dropout, toy_condition_features, Conditioning, TOY_FEATURE_DIM, TOY_TOKENS};
pub use config::{DitConfig, DitTrainConfig};
pub use generate::{
    complete, complete_tokens, decode_tokens_to_mesh, generate, generate_batch, sample_tokens, Completed, DitField,
    GenerateRequest, Generated, SamplingOptions,
};
pub use model::{time_features, Dit, TIME_FREQ_DIM, TIME_SCALE};
pub use train::{latent_scale_for, train_dit, DitStepStats, DitTrainer};
