//! Run configuration, on-disk formats, training and ablation runners, CLI.

pub mod cli;
pub mod config;
pub mod io;
pub mod train;

pub use config::RunConfig;
pub use train::{
    ablate_modality, ablate_temporal, eval_checkpoint, evaluate, train, train_on, train_seed, Normalizer,
    TrainOutcome, TrainSummary,
};
