//! Fixed-window feed-forward language model with per-user low-rank adapters.
//!
//! The network embeds the last `window` tokens, concatenates them, applies
//! one tanh hidden layer and a softmax output layer. Adapters add a
//! `scale · A · B` delta to the hidden and output matrices; embeddings and
//! biases stay frozen in adapter mode. Gradients are derived by hand.

pub mod checkpoint;
pub mod gradcheck;
mod network;
mod params;
mod train;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use network::{forward, window_ids, TinyLm};
pub use params::{AdapterDelta, Dims, LowRank, ModelParams};
pub use train::{
    seq_log_prob, sft_loss, sft_loss_grad, sft_step, train_sft, weighted_log_prob_grad, Example,
    LrSchedule, ParamView, TrainConfig, TrainMode, TrainReport, Trainee, WeightedSeq,
};
pub(crate) use train::epoch_batches;
