//! Minimal differentiable classifier and the mixed-target training loop.

mod checkpoint;
mod loss;
mod model;
mod optim;
mod schedule;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use loss::{log_softmax, soft_ce, soft_ce_target, softmax, MixTarget};
pub use model::{Architecture, Model};
pub use optim::{sgd_step, Sgd};
pub use schedule::lr_at;
pub use train::{loss_and_grad, train, train_with_weights, EpochRecord, Resample, TrainConfig, TrainHistory};
