//! Losses, momentum SGD with the poly schedule, augmentation, the training
//! loop and multi-scale evaluation.

mod augment;
mod eval;
mod loss;
mod optim;
mod trainer;

pub use augment::{augment, AugmentConfig, SCALE_AUG_RANGE};
pub use eval::{evaluate, predict_labels, predict_multiscale, EvalReport, Predictor, MS_SCALES};
pub use loss::{argmax, ce_loss, ohem_loss, softmax, LossConfig, LossOutput, OhemConfig};
pub use optim::{poly_lr, sgd_step, OptimState};
pub use trainer::{augment_rng, train, train_step, EvalRecord, TrainConfig, TrainOutputs, TrainReport};
