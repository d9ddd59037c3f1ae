//! Small convolutional species classifier with hand-written backward
//! passes, weighted cross-entropy, SGD and a one-cycle schedule.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use layers::Mode;
pub use loss::{class_weights, weighted_ce_loss};
pub use model::{ForwardOutput, Model, ModelConfig};
pub use optim::{onecycle_lr, sgd_step, LrBounds, SgdMomentum};
pub use tensor::{Param, Tensor};
pub use train::{
    predict_tree, train_fold, train_kfold, tree_prediction, LabeledImage, TrainConfig,
};
