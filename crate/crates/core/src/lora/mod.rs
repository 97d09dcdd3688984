//! A small MLP with a frozen backbone and trainable low-rank adapters.
//!
//! Each adapted layer computes `act((W0 + B·A) x + bias)`. Gradients are
//! derived by hand and flow only into `B` and `A`; the backbone is never
//! written after construction.

mod loss;
mod model;
mod train;

pub use loss::{accuracy, argmax_column, loss_and_output_grad, LossKind, Targets};
pub use model::{
    effective_weight, Activation, AdapterSet, Backbone, ForwardCache, Layer, LoraAdapter,
    LoraModel, A_INIT_STDDEV,
};
pub use train::{loss_and_backward, pretrain_backbone, sgd_step, train_adapters, AdapterGradients, Schedule};
