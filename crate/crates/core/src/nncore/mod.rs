//! Differentiable tensor substrate: tape, layers, optimizer, schedule.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod lstm;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use graph::{ExpertRows, Graph, Mode, NodeId};
pub use layers::{
    attend_rows, dropout, layer_norm, linear, mse_loss, multi_head_self_attention, softmax,
    AttentionNodes, LinearNodes, NormNodes, LAYER_NORM_EPS,
};
pub use lstm::{lstm_forward, LstmLayout, LstmNodes};
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState, ScheduleState, StepOutcome};
pub use params::ParamStore;
pub use rng::{derive_seed, DropoutRng};
pub use tensor::Tensor;
