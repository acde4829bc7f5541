//! GateTS forecaster assembly and baselines.

pub mod baselines;
pub mod config;
pub mod model;

pub use baselines::{naive_forecast, naive_forecast_batch};
pub use config::{Arch, GateTsConfig};
pub use model::{
    combine_experts, count_parameters, embed_inputs, expert_forward, expert_parameter_count,
    expert_rows, forecast_head, prepare_block, ExpertEval, ExpertNodes, GateTsLayout, GateTsNodes,
    Model, ModelOutput,
};
