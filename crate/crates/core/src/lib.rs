//! GateTS: a univariate forecaster built as a sparse mixture of experts.
//!
//! The crate is organised bottom-up:
//!
//! * [`nncore`]: a small reverse-mode tensor engine (tape, layers, AdamW,
//!   cosine schedule, LSTM cell) with finite-difference gradient checking.
//! * [`gating`]: the attention-inspired Kronecker router, the HMM router with
//!   a learnable log-prior, the classic linear router, and top-k
//!   renormalisation.
//! * [`moe`]: model configuration, parameter layout, the full forward pass,
//!   and the naive / LSTM baselines.
//! * [`data`]: CSV/TSF ingestion, LOCF, aggregation, chronological splits,
//!   standardisation, windowing and synthetic series.
//! * [`metrics`]: MAE, RMSE, SMAPE, MASE, confidence intervals and routing
//!   utilisation.
//! * [`trainer`]: the MSE/AdamW training loop, evaluation and checkpoints.
//! * [`selfcheck`]: the numerical self-test battery exposed by the CLI.

pub mod data;
pub mod error;
pub mod gating;
pub mod metrics;
pub mod moe;
pub mod nncore;
pub mod selfcheck;
pub mod trainer;

pub use error::{Error, Result};
