//! Contraction-certified fixed-point layers trained with implicit gradients,
//! and an introspective agent that chooses per sample how many layers to run.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agent;
pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod fpi;
pub mod layers;
pub mod linalg;
pub mod optim;
pub mod oracle;
pub mod plot;
pub mod reward;
pub mod trainer;

pub use agent::{Action, AgentNet, SelectMode};
pub use data::{Dataset, Difficulty};
pub use error::{Error, Result};
pub use fpi::{fpi_backward, fpi_forward, FixedPointResult, FpiConfig, Z0Policy};
pub use layers::{DenseLayer, FpiLayer};
pub use linalg::{Activation, DenseMatrix};
pub use reward::{CostLedger, EpisodeTrace, RewardParams};
pub use trainer::{Checkpoint, EvalReport, MainModel, TrainConfig, Trainer};
