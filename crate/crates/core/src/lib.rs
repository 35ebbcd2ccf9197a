//! Decoder-only GQA transformer engine with high-layer attention pruning.
//!
//! Pruned layers bypass query/key projections and the softmax entirely and
//! add a rescaled value/output projection to the residual stream instead.
//! The per-layer rescaling factors are found by a greedy top-down grid
//! search on perplexity.

pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pruning;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use corpus::Corpus;
pub use error::{HarpError, Result};
pub use model::{forward, AttentionPath, CaptureFlags, ForwardOutput, LayerPlan};
pub use pruning::{AlphaSchedule, PruneSpec, Strategy};
pub use tensor::Matrix;
