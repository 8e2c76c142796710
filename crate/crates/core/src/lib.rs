//! Visual-token pruning driven by token transition variation.
//!
//! The crate bundles a deterministic toy transformer that exposes sub-block
//! activations through hooks, the transition and instruction-attention
//! metrics, a staged pruning engine that runs live or over recorded traces,
//! a binary trace container, an analytical FLOPs model, and the analyses
//! behind the command-line tool.

pub mod analysis;
pub mod flops;
pub mod iga;
pub mod pruning;
pub mod runtime;
pub mod tensor;
pub mod trace_io;
pub mod transition;

pub use pruning::{PruningReport, PruningSchedule};
pub use runtime::{Runtime, RuntimeConfig, TokenRole, TokenSequence};
pub use tensor::Matrix;
