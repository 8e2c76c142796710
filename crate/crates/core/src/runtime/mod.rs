//! Deterministic toy decoder-only transformer.
//!
//! Pre-norm blocks (RMS norm, multi-head causal self-attention, gated SiLU
//! FFN with three projections), sinusoidal encodings of the preserved
//! position index, and hook points after every attention sub-block and
//! every layer. Captured sub-block inputs are the normalized vectors entering
//! the sub-block; outputs are taken before the residual add.

mod config;
mod hooks;
mod model;
mod sequence;
mod trace;

pub use config::{DType, RuntimeConfig};
pub use hooks::{
    CaptureOnly, CapturePlan, CaptureScope, DecisionPoint, DecisionState, ForwardHooks, HookError,
    RemoveAt,
};
pub use model::OpCount;
pub use sequence::{TokenRole, TokenSequence};
pub use trace::{ActivationTrace, AttentionSlice, HeadReduction, LayerCapture, SubBlockCapture};

use model::{Model, PassOutput};

use crate::tensor::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("invalid runtime configuration: {0}")]
    Config(String),
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error("hook contract violation: {0}")]
    ContractViolation(String),
    #[error("hook failed")]
    Hook(#[source] HookError),
}

#[derive(Debug, Clone)]
enum Weights {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// An initialized toy model. Immutable; forward passes take `&self` and may
/// run concurrently.
#[derive(Debug, Clone)]
pub struct Runtime {
    config: RuntimeConfig,
    weights: Weights,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// One row of vocabulary logits per surviving token, widened to f64.
    pub logits: Matrix,
    /// Original indices of the rows of `logits`.
    pub tokens: Vec<usize>,
    pub trace: ActivationTrace,
    pub ops: OpCount,
}

impl ForwardOutput {
    /// Logits row of original token `token`, if it survived.
    pub fn logits_of(&self, token: usize) -> Option<&[f64]> {
        self.tokens
            .iter()
            .position(|&t| t == token)
            .map(|r| self.logits.row(r))
    }

    /// CRC-32 of the logits' little-endian f64 bytes, for quick comparisons.
    pub fn logits_digest(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for v in &self.logits.data {
            h.update(&v.to_le_bytes());
        }
        h.finalize()
    }
}

impl From<PassOutput> for ForwardOutput {
    fn from(p: PassOutput) -> Self {
        Self {
            logits: p.logits,
            tokens: p.tokens,
            trace: p.trace,
            ops: p.ops,
        }
    }
}

/// Weights of one layer widened to f64, for oracles and inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Result<Self, RuntimeError> {
        config.validate()?;
        let weights = match config.dtype {
            DType::Float32 => Weights::F32(Model::new(&config)),
            DType::Float64 => Weights::F64(Model::new(&config)),
        };
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// All parameters serialized little-endian in generation order.
    pub fn parameter_bytes(&self) -> Vec<u8> {
        match &self.weights {
            Weights::F32(m) => m.parameter_bytes(),
            Weights::F64(m) => m.parameter_bytes(),
        }
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<ForwardOutput, RuntimeError> {
        self.run(seq, None)
    }

    pub fn forward_with_hooks(
        &self,
        seq: &TokenSequence,
        hooks: &mut dyn ForwardHooks,
    ) -> Result<ForwardOutput, RuntimeError> {
        self.run(seq, Some(hooks))
    }

    fn run(
        &self,
        seq: &TokenSequence,
        hooks: Option<&mut dyn ForwardHooks>,
    ) -> Result<ForwardOutput, RuntimeError> {
        macro_rules! go {
            ($m:expr) => {{
                let state = $m.start_state(seq)?;
                $m.run(seq.roles(), state, 1, hooks).map(Into::into)
            }};
        }
        match &self.weights {
            Weights::F32(m) => go!(m),
            Weights::F64(m) => go!(m),
        }
    }

    /// Continues a pass from the residual stream entering `start_layer`.
    ///
    /// `hidden` holds one row per token of `seq`. Used to compare against a
    /// sequence whose tokens were physically deleted.
    pub fn resume(
        &self,
        start_layer: usize,
        seq: &TokenSequence,
        hidden: &Matrix,
    ) -> Result<ForwardOutput, RuntimeError> {
        if start_layer == 0 || start_layer > self.config.n_layers + 1 {
            return Err(RuntimeError::Config(format!(
                "resume layer {start_layer} outside 1..={}",
                self.config.n_layers + 1
            )));
        }
        if hidden.rows != seq.len() || hidden.cols != self.config.d_model {
            return Err(RuntimeError::InvalidSequence(format!(
                "hidden state is {}x{}, expected {}x{}",
                hidden.rows,
                hidden.cols,
                seq.len(),
                self.config.d_model
            )));
        }
        let live: Vec<usize> = (0..seq.len()).collect();
        match &self.weights {
            Weights::F32(m) => m
                .run(seq.roles(), m.resume_state(hidden, live), start_layer, None)
                .map(Into::into),
            Weights::F64(m) => m
                .run(seq.roles(), m.resume_state(hidden, live), start_layer, None)
                .map(Into::into),
        }
    }

    pub fn layer_weights(&self, layer: usize) -> Option<LayerWeights> {
        let (d, m) = (self.config.d_model, self.config.d_ffn);
        macro_rules! widen {
            ($model:expr) => {{
                let p = $model.layers.get(layer.checked_sub(1)?)?;
                let w = |v: &[_], r, c| Matrix::from_vec(r, c, v.iter().map(|&x| model::Scalar::widen(x)).collect());
                let v = |v: &[_]| v.iter().map(|&x| model::Scalar::widen(x)).collect::<Vec<f64>>();
                LayerWeights {
                    attn_norm: v(&p.attn_norm),
                    wq: w(&p.wq, d, d),
                    wk: w(&p.wk, d, d),
                    wv: w(&p.wv, d, d),
                    wo: w(&p.wo, d, d),
                    ffn_norm: v(&p.ffn_norm),
                    w_gate: w(&p.w_gate, d, m),
                    w_up: w(&p.w_up, d, m),
                    w_down: w(&p.w_down, m, d),
                }
            }};
        }
        Some(match &self.weights {
            Weights::F32(model) => widen!(model),
            Weights::F64(model) => widen!(model),
        })
    }
}
