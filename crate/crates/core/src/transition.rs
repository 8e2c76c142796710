//! Token transition metrics.
//!
//! For one sub-block, a token's transition is the pair
//! `magnitude = |out| / |in|` and `direction = cos(in, out)`. The sub-block
//! TTV score of image token `i` is
//!
//! ```text
//! softmax_j(1 - |direction_j|)_i * magnitude_i
//! ```
//!
//! with the softmax taken over the image tokens currently alive. A layer's
//! TTV is the attention score plus the FFN score, and the accumulated TTV at a
//! pruning layer is the sum of layer TTVs over the accumulation layers up to it.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::runtime::SubBlockCapture;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("token {token} has a zero-norm sub-block input")]
    DegenerateInput { token: usize },
    #[error("input/output shapes differ: {0}")]
    Shape(String),
    #[error("no transitions to score")]
    Empty,
    #[error("token sets do not align: {0}")]
    Alignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModuleTransition {
    pub token_index: usize,
    pub magnitude: f64,
    pub direction: f64,
}

impl ModuleTransition {
    /// The direction term fed to the softmax, `1 - |direction|`, in `[0, 1]`.
    pub fn orthogonality(&self) -> f64 {
        1.0 - self.direction.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubBlock {
    Attention,
    Ffn,
    LayerTotal,
}

impl SubBlock {
    pub fn as_str(&self) -> &'static str {
        match self {
            SubBlock::Attention => "attention",
            SubBlock::Ffn => "ffn",
            SubBlock::LayerTotal => "layer_total",
        }
    }
}

/// Which parts of the transition enter a sub-block score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtvVariant {
    /// `softmax(1 - |d|) * m`.
    #[default]
    Full,
    /// `m` alone.
    MagnitudeOnly,
    /// `softmax(1 - |d|)` alone.
    DirectionOnly,
}

/// Per-token TTV scores. `scores[i]` belongs to original token `tokens[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtvVector {
    pub tokens: Vec<usize>,
    pub scores: Vec<f64>,
    pub layer: usize,
    pub sub_block: SubBlock,
}

impl TtvVector {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn score_of(&self, token: usize) -> Option<f64> {
        self.tokens
            .iter()
            .position(|&t| t == token)
            .map(|i| self.scores[i])
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn transition(token: usize, input: &[f64], output: &[f64]) -> Result<ModuleTransition, MetricError> {
    let n_in = norm(input);
    if n_in == 0.0 {
        return Err(MetricError::DegenerateInput { token });
    }
    let n_out = norm(output);
    if n_out == 0.0 {
        return Ok(ModuleTransition {
            token_index: token,
            magnitude: 0.0,
            direction: 0.0,
        });
    }
    let dot: f64 = input.iter().zip(output).map(|(a, b)| a * b).sum();
    Ok(ModuleTransition {
        token_index: token,
        magnitude: n_out / n_in,
        direction: (dot / (n_out * n_in)).clamp(-1.0, 1.0),
    })
}

fn check_shapes(tokens: &[usize], inputs: &Matrix, outputs: &Matrix) -> Result<(), MetricError> {
    if inputs.rows != outputs.rows || inputs.cols != outputs.cols || inputs.rows != tokens.len() {
        return Err(MetricError::Shape(format!(
            "{} tokens, inputs {}x{}, outputs {}x{}",
            tokens.len(),
            inputs.rows,
            inputs.cols,
            outputs.rows,
            outputs.cols
        )));
    }
    Ok(())
}

/// Magnitude and direction transition of every row pair.
///
/// Fails on the first zero-norm input row.
pub fn module_transition(
    tokens: &[usize],
    inputs: &Matrix,
    outputs: &Matrix,
) -> Result<Vec<ModuleTransition>, MetricError> {
    check_shapes(tokens, inputs, outputs)?;
    (0..tokens.len())
        .map(|r| transition(tokens[r], inputs.row(r), outputs.row(r)))
        .collect()
}

/// Like [`module_transition`] but maps zero-norm inputs to a zero transition
/// (magnitude 0, direction 0) so the token contributes nothing.
pub fn module_transition_lenient(
    tokens: &[usize],
    inputs: &Matrix,
    outputs: &Matrix,
) -> Result<Vec<ModuleTransition>, MetricError> {
    check_shapes(tokens, inputs, outputs)?;
    Ok((0..tokens.len())
        .map(|r| {
            transition(tokens[r], inputs.row(r), outputs.row(r)).unwrap_or(ModuleTransition {
                token_index: tokens[r],
                magnitude: 0.0,
                direction: 0.0,
            })
        })
        .collect())
}

pub fn capture_transitions(capture: &SubBlockCapture) -> Result<Vec<ModuleTransition>, MetricError> {
    module_transition_lenient(&capture.tokens, &capture.input, &capture.output)
}

/// Softmax of `1 - |direction|` over the given tokens (temperature 1).
pub fn softmax_factor(transitions: &[ModuleTransition]) -> Vec<f64> {
    let x: Vec<f64> = transitions.iter().map(ModuleTransition::orthogonality).collect();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

pub fn ttv_sub_block(
    transitions: &[ModuleTransition],
    layer: usize,
    sub_block: SubBlock,
) -> Result<TtvVector, MetricError> {
    ttv_sub_block_variant(transitions, layer, sub_block, TtvVariant::Full)
}

pub fn ttv_sub_block_variant(
    transitions: &[ModuleTransition],
    layer: usize,
    sub_block: SubBlock,
    variant: TtvVariant,
) -> Result<TtvVector, MetricError> {
    if transitions.is_empty() {
        return Err(MetricError::Empty);
    }
    let scores = match variant {
        TtvVariant::MagnitudeOnly => transitions.iter().map(|t| t.magnitude).collect(),
        TtvVariant::DirectionOnly => softmax_factor(transitions),
        TtvVariant::Full => softmax_factor(transitions)
            .into_iter()
            .zip(transitions)
            .map(|(s, t)| s * t.magnitude)
            .collect(),
    };
    Ok(TtvVector {
        tokens: transitions.iter().map(|t| t.token_index).collect(),
        scores,
        layer,
        sub_block,
    })
}

/// Elementwise sum of the two sub-block vectors of one layer, in the
/// attention vector's token order.
pub fn ttv_layer(attention: &TtvVector, ffn: &TtvVector) -> Result<TtvVector, MetricError> {
    if attention.layer != ffn.layer {
        return Err(MetricError::Alignment(format!(
            "attention is layer {}, ffn is layer {}",
            attention.layer, ffn.layer
        )));
    }
    if attention.len() != ffn.len() {
        return Err(MetricError::Alignment(format!(
            "attention has {} tokens, ffn has {}",
            attention.len(),
            ffn.len()
        )));
    }
    let ffn_by_token: BTreeMap<usize, f64> =
        ffn.tokens.iter().copied().zip(ffn.scores.iter().copied()).collect();
    let scores = attention
        .tokens
        .iter()
        .zip(&attention.scores)
        .map(|(t, a)| {
            ffn_by_token
                .get(t)
                .map(|f| a + f)
                .ok_or_else(|| MetricError::Alignment(format!("token {t} missing from ffn")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TtvVector {
        tokens: attention.tokens.clone(),
        scores,
        layer: attention.layer,
        sub_block: SubBlock::LayerTotal,
    })
}

/// Outcome of [`AccumulatedTtv::accumulate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumulateStatus {
    Added,
    /// Layer not in the accumulation set; nothing changed.
    OutsideSet,
    /// Layer already covered; nothing changed.
    AlreadyCovered,
}

/// Running per-token sum of layer TTVs.
///
/// Contributions are stored per layer and summed on read in ascending layer
/// order, so the result does not depend on the order layers were added.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccumulatedTtv {
    tokens: Vec<usize>,
    per_layer: BTreeMap<usize, Vec<f64>>,
}

impl AccumulatedTtv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn covered_layers(&self) -> BTreeSet<usize> {
        self.per_layer.keys().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    /// Adds `layer_ttv` if its layer belongs to `accumulation_set`.
    ///
    /// Tokens absent from `layer_ttv` stop accumulating and are dropped;
    /// tokens absent from the running set are ignored.
    pub fn accumulate(
        &mut self,
        layer_ttv: &TtvVector,
        accumulation_set: &BTreeSet<usize>,
    ) -> AccumulateStatus {
        if !accumulation_set.contains(&layer_ttv.layer) {
            return AccumulateStatus::OutsideSet;
        }
        if self.per_layer.contains_key(&layer_ttv.layer) {
            return AccumulateStatus::AlreadyCovered;
        }
        if self.per_layer.is_empty() {
            self.tokens = layer_ttv.tokens.clone();
            self.per_layer
                .insert(layer_ttv.layer, layer_ttv.scores.clone());
            return AccumulateStatus::Added;
        }
        let incoming: BTreeMap<usize, f64> = layer_ttv
            .tokens
            .iter()
            .copied()
            .zip(layer_ttv.scores.iter().copied())
            .collect();
        let keep: Vec<usize> = self.tokens.iter().copied().filter(|t| incoming.contains_key(t)).collect();
        self.restrict(&keep);
        let column = self.tokens.iter().map(|t| incoming[t]).collect();
        self.per_layer.insert(layer_ttv.layer, column);
        AccumulateStatus::Added
    }

    /// Drops every token not in `keep`.
    pub fn restrict(&mut self, keep: &[usize]) {
        let keep: BTreeSet<usize> = keep.iter().copied().collect();
        let rows: Vec<usize> = (0..self.tokens.len())
            .filter(|&i| keep.contains(&self.tokens[i]))
            .collect();
        if rows.len() == self.tokens.len() {
            return;
        }
        self.tokens = rows.iter().map(|&i| self.tokens[i]).collect();
        for v in self.per_layer.values_mut() {
            *v = rows.iter().map(|&i| v[i]).collect();
        }
    }

    /// Per-token sums, ascending layer order.
    pub fn scores(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.tokens.len()];
        for column in self.per_layer.values() {
            for (o, v) in out.iter_mut().zip(column) {
                *o += v;
            }
        }
        out
    }

    pub fn score_of(&self, token: usize) -> Option<f64> {
        let i = self.tokens.iter().position(|&t| t == token)?;
        Some(self.per_layer.values().fold(0.0, |acc, c| acc + c[i]))
    }
}
