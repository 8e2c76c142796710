use serde::{Deserialize, Serialize};

use super::TokenRole;
use crate::tensor::Matrix;

/// How per-head attention weights are collapsed into one slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadReduction {
    /// Uniform average over heads. Rows of the reduced slice sum to at most 1.
    #[default]
    Mean,
    /// Elementwise maximum over heads. Row sums may exceed 1.
    Max,
}

impl std::str::FromStr for HeadReduction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            other => Err(format!("unknown head reduction `{other}` (expected mean or max)")),
        }
    }
}

/// Inputs and outputs of one sub-block, residual excluded.
///
/// `input` is the normalized vector entering the sub-block and `output`
/// what the sub-block returns before it is added back to the stream.
/// Row `i` of both matrices belongs to original token `tokens[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubBlockCapture {
    pub tokens: Vec<usize>,
    pub input: Matrix,
    pub output: Matrix,
}

impl SubBlockCapture {
    /// Restricts the capture to `keep` (original indices), in the order given.
    /// Tokens of `keep` that were not captured are skipped.
    pub fn restrict(&self, keep: &[usize]) -> SubBlockCapture {
        let rows: Vec<usize> = keep
            .iter()
            .filter_map(|t| self.tokens.iter().position(|x| x == t))
            .collect();
        SubBlockCapture {
            tokens: rows.iter().map(|&r| self.tokens[r]).collect(),
            input: self.input.select_rows(&rows),
            output: self.output.select_rows(&rows),
        }
    }
}

/// Instruction-query to image-key attention weights, post-softmax and head-reduced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSlice {
    pub instruction_tokens: Vec<usize>,
    pub image_tokens: Vec<usize>,
    /// `instruction_tokens.len()` x `image_tokens.len()`, instruction-row-major.
    pub weights: Matrix,
    #[serde(default)]
    pub reduction: HeadReduction,
}

impl AttentionSlice {
    /// Keeps only the image columns listed in `keep`, in that order.
    pub fn restrict_columns(&self, keep: &[usize]) -> AttentionSlice {
        let cols: Vec<usize> = keep
            .iter()
            .filter_map(|t| self.image_tokens.iter().position(|x| x == t))
            .collect();
        AttentionSlice {
            instruction_tokens: self.instruction_tokens.clone(),
            image_tokens: cols.iter().map(|&c| self.image_tokens[c]).collect(),
            weights: self.weights.select_cols(&cols),
            reduction: self.reduction,
        }
    }
}

/// Everything recorded for one layer. Layers are numbered from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCapture {
    pub layer: usize,
    /// Original indices of every token alive when the layer starts.
    pub live_tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<SubBlockCapture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn: Option<SubBlockCapture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_slice: Option<AttentionSlice>,
    /// Head-reduced full attention map over the live tokens (debug capture).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub full_attention: Option<Matrix>,
    /// Residual stream entering the layer, one row per live token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_in: Option<Matrix>,
}

impl LayerCapture {
    pub fn empty(layer: usize, live_tokens: Vec<usize>) -> Self {
        Self {
            layer,
            live_tokens,
            attention: None,
            ffn: None,
            attention_slice: None,
            full_attention: None,
            hidden_in: None,
        }
    }
}

/// Activations recorded during one forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub model_name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub roles: Vec<TokenRole>,
    /// `layers[l - 1]` holds layer `l`.
    pub layers: Vec<LayerCapture>,
}

impl ActivationTrace {
    pub fn new(
        model_name: impl Into<String>,
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        roles: Vec<TokenRole>,
    ) -> Self {
        Self {
            model_name: model_name.into(),
            n_layers,
            d_model,
            n_heads,
            roles,
            layers: Vec::new(),
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerCapture> {
        layer
            .checked_sub(1)
            .and_then(|i| self.layers.get(i))
            .filter(|c| c.layer == layer)
            .or_else(|| self.layers.iter().find(|c| c.layer == layer))
    }

    pub fn layer_mut(&mut self, layer: usize) -> Option<&mut LayerCapture> {
        self.layers.iter_mut().find(|c| c.layer == layer)
    }

    pub fn image_tokens(&self) -> Vec<usize> {
        (0..self.roles.len())
            .filter(|&i| self.roles[i] == TokenRole::Image)
            .collect()
    }

    /// The surviving-index map: original indices alive at the start of `layer`.
    pub fn surviving_index_map(&self, layer: usize) -> Option<&[usize]> {
        self.layer(layer).map(|c| c.live_tokens.as_slice())
    }
}
