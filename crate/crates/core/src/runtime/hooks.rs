use std::collections::BTreeSet;

use super::{ActivationTrace, HeadReduction, TokenRole};

/// Which tokens' rows a sub-block capture records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CaptureScope {
    #[default]
    ImageOnly,
    AllTokens,
}

/// What a forward pass should record. Layers are numbered from 1.
#[derive(Debug, Clone, Default)]
pub struct CapturePlan {
    /// Layers whose attention and FFN inputs/outputs are recorded.
    pub sub_block_layers: BTreeSet<usize>,
    /// Layers whose instruction-to-image attention slice is recorded.
    pub slice_layers: BTreeSet<usize>,
    /// Layers whose full head-reduced attention map is recorded.
    pub full_attention_layers: BTreeSet<usize>,
    /// Layers whose incoming residual stream is recorded.
    pub hidden_layers: BTreeSet<usize>,
    pub scope: CaptureScope,
    pub head_reduction: HeadReduction,
}

impl CapturePlan {
    pub fn everything(n_layers: usize) -> Self {
        let all: BTreeSet<usize> = (1..=n_layers).collect();
        Self {
            sub_block_layers: all.clone(),
            slice_layers: all,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sub_block_layers.is_empty()
            && self.slice_layers.is_empty()
            && self.full_attention_layers.is_empty()
            && self.hidden_layers.is_empty()
    }
}

/// Places in the stack where hooks may remove tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecisionPoint {
    /// After the attention sub-block (and its residual add) of `layer`, before its FFN.
    AfterAttention { layer: usize },
    /// After the whole of `layer`.
    AfterLayer { layer: usize },
}

impl DecisionPoint {
    pub fn layer(&self) -> usize {
        match *self {
            DecisionPoint::AfterAttention { layer } | DecisionPoint::AfterLayer { layer } => layer,
        }
    }
}

/// Read-only view handed to hooks at a decision point.
pub struct DecisionState<'a> {
    /// Original indices of live tokens, in sequence order.
    pub live_tokens: &'a [usize],
    /// Roles of the ORIGINAL sequence, indexed by original index.
    pub roles: &'a [TokenRole],
    pub trace: &'a ActivationTrace,
}

impl DecisionState<'_> {
    pub fn live_image_tokens(&self) -> Vec<usize> {
        self.live_tokens
            .iter()
            .copied()
            .filter(|&t| self.roles[t] == TokenRole::Image)
            .collect()
    }
}

pub type HookError = Box<dyn std::error::Error + Send + Sync>;

/// Observer/mutator interface for [`Runtime::forward_with_hooks`](super::Runtime::forward_with_hooks).
pub trait ForwardHooks {
    fn plan(&self) -> CapturePlan {
        CapturePlan::default()
    }

    /// Returns the original indices of tokens to drop at `point`. Only image
    /// tokens may be dropped.
    fn decide(
        &mut self,
        _point: DecisionPoint,
        _state: &DecisionState<'_>,
    ) -> Result<Vec<usize>, HookError> {
        Ok(Vec::new())
    }
}

/// Captures according to a fixed plan and never removes anything.
#[derive(Debug, Clone, Default)]
pub struct CaptureOnly(pub CapturePlan);

impl ForwardHooks for CaptureOnly {
    fn plan(&self) -> CapturePlan {
        self.0.clone()
    }
}

/// Removes a fixed token set at one decision point.
#[derive(Debug, Clone)]
pub struct RemoveAt {
    pub point: DecisionPoint,
    pub tokens: Vec<usize>,
    pub plan: CapturePlan,
}

impl ForwardHooks for RemoveAt {
    fn plan(&self) -> CapturePlan {
        self.plan.clone()
    }

    fn decide(
        &mut self,
        point: DecisionPoint,
        _state: &DecisionState<'_>,
    ) -> Result<Vec<usize>, HookError> {
        Ok(if point == self.point {
            self.tokens.clone()
        } else {
            Vec::new()
        })
    }
}
