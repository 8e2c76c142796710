//! Staged pruning: schedules, score combination, survivor selection, and
//! the drivers that apply a schedule to a live forward pass or a recorded trace.

mod engine;
mod schedule;
mod score;

pub use engine::{
    missing_captures, replay_on_trace, run_pruned_forward, run_pruned_forward_with_capture,
    CaptureFlags, LayerSource, PrunedForward, PruningHooks, PruningReport, StageReport,
};
pub use schedule::{retained_count, Normalization, PruningSchedule, ScoreMode, PRESET_NAMES};
pub use score::{
    combine_scores, normalize, rank_order, select_survivors, RetainedSet, TokenScore,
    TokenScoreBoard,
};

use crate::iga::IgaError;
use crate::runtime::RuntimeError;
use crate::transition::MetricError;

#[derive(Debug, thiserror::Error)]
pub enum PruneError {
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("score alignment error: {0}")]
    Alignment(String),
    #[error("incomplete trace, missing captures: {}", format_missing(.missing))]
    IncompleteTrace { missing: Vec<(usize, String)> },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Iga(#[from] IgaError),
    #[error(transparent)]
    Runtime(RuntimeError),
    #[error("trace source: {0}")]
    Source(String),
}

fn format_missing(missing: &[(usize, String)]) -> String {
    missing
        .iter()
        .map(|(l, what)| format!("layer {l} {what}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl PruneError {
    pub(crate) fn incomplete(missing: Vec<(usize, &str)>) -> Self {
        PruneError::IncompleteTrace {
            missing: missing.into_iter().map(|(l, w)| (l, w.to_string())).collect(),
        }
    }

    /// Layers named by an incomplete-trace error, ascending and deduplicated.
    pub fn missing_layers(&self) -> Vec<usize> {
        match self {
            PruneError::IncompleteTrace { missing } => {
                let mut v: Vec<usize> = missing.iter().map(|(l, _)| *l).collect();
                v.dedup();
                v
            }
            _ => Vec::new(),
        }
    }

    /// Unwraps errors raised by the pruning hooks themselves.
    pub(crate) fn from_runtime(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Hook(inner) => match inner.downcast::<PruneError>() {
                Ok(p) => *p,
                Err(other) => PruneError::Runtime(RuntimeError::Hook(other)),
            },
            other => PruneError::Runtime(other),
        }
    }
}
