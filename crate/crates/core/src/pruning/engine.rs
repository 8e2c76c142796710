use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{combine_scores, select_survivors, PruneError, PruningSchedule, RetainedSet, TokenScoreBoard};
use crate::iga::{iga_from_slice, IgaError};
use crate::runtime::{
    ActivationTrace, CapturePlan, CaptureScope, DecisionPoint, DecisionState, ForwardHooks,
    ForwardOutput, HookError, LayerCapture, Runtime, TokenRole, TokenSequence,
};
use crate::transition::{
    capture_transitions, ttv_layer, ttv_sub_block_variant, AccumulatedTtv, SubBlock, TtvVector,
};

/// What a layer of a trace carries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureFlags {
    pub attention: bool,
    pub ffn: bool,
    pub attention_slice: bool,
}

impl CaptureFlags {
    pub fn of(capture: &LayerCapture) -> Self {
        Self {
            attention: capture.attention.is_some(),
            ffn: capture.ffn.is_some(),
            attention_slice: capture.attention_slice.is_some(),
        }
    }
}

/// Random access to the layers of a trace, in memory or on disk.
pub trait LayerSource {
    fn roles(&self) -> &[TokenRole];
    fn n_layers(&self) -> usize;
    /// Capture flags per recorded layer, available without loading payloads.
    fn available(&self) -> BTreeMap<usize, CaptureFlags>;
    fn load_layer(&mut self, layer: usize) -> Result<Option<Cow<'_, LayerCapture>>, PruneError>;
}

impl LayerSource for &ActivationTrace {
    fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn available(&self) -> BTreeMap<usize, CaptureFlags> {
        self.layers.iter().map(|c| (c.layer, CaptureFlags::of(c))).collect()
    }

    fn load_layer(&mut self, layer: usize) -> Result<Option<Cow<'_, LayerCapture>>, PruneError> {
        Ok(self.layer(layer).map(Cow::Borrowed))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// 1-based stage number.
    pub stage: usize,
    pub pruning_layer: usize,
    /// Layer whose attention sub-block hosts the cut.
    pub decision_layer: usize,
    pub ttv_layers: Vec<usize>,
    pub retained_ratio: f64,
    /// Image tokens alive when the stage was scored.
    pub input_count: usize,
    pub retained: RetainedSet,
    pub board: TokenScoreBoard,
    /// Set when the stage had no instruction rows and fell back to TTV alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    /// Set when the trace's recorded token population differs from the
    /// population this schedule implies, so scores are approximate.
    pub approximate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningReport {
    pub original_image_count: usize,
    pub stages: Vec<StageReport>,
}

impl PruningReport {
    pub fn stage_counts(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.retained.count()).collect()
    }

    pub fn approximate(&self) -> bool {
        self.stages.iter().any(|s| s.approximate)
    }

    pub fn final_retained(&self) -> Option<&RetainedSet> {
        self.stages.last().map(|s| &s.retained)
    }
}

/// Incremental scorer shared by live pruning and offline replay.
struct StageScorer<'s> {
    schedule: &'s PruningSchedule,
    roles: Vec<TokenRole>,
    original_image: Vec<usize>,
    /// Layer TTV, computed once per layer on first use.
    layer_ttv: BTreeMap<usize, TtvVector>,
    layer_exact: BTreeMap<usize, bool>,
    report: PruningReport,
}

impl<'s> StageScorer<'s> {
    fn new(schedule: &'s PruningSchedule, roles: &[TokenRole]) -> Result<Self, PruneError> {
        let original_image: Vec<usize> =
            (0..roles.len()).filter(|&i| roles[i] == TokenRole::Image).collect();
        if original_image.is_empty() {
            return Err(PruneError::Schedule("sequence has no image tokens".into()));
        }
        Ok(Self {
            schedule,
            report: PruningReport {
                original_image_count: original_image.len(),
                stages: Vec::new(),
            },
            roles: roles.to_vec(),
            original_image,
            layer_ttv: BTreeMap::new(),
            layer_exact: BTreeMap::new(),
        })
    }

    fn next_stage(&self) -> Option<usize> {
        let s = self.report.stages.len();
        (s < self.schedule.stages()).then_some(s)
    }

    /// Image tokens alive after every cut made at or before the attention
    /// sub-block of `layer` (`inclusive`) or strictly before `layer`.
    fn live_at(&self, layer: usize, inclusive: bool) -> &[usize] {
        self.report
            .stages
            .iter()
            .rev()
            .find(|s| {
                if inclusive {
                    s.decision_layer <= layer
                } else {
                    s.decision_layer < layer
                }
            })
            .map_or(&self.original_image[..], |s| &s.retained.tokens[..])
    }

    fn layer_ttv(&mut self, source: &mut dyn LayerSource, layer: usize) -> Result<TtvVector, PruneError> {
        if let Some(v) = self.layer_ttv.get(&layer) {
            return Ok(v.clone());
        }
        let before = self.live_at(layer, false).to_vec();
        let after = self.live_at(layer, true).to_vec();
        let capture = source
            .load_layer(layer)?
            .ok_or_else(|| PruneError::incomplete(vec![(layer, "layer")]))?;
        let attention = capture
            .attention
            .as_ref()
            .ok_or_else(|| PruneError::incomplete(vec![(layer, "attention")]))?;
        let ffn = capture
            .ffn
            .as_ref()
            .ok_or_else(|| PruneError::incomplete(vec![(layer, "ffn")]))?;
        let roles = &self.roles;
        let image_of = |tokens: &[usize]| -> BTreeSet<usize> {
            tokens
                .iter()
                .copied()
                .filter(|&t| roles.get(t) == Some(&TokenRole::Image))
                .collect()
        };
        let exact = image_of(&attention.tokens) == before.iter().copied().collect()
            && image_of(&ffn.tokens) == after.iter().copied().collect();

        // Both sub-blocks are scored over the tokens alive at the end of the layer.
        let attention = attention.restrict(&after);
        let ffn = ffn.restrict(&after);
        if attention.tokens.is_empty() || ffn.tokens.is_empty() {
            return Err(PruneError::incomplete(vec![(layer, "image rows")]));
        }
        let variant = self.schedule.mode.ttv_variant();
        let a = ttv_sub_block_variant(&capture_transitions(&attention)?, layer, SubBlock::Attention, variant)?;
        let f = ttv_sub_block_variant(&capture_transitions(&ffn)?, layer, SubBlock::Ffn, variant)?;
        let total = ttv_layer(&a, &f)?;
        self.layer_ttv.insert(layer, total.clone());
        self.layer_exact.insert(layer, exact);
        Ok(total)
    }

    /// Scores and cuts stage `stage`. `live` is the set of image tokens alive
    /// at the decision point.
    fn run_stage(
        &mut self,
        source: &mut dyn LayerSource,
        stage: usize,
        live: &[usize],
    ) -> Result<&StageReport, PruneError> {
        let schedule = self.schedule;
        let pruning_layer = schedule.pruning_layers[stage];
        let decision_layer = schedule.decision_layer(stage);
        let ttv_layers = schedule.ttv_layers(stage);
        let mut exact = live.iter().copied().collect::<BTreeSet<_>>()
            == self.live_at(decision_layer, false).iter().copied().collect();

        let mut mode = schedule.mode;
        let mut fallback = None;
        let iga = if mode.uses_iga() {
            let capture = source
                .load_layer(decision_layer)?
                .ok_or_else(|| PruneError::incomplete(vec![(decision_layer, "layer")]))?;
            let slice = capture
                .attention_slice
                .as_ref()
                .ok_or_else(|| PruneError::incomplete(vec![(decision_layer, "attention_slice")]))?;
            exact &= slice.image_tokens.iter().copied().collect::<BTreeSet<_>>()
                == live.iter().copied().collect();
            match iga_from_slice(&slice.restrict_columns(live), decision_layer) {
                Ok(v) => Some(v),
                Err(IgaError::MissingInstruction) if mode.uses_ttv() => {
                    fallback = Some("no instruction tokens; scored with TTV alone".to_string());
                    mode = super::ScoreMode::TtvOnly;
                    None
                }
                Err(e) => return Err(e.into()),
            }
        } else {
            None
        };

        let ttv = if mode.uses_ttv() {
            let set: BTreeSet<usize> = ttv_layers.iter().copied().collect();
            let mut acc = AccumulatedTtv::new();
            for &layer in &ttv_layers {
                let v = self.layer_ttv(source, layer)?;
                exact &= self.layer_exact[&layer];
                acc.accumulate(&v, &set);
            }
            acc.restrict(live);
            if acc.tokens().len() != live.len() {
                return Err(PruneError::Alignment(format!(
                    "stage {}: TTV covers {} of {} live image tokens",
                    stage + 1,
                    acc.tokens().len(),
                    live.len()
                )));
            }
            Some(acc)
        } else {
            None
        };

        let entries = combine_scores(
            ttv.as_ref(),
            iga.as_ref(),
            schedule.alpha,
            mode,
            schedule.normalization,
        )?;
        let board = TokenScoreBoard {
            stage: stage + 1,
            pruning_layer,
            entries,
        };
        let ratio = schedule.retained_ratios[stage];
        let retained = select_survivors(&board, ratio, self.original_image.len())?;
        self.report.stages.push(StageReport {
            stage: stage + 1,
            pruning_layer,
            decision_layer,
            ttv_layers,
            retained_ratio: ratio,
            input_count: live.len(),
            retained,
            board,
            fallback,
            approximate: !exact,
        });
        Ok(self.report.stages.last().expect("just pushed"))
    }
}

/// Hooks that execute a schedule inside a live forward pass.
pub struct PruningHooks<'s> {
    scorer: StageScorer<'s>,
    plan: CapturePlan,
}

impl<'s> PruningHooks<'s> {
    pub fn new(schedule: &'s PruningSchedule, seq: &TokenSequence) -> Result<Self, PruneError> {
        let mut plan = CapturePlan {
            scope: CaptureScope::ImageOnly,
            head_reduction: schedule.head_reduction,
            ..CapturePlan::default()
        };
        if schedule.mode.uses_ttv() || schedule.mode.uses_iga() {
            plan.sub_block_layers = schedule.all_ttv_layers();
        }
        if schedule.mode.uses_iga() {
            plan.slice_layers = schedule.decision_layers();
        }
        Ok(Self {
            scorer: StageScorer::new(schedule, seq.roles())?,
            plan,
        })
    }

    pub fn with_extra_capture(mut self, extra: &CapturePlan) -> Self {
        self.plan.sub_block_layers.extend(&extra.sub_block_layers);
        self.plan.slice_layers.extend(&extra.slice_layers);
        self.plan.full_attention_layers.extend(&extra.full_attention_layers);
        self.plan.hidden_layers.extend(&extra.hidden_layers);
        self
    }

    pub fn into_report(self) -> PruningReport {
        self.scorer.report
    }
}

impl ForwardHooks for PruningHooks<'_> {
    fn plan(&self) -> CapturePlan {
        self.plan.clone()
    }

    fn decide(&mut self, point: DecisionPoint, state: &DecisionState<'_>) -> Result<Vec<usize>, HookError> {
        let DecisionPoint::AfterAttention { layer } = point else {
            return Ok(Vec::new());
        };
        let Some(stage) = self.scorer.next_stage() else {
            return Ok(Vec::new());
        };
        if self.scorer.schedule.decision_layer(stage) != layer {
            return Ok(Vec::new());
        }
        let live = state.live_image_tokens();
        let mut source = state.trace;
        let report = self.scorer.run_stage(&mut source, stage, &live)?;
        Ok(live.into_iter().filter(|t| !report.retained.contains(*t)).collect())
    }
}

/// Output of [`run_pruned_forward`].
#[derive(Debug, Clone)]
pub struct PrunedForward {
    pub output: ForwardOutput,
    pub report: PruningReport,
}

/// Runs the toy runtime with the schedule applied at its decision points.
pub fn run_pruned_forward(
    runtime: &Runtime,
    seq: &TokenSequence,
    schedule: &PruningSchedule,
) -> Result<PrunedForward, PruneError> {
    run_pruned_forward_with_capture(runtime, seq, schedule, &CapturePlan::default())
}

/// [`run_pruned_forward`] with additional captures recorded in the trace.
pub fn run_pruned_forward_with_capture(
    runtime: &Runtime,
    seq: &TokenSequence,
    schedule: &PruningSchedule,
    extra: &CapturePlan,
) -> Result<PrunedForward, PruneError> {
    schedule.validate(runtime.n_layers())?;
    let mut hooks = PruningHooks::new(schedule, seq)?.with_extra_capture(extra);
    let output = runtime
        .forward_with_hooks(seq, &mut hooks)
        .map_err(PruneError::from_runtime)?;
    let report = hooks.into_report();
    if report.stages.len() != schedule.stages() {
        return Err(PruneError::Config(format!(
            "only {} of {} stages ran",
            report.stages.len(),
            schedule.stages()
        )));
    }
    Ok(PrunedForward { output, report })
}

/// Every capture the schedule reads that `available` lacks.
pub fn missing_captures(
    available: &BTreeMap<usize, CaptureFlags>,
    schedule: &PruningSchedule,
) -> Vec<(usize, &'static str)> {
    let mut missing = Vec::new();
    if schedule.mode.uses_ttv() {
        for layer in schedule.all_ttv_layers() {
            let f = available.get(&layer).copied().unwrap_or_default();
            if !f.attention {
                missing.push((layer, "attention"));
            }
            if !f.ffn {
                missing.push((layer, "ffn"));
            }
        }
    }
    if schedule.mode.uses_iga() {
        for layer in schedule.decision_layers() {
            if !available.get(&layer).is_some_and(|f| f.attention_slice) {
                missing.push((layer, "attention_slice"));
            }
        }
    }
    missing.sort();
    missing
}

/// Scores a recorded trace offline with the same semantics as
/// [`run_pruned_forward`].
///
/// Stages whose recorded token population differs from the one the schedule
/// implies (for example an unpruned trace past the first cut) are marked
/// approximate.
pub fn replay_on_trace(
    source: &mut dyn LayerSource,
    schedule: &PruningSchedule,
) -> Result<PruningReport, PruneError> {
    schedule.validate(source.n_layers())?;
    let missing = missing_captures(&source.available(), schedule);
    if !missing.is_empty() {
        return Err(PruneError::incomplete(missing));
    }
    let roles = source.roles().to_vec();
    let mut scorer = StageScorer::new(schedule, &roles)?;
    for stage in 0..schedule.stages() {
        let live = scorer.live_at(schedule.decision_layer(stage), false).to_vec();
        scorer.run_stage(source, stage, &live)?;
    }
    Ok(scorer.report)
}
