use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PruneError;
use crate::runtime::HeadReduction;
use crate::transition::TtvVariant;

/// Which criteria feed the pruning score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Accumulated TTV combined with IGA.
    #[default]
    TtvAndIga,
    TtvOnly,
    IgaOnly,
    /// IGA combined with a TTV that keeps only the magnitude term.
    MagnitudeOnly,
    /// IGA combined with a TTV that keeps only the softmaxed direction term.
    DirectionOnly,
}

impl ScoreMode {
    pub fn uses_ttv(self) -> bool {
        self != ScoreMode::IgaOnly
    }

    pub fn uses_iga(self) -> bool {
        self != ScoreMode::TtvOnly
    }

    pub fn ttv_variant(self) -> TtvVariant {
        match self {
            ScoreMode::MagnitudeOnly => TtvVariant::MagnitudeOnly,
            ScoreMode::DirectionOnly => TtvVariant::DirectionOnly,
            _ => TtvVariant::Full,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreMode::TtvAndIga => "ttv_and_iga",
            ScoreMode::TtvOnly => "ttv_only",
            ScoreMode::IgaOnly => "iga_only",
            ScoreMode::MagnitudeOnly => "magnitude_only",
            ScoreMode::DirectionOnly => "direction_only",
        }
    }
}

impl std::str::FromStr for ScoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ttv_and_iga" => ScoreMode::TtvAndIga,
            "ttv_only" => ScoreMode::TtvOnly,
            "iga_only" => ScoreMode::IgaOnly,
            "magnitude_only" => ScoreMode::MagnitudeOnly,
            "direction_only" => ScoreMode::DirectionOnly,
            other => return Err(format!("unknown mode `{other}`")),
        })
    }
}

/// How TTV and IGA are rescaled before the convex combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by the sum over surviving image tokens.
    #[default]
    UnitSum,
    /// Combine raw values.
    None,
    /// Softmax over surviving image tokens.
    Softmax,
}

impl std::str::FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "unit_sum" => Normalization::UnitSum,
            "none" => Normalization::None,
            "softmax" => Normalization::Softmax,
            other => return Err(format!("unknown normalization `{other}`")),
        })
    }
}

fn default_true() -> bool {
    true
}

/// A staged pruning plan. Layers are numbered from 1.
///
/// At pruning layer `p`, tokens are scored with the TTV accumulated over the
/// accumulation layers `<= p` and with the IGA read from the attention
/// sub-block of layer `p + 1`; the cut happens right after that sub-block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningSchedule {
    pub accumulation_layers: Vec<usize>,
    pub pruning_layers: Vec<usize>,
    /// Fraction of the ORIGINAL image-token count kept after each stage.
    pub retained_ratios: Vec<f64>,
    pub alpha: f64,
    #[serde(default)]
    pub mode: ScoreMode,
    #[serde(default)]
    pub normalization: Normalization,
    /// When false, each stage uses only the TTV of its own pruning layer.
    #[serde(default = "default_true")]
    pub accumulate: bool,
    /// TTV is read from layer `a - accumulation_shift` for each accumulation
    /// layer `a`. A shift of 6 on layers 7..=12 moves the window to 1..=6
    /// while keeping the pruning layers.
    #[serde(default)]
    pub accumulation_shift: usize,
    #[serde(default)]
    pub head_reduction: HeadReduction,
}

pub const PRESET_NAMES: [&str; 2] = ["transprune-high", "transprune-low"];

impl PruningSchedule {
    fn standard_layout(ratios: Vec<f64>) -> Self {
        Self {
            accumulation_layers: (7..=12).collect(),
            pruning_layers: vec![7, 9, 12],
            retained_ratios: ratios,
            alpha: 0.5,
            mode: ScoreMode::TtvAndIga,
            normalization: Normalization::UnitSum,
            accumulate: true,
            accumulation_shift: 0,
            head_reduction: HeadReduction::Mean,
        }
    }

    /// 504 / 360 / 72 of 576 tokens.
    pub fn transprune_high() -> Self {
        Self::standard_layout(vec![0.875, 0.625, 0.125])
    }

    /// 360 / 108 / 36 of 576 tokens.
    pub fn transprune_low() -> Self {
        Self::standard_layout(vec![0.625, 0.1875, 0.0625])
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "transprune-high" => Some(Self::transprune_high()),
            "transprune-low" => Some(Self::transprune_low()),
            _ => None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, PruneError> {
        toml::from_str(text).map_err(|e| PruneError::Schedule(format!("schedule file: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schedule serializes")
    }

    pub fn load(path: &Path) -> Result<Self, PruneError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PruneError::Schedule(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn stages(&self) -> usize {
        self.pruning_layers.len()
    }

    /// Layers whose TTV feeds the score at stage `stage` (0-based), ascending.
    pub fn ttv_layers(&self, stage: usize) -> Vec<usize> {
        let p = self.pruning_layers[stage];
        if !self.accumulate {
            return vec![p - self.accumulation_shift];
        }
        self.accumulation_layers
            .iter()
            .filter(|&&a| a <= p)
            .map(|&a| a - self.accumulation_shift)
            .collect()
    }

    /// Every layer whose sub-block captures the schedule reads.
    pub fn all_ttv_layers(&self) -> BTreeSet<usize> {
        (0..self.stages()).flat_map(|s| self.ttv_layers(s)).collect()
    }

    /// Layer whose attention sub-block hosts the decision for stage `stage`.
    pub fn decision_layer(&self, stage: usize) -> usize {
        self.pruning_layers[stage] + 1
    }

    pub fn decision_layers(&self) -> BTreeSet<usize> {
        (0..self.stages()).map(|s| self.decision_layer(s)).collect()
    }

    /// Checks internal consistency and that every referenced layer exists in
    /// an `n_layers`-deep model.
    pub fn validate(&self, n_layers: usize) -> Result<(), PruneError> {
        let sched = |m: String| Err(PruneError::Schedule(m));
        if self.pruning_layers.is_empty() {
            return sched("no pruning layers".into());
        }
        if self.retained_ratios.len() != self.pruning_layers.len() {
            return sched(format!(
                "{} retained ratios for {} pruning layers",
                self.retained_ratios.len(),
                self.pruning_layers.len()
            ));
        }
        if let Some(r) = self.retained_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return sched(format!("retained ratio {r} outside (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return sched(format!("alpha {} outside [0, 1]", self.alpha));
        }
        let strictly_increasing = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !strictly_increasing(&self.pruning_layers) {
            return sched("pruning layers must be strictly increasing".into());
        }
        if !strictly_increasing(&self.accumulation_layers) {
            return sched("accumulation layers must be strictly increasing".into());
        }
        if self.mode.uses_ttv() {
            if let Some(p) = self
                .pruning_layers
                .iter()
                .find(|p| !self.accumulation_layers.contains(p))
            {
                return sched(format!("pruning layer {p} is not an accumulation layer"));
            }
        }
        if let Some(&min) = self.accumulation_layers.first() {
            if self.accumulation_shift >= min {
                return sched(format!(
                    "accumulation shift {} would move layer {min} below 1",
                    self.accumulation_shift
                ));
            }
        }
        if self.pruning_layers.first() == Some(&0) || self.accumulation_layers.first() == Some(&0) {
            return sched("layers are numbered from 1".into());
        }
        let deepest = self.decision_layers().into_iter().max().unwrap_or(0);
        let deepest_acc = self.accumulation_layers.last().copied().unwrap_or(0);
        if deepest > n_layers || deepest_acc > n_layers {
            return Err(PruneError::Config(format!(
                "schedule needs layer {} but the model has {n_layers} layers",
                deepest.max(deepest_acc)
            )));
        }
        Ok(())
    }

    /// Retained token count per stage for `original` image tokens.
    pub fn stage_counts(&self, original: usize) -> Vec<usize> {
        self.retained_ratios
            .iter()
            .map(|&r| retained_count(r, original))
            .collect()
    }
}

/// `ceil(ratio * original)`, robust to representation error in `ratio`
/// (0.3 * 10 is 3.0000000000000004 in binary).
pub fn retained_count(ratio: f64, original: usize) -> usize {
    let exact = ratio * original as f64;
    let nearest = exact.round();
    if (exact - nearest).abs() <= 1e-9 * exact.abs().max(1.0) {
        nearest as usize
    } else {
        exact.ceil() as usize
    }
}
