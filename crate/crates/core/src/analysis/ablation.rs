use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::pruning::{replay_on_trace, run_pruned_forward, PruneError, PruningReport, PruningSchedule, ScoreMode};
use crate::runtime::{ActivationTrace, Runtime, TokenRole, TokenSequence};

pub const ABLATION_CSV_HEADER: &str =
    "suite,variant,reference,stage,samples,mean_overlap,min_overlap,mean_retained_score,mean_retained_position";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationSuite {
    /// Accumulated TTV against the pruning layer's TTV alone.
    Accumulation,
    /// Full TTV against magnitude-only and direction-only TTV, all with IGA.
    TtvComponents,
    /// Accumulation window 7..=12 against 1..=6, same pruning layers.
    LayerWindow,
    /// Alpha 0.4, 0.5, 0.6 plus the endpoints and their single criteria.
    Alpha,
}

pub const SUITE_NAMES: [&str; 4] = ["accumulation", "ttv-components", "layer-window", "alpha"];

impl AblationSuite {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationSuite::Accumulation => "accumulation",
            AblationSuite::TtvComponents => "ttv-components",
            AblationSuite::LayerWindow => "layer-window",
            AblationSuite::Alpha => "alpha",
        }
    }

    /// The variant grid derived from `base`.
    pub fn variants(self, base: &PruningSchedule) -> Vec<Variant> {
        let with = |name: &str, reference: usize, f: &dyn Fn(&mut PruningSchedule)| {
            let mut schedule = base.clone();
            f(&mut schedule);
            Variant { name: name.to_string(), schedule, reference }
        };
        match self {
            AblationSuite::Accumulation => vec![
                with("accumulate", 0, &|_| {}),
                with("no-accumulate", 0, &|s| s.accumulate = false),
            ],
            AblationSuite::TtvComponents => vec![
                with("iga+ttv", 0, &|s| s.mode = ScoreMode::TtvAndIga),
                with("iga+magnitude", 0, &|s| s.mode = ScoreMode::MagnitudeOnly),
                with("iga+direction", 0, &|s| s.mode = ScoreMode::DirectionOnly),
            ],
            AblationSuite::LayerWindow => {
                let shift = base.accumulation_layers.iter().min().map_or(0, |m| m - 1);
                vec![
                    with("window-base", 0, &|_| {}),
                    with("window-shallow", 0, &|s| s.accumulation_shift = shift),
                ]
            }
            AblationSuite::Alpha => vec![
                with("alpha=0.5", 0, &|s| s.alpha = 0.5),
                with("alpha=0.4", 0, &|s| s.alpha = 0.4),
                with("alpha=0.6", 0, &|s| s.alpha = 0.6),
                with("ttv_only", 3, &|s| s.mode = ScoreMode::TtvOnly),
                with("alpha=1.0", 3, &|s| s.alpha = 1.0),
                with("iga_only", 5, &|s| s.mode = ScoreMode::IgaOnly),
                with("alpha=0.0", 5, &|s| s.alpha = 0.0),
            ],
        }
    }
}

impl std::str::FromStr for AblationSuite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accumulation" => Ok(Self::Accumulation),
            "ttv-components" => Ok(Self::TtvComponents),
            "layer-window" => Ok(Self::LayerWindow),
            "alpha" => Ok(Self::Alpha),
            other => Err(format!("unknown suite `{other}` (one of {})", SUITE_NAMES.join(", "))),
        }
    }
}

/// One schedule of a suite, compared against `variants[reference]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub schedule: PruningSchedule,
    pub reference: usize,
}

/// Where the samples come from.
pub enum AblationSource<'a> {
    /// Live pruning on the toy runtime, one run per sequence.
    Toy { runtime: &'a Runtime, sequences: &'a [TokenSequence] },
    /// Offline replay on recorded traces.
    Traces(&'a [ActivationTrace]),
}

impl AblationSource<'_> {
    fn reports(&self, schedule: &PruningSchedule) -> Result<Vec<(Vec<TokenRole>, PruningReport)>, PruneError> {
        match self {
            AblationSource::Toy { runtime, sequences } => sequences
                .iter()
                .map(|seq| Ok((seq.roles().to_vec(), run_pruned_forward(runtime, seq, schedule)?.report)))
                .collect(),
            AblationSource::Traces(traces) => traces
                .iter()
                .map(|t| Ok((t.roles.clone(), replay_on_trace(&mut &*t, schedule)?)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub reference: String,
    pub stage: usize,
    pub samples: usize,
    /// Mean of `|A ∩ B| / max(|A|, |B|)` between the variant's and the
    /// reference's retained sets.
    pub mean_overlap: f64,
    pub min_overlap: f64,
    /// Mean combined score of the retained tokens.
    pub mean_retained_score: f64,
    /// Mean position of retained tokens within the image block, in [0, 1].
    pub mean_retained_position: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub rows: Vec<AblationRow>,
}

fn overlap(a: &[usize], b: &[usize]) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 1.0;
    }
    let common = a.iter().filter(|t| b.binary_search(t).is_ok()).count();
    common as f64 / denom as f64
}

/// Runs every variant of `suite` on `source` and tabulates per-stage
/// selection overlap and score statistics.
pub fn run_ablation(
    suite: AblationSuite,
    base: &PruningSchedule,
    source: &AblationSource<'_>,
) -> Result<AblationTable, PruneError> {
    let variants = suite.variants(base);
    let results: Vec<Vec<(Vec<TokenRole>, PruningReport)>> =
        variants.iter().map(|v| source.reports(&v.schedule)).collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (vi, v) in variants.iter().enumerate() {
        let runs = &results[vi];
        let refs = &results[v.reference];
        for stage in 0..v.schedule.stages() {
            let mut overlaps = Vec::new();
            let mut scores = Vec::new();
            let mut positions = Vec::new();
            for ((roles, report), (_, reference)) in runs.iter().zip(refs) {
                let st = &report.stages[stage];
                overlaps.push(overlap(&st.retained.tokens, &reference.stages[stage].retained.tokens));
                let image: Vec<usize> = (0..roles.len()).filter(|&i| roles[i] == TokenRole::Image).collect();
                let span = (image.len().max(2) - 1) as f64;
                for e in st.board.entries.iter().filter(|e| st.retained.contains(e.original_index)) {
                    scores.push(e.combined_score);
                    let pos = image.binary_search(&e.original_index).unwrap_or(0);
                    positions.push(pos as f64 / span);
                }
            }
            let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            rows.push(AblationRow {
                variant: v.name.clone(),
                reference: variants[v.reference].name.clone(),
                stage: stage + 1,
                samples: runs.len(),
                mean_overlap: mean(&overlaps),
                min_overlap: overlaps.iter().copied().fold(f64::INFINITY, f64::min),
                mean_retained_score: mean(&scores),
                mean_retained_position: mean(&positions),
            });
        }
    }
    Ok(AblationTable { suite, rows })
}

impl AblationTable {
    pub fn row(&self, variant: &str, stage: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.stage == stage)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.suite.as_str(),
                r.variant,
                r.reference,
                r.stage,
                r.samples,
                r.mean_overlap,
                r.min_overlap,
                r.mean_retained_score,
                r.mean_retained_position
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from(
            "| variant | reference | stage | samples | mean overlap | min overlap | mean retained score | mean retained position |\n|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.4} | {:.4} | {:.6} | {:.4} |",
                r.variant,
                r.reference,
                r.stage,
                r.samples,
                r.mean_overlap,
                r.min_overlap,
                r.mean_retained_score,
                r.mean_retained_position
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_fraction() {
        assert_eq!(overlap(&[1, 2, 3, 4], &[2, 4, 5, 6]), 0.5);
        assert_eq!(overlap(&[], &[]), 1.0);
    }

    #[test]
    fn window_shift_reaches_first_layer() {
        let v = AblationSuite::LayerWindow.variants(&PruningSchedule::transprune_high());
        assert_eq!(v[1].schedule.accumulation_shift, 6);
        assert_eq!(v[1].schedule.ttv_layers(0), vec![1]);
    }

    #[test]
    fn suite_names_parse() {
        for n in SUITE_NAMES {
            assert_eq!(n.parse::<AblationSuite>().unwrap().as_str(), n);
        }
        assert!("nope".parse::<AblationSuite>().is_err());
    }
}
