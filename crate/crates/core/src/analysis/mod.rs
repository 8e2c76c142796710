//! Transition statistics, positional-bias histograms and ablation suites.

mod ablation;
mod bias;
mod transitions;

pub use ablation::{
    run_ablation, AblationRow, AblationSource, AblationSuite, AblationTable, Variant, ABLATION_CSV_HEADER,
    SUITE_NAMES,
};
pub use bias::{
    histogram_from_reports, AttentionProfile, BiasCriterion, BiasHistogram, SyntheticTraceSpec, BIAS_CSV_HEADER,
};
pub use transitions::{
    heatmap_svg, layer_summaries, layer_summaries_csv, transition_rows, transitions_csv, HeatValue, LayerSummary,
    TransitionRow, LAYER_SUMMARY_CSV_HEADER, TRANSITION_CSV_HEADER,
};
