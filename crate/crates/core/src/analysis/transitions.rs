use std::fmt::Write as _;

use crate::runtime::ActivationTrace;
use crate::transition::{capture_transitions, MetricError, SubBlock};

pub const TRANSITION_CSV_HEADER: &str = "layer,sub_block,token_index,magnitude,one_minus_abs_cos";
pub const LAYER_SUMMARY_CSV_HEADER: &str =
    "layer,sub_block,tokens,magnitude_mean,magnitude_std,magnitude_min,magnitude_max,one_minus_abs_cos_mean,one_minus_abs_cos_std";

/// Magnitude ratio and `1 - |cos|` of one token in one sub-block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionRow {
    pub layer: usize,
    pub sub_block: SubBlock,
    pub token_index: usize,
    pub magnitude: f64,
    pub one_minus_abs_cos: f64,
}

/// Per-token transitions of every captured sub-block, in layer order.
/// Zero-norm inputs are reported as a zero transition.
pub fn transition_rows(trace: &ActivationTrace) -> Result<Vec<TransitionRow>, MetricError> {
    let mut layers: Vec<_> = trace.layers.iter().collect();
    layers.sort_by_key(|c| c.layer);
    let mut rows = Vec::new();
    for c in layers {
        for (kind, cap) in [(SubBlock::Attention, &c.attention), (SubBlock::Ffn, &c.ffn)] {
            let Some(cap) = cap else { continue };
            for t in capture_transitions(cap)? {
                rows.push(TransitionRow {
                    layer: c.layer,
                    sub_block: kind,
                    token_index: t.token_index,
                    magnitude: t.magnitude,
                    one_minus_abs_cos: t.orthogonality(),
                });
            }
        }
    }
    Ok(rows)
}

pub fn transitions_csv(rows: &[TransitionRow]) -> String {
    let mut out = String::from(TRANSITION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.layer,
            r.sub_block.as_str(),
            r.token_index,
            r.magnitude,
            r.one_minus_abs_cos
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSummary {
    pub layer: usize,
    pub sub_block: SubBlock,
    pub tokens: usize,
    pub magnitude_mean: f64,
    pub magnitude_std: f64,
    pub magnitude_min: f64,
    pub magnitude_max: f64,
    pub orthogonality_mean: f64,
    pub orthogonality_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Population statistics per (layer, sub-block).
pub fn layer_summaries(rows: &[TransitionRow]) -> Vec<LayerSummary> {
    let mut groups: Vec<((usize, SubBlock), Vec<&TransitionRow>)> = Vec::new();
    for r in rows {
        let key = (r.layer, r.sub_block);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(r),
            None => groups.push((key, vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|((layer, sub_block), g)| {
            let m: Vec<f64> = g.iter().map(|r| r.magnitude).collect();
            let o: Vec<f64> = g.iter().map(|r| r.one_minus_abs_cos).collect();
            let (magnitude_mean, magnitude_std) = mean_std(&m);
            let (orthogonality_mean, orthogonality_std) = mean_std(&o);
            LayerSummary {
                layer,
                sub_block,
                tokens: g.len(),
                magnitude_mean,
                magnitude_std,
                magnitude_min: m.iter().copied().fold(f64::INFINITY, f64::min),
                magnitude_max: m.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                orthogonality_mean,
                orthogonality_std,
            }
        })
        .collect()
}

pub fn layer_summaries_csv(summaries: &[LayerSummary]) -> String {
    let mut out = String::from(LAYER_SUMMARY_CSV_HEADER);
    out.push('\n');
    for s in summaries {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.layer,
            s.sub_block.as_str(),
            s.tokens,
            s.magnitude_mean,
            s.magnitude_std,
            s.magnitude_min,
            s.magnitude_max,
            s.orthogonality_mean,
            s.orthogonality_std
        );
    }
    out
}

/// Quantity drawn by [`heatmap_svg`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatValue {
    Magnitude,
    OneMinusAbsCos,
}

/// Layer-by-token heatmap of one sub-block. Rows are layers (top = first),
/// columns are token indices; colour is scaled to the observed range.
pub fn heatmap_svg(rows: &[TransitionRow], sub_block: SubBlock, value: HeatValue) -> String {
    let cells: Vec<&TransitionRow> = rows.iter().filter(|r| r.sub_block == sub_block).collect();
    let mut layers: Vec<usize> = cells.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let mut tokens: Vec<usize> = cells.iter().map(|r| r.token_index).collect();
    tokens.sort_unstable();
    tokens.dedup();
    let pick = |r: &TransitionRow| match value {
        HeatValue::Magnitude => r.magnitude,
        HeatValue::OneMinusAbsCos => r.one_minus_abs_cos,
    };
    let lo = cells.iter().map(|r| pick(r)).fold(f64::INFINITY, f64::min);
    let hi = cells.iter().map(|r| pick(r)).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    const CELL: usize = 8;
    const MARGIN: usize = 40;
    let width = MARGIN + tokens.len() * CELL + 10;
    let height = MARGIN + layers.len() * CELL + 10;
    let label = match value {
        HeatValue::Magnitude => "magnitude",
        HeatValue::OneMinusAbsCos => "one_minus_abs_cos",
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="10">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="14">{} {label} [{lo:.4}, {hi:.4}]</text>"#,
        sub_block.as_str()
    );
    for (li, layer) in layers.iter().enumerate() {
        let y = MARGIN + li * CELL;
        let _ = writeln!(svg, r#"<text x="2" y="{}">L{layer}</text>"#, y + CELL);
        for r in cells.iter().filter(|r| r.layer == *layer) {
            let ti = tokens.binary_search(&r.token_index).expect("token listed");
            let t = ((pick(r) - lo) / span).clamp(0.0, 1.0);
            let shade = (255.0 * (1.0 - t)).round() as u8;
            let _ = writeln!(
                svg,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb(255,{shade},{shade})"/>"#,
                MARGIN + ti * CELL
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}
