//! Independent reference implementations used as test oracles. Nothing here
//! calls the crate's scoring code; only data types and the runtime are shared.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ttvprune::runtime::{ActivationTrace, DType, LayerWeights, SubBlockCapture};
use ttvprune::{Matrix, Runtime, RuntimeConfig, TokenRole, TokenSequence};

pub fn toy(seed: u64, dtype: DType) -> Runtime {
    Runtime::new(RuntimeConfig::default().with_seed(seed).with_dtype(dtype)).expect("default config is valid")
}

pub fn toy_seq(n_image: usize, seed: u64) -> TokenSequence {
    TokenSequence::synthetic(4, n_image, 8, 256, seed).expect("valid layout")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// (magnitude, cosine) straight from the definitions.
pub fn transition(input: &[f64], output: &[f64]) -> (f64, f64) {
    let (ni, no) = (norm(input), norm(output));
    if no == 0.0 {
        return (0.0, 0.0);
    }
    (no / ni, (dot(input, output) / (ni * no)).clamp(-1.0, 1.0))
}

/// `softmax(1 - |cos|) * magnitude` per row.
pub fn ttv_rows(inputs: &[Vec<f64>], outputs: &[Vec<f64>]) -> Vec<f64> {
    let t: Vec<(f64, f64)> = inputs.iter().zip(outputs).map(|(i, o)| transition(i, o)).collect();
    let e: Vec<f64> = t.iter().map(|(_, c)| (1.0 - c.abs()).exp()).collect();
    let z: f64 = e.iter().sum();
    t.iter().zip(&e).map(|((m, _), e)| e / z * m).collect()
}

fn capture_rows(c: &SubBlockCapture, keep: &BTreeSet<usize>) -> (Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut toks = Vec::new();
    let mut ins = Vec::new();
    let mut outs = Vec::new();
    for (r, t) in c.tokens.iter().enumerate() {
        if keep.contains(t) {
            toks.push(*t);
            ins.push(c.input.row(r).to_vec());
            outs.push(c.output.row(r).to_vec());
        }
    }
    (toks, ins, outs)
}

/// Layer TTV over the image tokens alive at the end of the layer (those in
/// the FFN capture).
pub fn layer_ttv(trace: &ActivationTrace, layer: usize) -> BTreeMap<usize, f64> {
    let c = trace.layer(layer).expect("layer captured");
    let attn = c.attention.as_ref().expect("attention captured");
    let ffn = c.ffn.as_ref().expect("ffn captured");
    let alive: BTreeSet<usize> = ffn.tokens.iter().copied().collect();
    let mut out = BTreeMap::new();
    for cap in [attn, ffn] {
        let (toks, ins, outs) = capture_rows(cap, &alive);
        for (t, s) in toks.into_iter().zip(ttv_rows(&ins, &outs)) {
            *out.entry(t).or_insert(0.0) += s;
        }
    }
    out
}

/// Mean over instruction rows of the slice at `layer`, for `live` columns.
pub fn slice_iga(trace: &ActivationTrace, layer: usize, live: &[usize]) -> BTreeMap<usize, f64> {
    let s = trace.layer(layer).and_then(|c| c.attention_slice.as_ref()).expect("slice captured");
    live.iter()
        .map(|t| {
            let col = s.image_tokens.iter().position(|x| x == t).expect("live column");
            let sum: f64 = (0..s.weights.rows).map(|r| s.weights.get(r, col)).sum();
            (*t, sum / s.weights.rows as f64)
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Criterion {
    Both,
    TtvOnly,
    IgaOnly,
}

pub struct OracleSchedule {
    pub accumulation: Vec<usize>,
    pub pruning: Vec<usize>,
    pub ratios: Vec<f64>,
    pub alpha: f64,
    pub criterion: Criterion,
}

impl OracleSchedule {
    pub fn standard(ratios: &[f64], alpha: f64, criterion: Criterion) -> Self {
        Self {
            accumulation: (7..=12).collect(),
            pruning: vec![7, 9, 12],
            ratios: ratios.to_vec(),
            alpha,
            criterion,
        }
    }
}

fn unit_sum(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

/// Retained sets per stage, recomputed from a trace recorded during the
/// pruned run itself (so the token populations match).
pub fn brute_force_stages(trace: &ActivationTrace, s: &OracleSchedule) -> Vec<Vec<usize>> {
    let image: Vec<usize> = (0..trace.roles.len()).filter(|&i| trace.roles[i] == TokenRole::Image).collect();
    let n0 = image.len();
    let mut live = image;
    let mut out = Vec::new();
    for (stage, &p) in s.pruning.iter().enumerate() {
        let per_layer: Vec<BTreeMap<usize, f64>> = s
            .accumulation
            .iter()
            .filter(|&&a| a <= p)
            .map(|&a| layer_ttv(trace, a))
            .collect();
        let ttv: Vec<f64> = live.iter().map(|t| per_layer.iter().map(|m| m[t]).sum()).collect();
        let iga_map = slice_iga(trace, p + 1, &live);
        let iga: Vec<f64> = live.iter().map(|t| iga_map[t]).collect();
        let (tn, gn) = (unit_sum(&ttv), unit_sum(&iga));
        let score: Vec<f64> = match s.criterion {
            Criterion::Both => tn.iter().zip(&gn).map(|(a, b)| s.alpha * a + (1.0 - s.alpha) * b).collect(),
            Criterion::TtvOnly => tn,
            Criterion::IgaOnly => gn,
        };
        let k = (s.ratios[stage] * n0 as f64 - 1e-9).ceil() as usize;
        let mut idx: Vec<usize> = (0..live.len()).collect();
        idx.sort_by(|&a, &b| score[b].partial_cmp(&score[a]).unwrap().then(live[a].cmp(&live[b])));
        let mut kept: Vec<usize> = idx[..k].iter().map(|&i| live[i]).collect();
        kept.sort_unstable();
        out.push(kept.clone());
        live = kept;
    }
    out
}

fn rms_norm_rows(x: &Matrix, gain: &[f64]) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / x.cols as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = row[c] * inv * gain[c];
        }
    }
    out
}

fn project(x: &Matrix, w: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        for j in 0..w.cols {
            out.row_mut(i)[j] = (0..x.cols).map(|k| x.get(i, k) * w.get(k, j)).sum();
        }
    }
    out
}

/// Head-averaged causal attention probabilities recomputed from the
/// residual stream entering a layer.
pub fn naive_attention(hidden: &Matrix, w: &LayerWeights, heads: usize) -> Matrix {
    let x = rms_norm_rows(hidden, &w.attn_norm);
    let q = project(&x, &w.wq);
    let k = project(&x, &w.wk);
    let n = hidden.rows;
    let hd = hidden.cols / heads;
    let mut avg = Matrix::zeros(n, n);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let logits: Vec<f64> = (0..=i)
                .map(|j| {
                    let qi = &q.row(i)[cols.clone()];
                    let kj = &k.row(j)[cols.clone()];
                    dot(qi, kj) / (hd as f64).sqrt()
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, v) in e.iter().enumerate() {
                avg.row_mut(i)[j] += v / z / heads as f64;
            }
        }
    }
    avg
}
