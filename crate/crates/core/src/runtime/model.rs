use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ActivationTrace, AttentionSlice, CapturePlan, CaptureScope, DecisionPoint, DecisionState,
    ForwardHooks, HeadReduction, LayerCapture, RuntimeConfig, RuntimeError, SubBlockCapture,
    TokenRole, TokenSequence,
};
use crate::tensor::Matrix;

const NORM_EPS: f64 = 1e-6;

pub trait Scalar: Float + Send + Sync + std::fmt::Debug + 'static {
    fn of(x: f64) -> Self;
    fn widen(self) -> f64;
    fn le_bytes(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn widen(self) -> f64 {
        self as f64
    }
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn widen(self) -> f64 {
        self
    }
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Multiply-accumulate counters for one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCount {
    /// Matrix-product MACs inside transformer blocks.
    pub block_macs: u64,
    /// Element operations spent in the two per-layer RMS norms.
    pub norm_ops: u64,
    /// Final norm plus LM-head MACs.
    pub head_macs: u64,
}

impl OpCount {
    /// Block cost: matrix products plus in-block norms, head excluded.
    pub fn block_total(&self) -> u64 {
        self.block_macs + self.norm_ops
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerParams<T> {
    pub attn_norm: Vec<T>,
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub wo: Vec<T>,
    pub ffn_norm: Vec<T>,
    pub w_gate: Vec<T>,
    pub w_up: Vec<T>,
    pub w_down: Vec<T>,
}

/// Weights of one dtype. Every tensor is row-major `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Model<T> {
    pub cfg: RuntimeConfig,
    pub embed: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Vec<T>,
}

/// Weight generator: ChaCha8 seeded with `seed`; every parameter drawn in a
/// fixed order as `u = 2 * gen::<f64>() - 1`. Projections use `u * sqrt(3 / fan_in)`
/// (unit-variance outputs), embeddings use `u`, norm gains use `1 + 0.1 u`.
fn generate(cfg: &RuntimeConfig) -> Model<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |n: usize, scale: f64, offset: f64| -> Vec<f64> {
        (0..n)
            .map(|_| offset + scale * (2.0 * rng.gen::<f64>() - 1.0))
            .collect()
    };
    let d = cfg.d_model;
    let m = cfg.d_ffn;
    let proj = |fan_in: usize| (3.0 / fan_in as f64).sqrt();
    let embed = draw(cfg.vocab_size * d, 1.0, 0.0);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            attn_norm: draw(d, 0.1, 1.0),
            wq: draw(d * d, proj(d), 0.0),
            wk: draw(d * d, proj(d), 0.0),
            wv: draw(d * d, proj(d), 0.0),
            wo: draw(d * d, proj(d), 0.0),
            ffn_norm: draw(d, 0.1, 1.0),
            w_gate: draw(d * m, proj(d), 0.0),
            w_up: draw(d * m, proj(d), 0.0),
            w_down: draw(m * d, proj(m), 0.0),
        })
        .collect();
    let final_norm = draw(d, 0.1, 1.0);
    let lm_head = draw(d * cfg.vocab_size, proj(d), 0.0);
    Model {
        cfg: cfg.clone(),
        embed,
        layers,
        final_norm,
        lm_head,
    }
}

fn cast<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &RuntimeConfig) -> Self {
        let w = generate(cfg);
        Model {
            cfg: w.cfg,
            embed: cast(&w.embed),
            layers: w
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: cast(&l.attn_norm),
                    wq: cast(&l.wq),
                    wk: cast(&l.wk),
                    wv: cast(&l.wv),
                    wo: cast(&l.wo),
                    ffn_norm: cast(&l.ffn_norm),
                    w_gate: cast(&l.w_gate),
                    w_up: cast(&l.w_up),
                    w_down: cast(&l.w_down),
                })
                .collect(),
            final_norm: cast(&w.final_norm),
            lm_head: cast(&w.lm_head),
        }
    }

    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut push = |v: &[T]| v.iter().for_each(|&x| x.le_bytes(&mut out));
        push(&self.embed);
        for l in &self.layers {
            for t in [
                &l.attn_norm, &l.wq, &l.wk, &l.wv, &l.wo, &l.ffn_norm, &l.w_gate, &l.w_up,
                &l.w_down,
            ] {
                push(t);
            }
        }
        push(&self.final_norm);
        push(&self.lm_head);
        out
    }

    /// Token embedding plus a sinusoidal encoding of the (preserved) position index.
    fn embed(&self, seq: &TokenSequence) -> Result<Vec<T>, RuntimeError> {
        let d = self.cfg.d_model;
        let mut x = Vec::with_capacity(seq.len() * d);
        for (&tok, &pos) in seq.tokens().iter().zip(seq.positions()) {
            let tok = tok as usize;
            if tok >= self.cfg.vocab_size {
                return Err(RuntimeError::InvalidSequence(format!(
                    "token id {tok} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
            let row = &self.embed[tok * d..(tok + 1) * d];
            for (j, &e) in row.iter().enumerate() {
                let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
                let angle = pos as f64 * freq;
                let pe = if j % 2 == 0 { angle.sin() } else { angle.cos() };
                x.push(e + T::of(pe));
            }
        }
        Ok(x)
    }
}

fn matmul<T: Scalar>(x: &[T], n: usize, k: usize, w: &[T], m: usize, ops: &mut u64) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let oi = &mut out[i * m..(i + 1) * m];
        for (p, &a) in xi.iter().enumerate() {
            let wp = &w[p * m..(p + 1) * m];
            for (o, &b) in oi.iter_mut().zip(wp) {
                *o = *o + a * b;
            }
        }
    }
    *ops += (n * k * m) as u64;
    out
}

fn rms_norm<T: Scalar>(x: &[T], n: usize, d: usize, gain: &[T], ops: &mut u64) -> Vec<T> {
    let mut out = vec![T::zero(); n * d];
    let eps = T::of(NORM_EPS);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = row.iter().fold(T::zero(), |acc, &v| acc + v * v) / T::of(d as f64);
        let inv = (ms + eps).sqrt().recip();
        for (j, o) in out[i * d..(i + 1) * d].iter_mut().enumerate() {
            *o = row[j] * inv * gain[j];
        }
    }
    *ops += (n * d) as u64;
    out
}

fn to_matrix<T: Scalar>(x: &[T], rows: &[usize], d: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend(x[r * d..(r + 1) * d].iter().map(|v| v.widen()));
    }
    Matrix::from_vec(rows.len(), d, data)
}

fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Mutable state of one pass: hidden rows aligned with `live` (original indices).
pub(crate) struct PassState<T> {
    hidden: Vec<T>,
    live: Vec<usize>,
}

impl<T: Scalar> PassState<T> {
    fn remove(&mut self, drop: &[usize], roles: &[TokenRole], d: usize) -> Result<(), RuntimeError> {
        if drop.is_empty() {
            return Ok(());
        }
        for &t in drop {
            if t >= roles.len() || roles[t] != TokenRole::Image {
                return Err(RuntimeError::ContractViolation(format!(
                    "hook tried to remove token {t}, which is not an image token"
                )));
            }
            if !self.live.contains(&t) {
                return Err(RuntimeError::ContractViolation(format!(
                    "hook tried to remove token {t}, which is no longer live"
                )));
            }
        }
        let mut hidden = Vec::with_capacity(self.hidden.len());
        let mut live = Vec::with_capacity(self.live.len());
        for (row, &t) in self.live.iter().enumerate() {
            if !drop.contains(&t) {
                live.push(t);
                hidden.extend_from_slice(&self.hidden[row * d..(row + 1) * d]);
            }
        }
        self.hidden = hidden;
        self.live = live;
        Ok(())
    }
}

pub(crate) struct PassOutput {
    pub logits: Matrix,
    pub tokens: Vec<usize>,
    pub trace: ActivationTrace,
    pub ops: OpCount,
}

impl<T: Scalar> Model<T> {
    /// Runs layers `start..=n_layers` then the head. `hidden` rows align with `live`.
    pub fn run(
        &self,
        roles: &[TokenRole],
        mut state: PassState<T>,
        start: usize,
        hooks: Option<&mut dyn ForwardHooks>,
    ) -> Result<PassOutput, RuntimeError> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let plan = hooks.as_ref().map(|h| h.plan()).unwrap_or_default();
        let mut hooks = hooks;
        let mut ops = OpCount::default();
        let mut trace = ActivationTrace::new(
            "toy-transformer",
            cfg.n_layers,
            d,
            cfg.n_heads,
            roles.to_vec(),
        );

        for layer in start..=cfg.n_layers {
            let params = &self.layers[layer - 1];
            let mut capture = LayerCapture::empty(layer, state.live.clone());
            if plan.hidden_layers.contains(&layer) {
                let rows: Vec<usize> = (0..state.live.len()).collect();
                capture.hidden_in = Some(to_matrix(&state.hidden, &rows, d));
            }

            let attn_out = self.attention(params, roles, &state, &plan, layer, &mut capture, &mut ops);
            for (h, a) in state.hidden.iter_mut().zip(&attn_out) {
                *h = *h + *a;
            }
            trace.layers.push(capture);

            if let Some(h) = hooks.as_deref_mut() {
                let point = DecisionPoint::AfterAttention { layer };
                let drop = decide(h, point, &state.live, roles, &trace)?;
                state.remove(&drop, roles, d)?;
            }

            let ffn_out = {
                let capture = trace.layers.last_mut().expect("pushed above");
                self.ffn(params, roles, &state, &plan, layer, capture, &mut ops)
            };
            for (h, a) in state.hidden.iter_mut().zip(&ffn_out) {
                *h = *h + *a;
            }

            if let Some(h) = hooks.as_deref_mut() {
                let point = DecisionPoint::AfterLayer { layer };
                let drop = decide(h, point, &state.live, roles, &trace)?;
                state.remove(&drop, roles, d)?;
            }
        }

        let n = state.live.len();
        let mut head_ops = 0u64;
        let normed = rms_norm(&state.hidden, n, d, &self.final_norm, &mut head_ops);
        let logits = matmul(&normed, n, d, &self.lm_head, cfg.vocab_size, &mut head_ops);
        ops.head_macs = head_ops;
        let all_rows: Vec<usize> = (0..n).collect();
        Ok(PassOutput {
            logits: to_matrix(&logits, &all_rows, cfg.vocab_size),
            tokens: state.live,
            trace,
            ops,
        })
    }

    fn capture_rows(&self, roles: &[TokenRole], live: &[usize], scope: CaptureScope) -> Vec<usize> {
        (0..live.len())
            .filter(|&r| scope == CaptureScope::AllTokens || roles[live[r]] == TokenRole::Image)
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        p: &LayerParams<T>,
        roles: &[TokenRole],
        state: &PassState<T>,
        plan: &CapturePlan,
        layer: usize,
        capture: &mut LayerCapture,
        ops: &mut OpCount,
    ) -> Vec<T> {
        let cfg = &self.cfg;
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        let hd = cfg.head_dim();
        let n = state.live.len();
        let x = rms_norm(&state.hidden, n, d, &p.attn_norm, &mut ops.norm_ops);
        let q = matmul(&x, n, d, &p.wq, d, &mut ops.block_macs);
        let k = matmul(&x, n, d, &p.wk, d, &mut ops.block_macs);
        let v = matmul(&x, n, d, &p.wv, d, &mut ops.block_macs);

        let want_slice = plan.slice_layers.contains(&layer);
        let want_full = plan.full_attention_layers.contains(&layer);
        // probs[h][i * n + j], kept only when something is captured from it
        let mut kept_probs: Vec<Vec<T>> = Vec::new();
        let mut ctx = vec![T::zero(); n * d];
        let scale = T::of(1.0 / (hd as f64).sqrt());
        for h in 0..heads {
            let off = h * hd;
            let mut probs = vec![T::zero(); n * n];
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + hd];
                let row = &mut probs[i * n..(i + 1) * n];
                // Full score row is computed; the causal mask is applied afterwards.
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k[j * d + off..j * d + off + hd];
                    let dot = qi.iter().zip(kj).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                    *s = if j <= i { dot * scale } else { T::neg_infinity() };
                }
                let max = row[..=i].iter().fold(T::neg_infinity(), |m, &s| m.max(s));
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                }
                for s in row.iter_mut() {
                    *s = *s / sum;
                }
            }
            for i in 0..n {
                let prow = &probs[i * n..(i + 1) * n];
                let crow = &mut ctx[i * d + off..i * d + off + hd];
                for (j, &pij) in prow.iter().enumerate() {
                    let vj = &v[j * d + off..j * d + off + hd];
                    for (c, &vv) in crow.iter_mut().zip(vj) {
                        *c = *c + pij * vv;
                    }
                }
            }
            ops.block_macs += (2 * n * n * hd) as u64;
            if want_slice || want_full {
                kept_probs.push(probs);
            }
        }
        let out = matmul(&ctx, n, d, &p.wo, d, &mut ops.block_macs);

        if plan.sub_block_layers.contains(&layer) {
            let rows = self.capture_rows(roles, &state.live, plan.scope);
            capture.attention = Some(SubBlockCapture {
                tokens: rows.iter().map(|&r| state.live[r]).collect(),
                input: to_matrix(&x, &rows, d),
                output: to_matrix(&out, &rows, d),
            });
        }
        if want_slice || want_full {
            // Reduced in the model dtype so captured values widen exactly.
            let reduce = |i: usize, j: usize| -> f64 {
                let vals = kept_probs.iter().map(|p| p[i * n + j]);
                match plan.head_reduction {
                    HeadReduction::Mean => (vals.fold(T::zero(), |a, v| a + v) / T::of(heads as f64)).widen(),
                    HeadReduction::Max => vals.fold(T::zero(), |a, v| a.max(v)).widen(),
                }
            };
            if want_slice {
                let instr: Vec<usize> = (0..n)
                    .filter(|&r| roles[state.live[r]] == TokenRole::Instruction)
                    .collect();
                let image: Vec<usize> = (0..n)
                    .filter(|&r| roles[state.live[r]] == TokenRole::Image)
                    .collect();
                let mut data = Vec::with_capacity(instr.len() * image.len());
                for &i in &instr {
                    data.extend(image.iter().map(|&j| reduce(i, j)));
                }
                capture.attention_slice = Some(AttentionSlice {
                    instruction_tokens: instr.iter().map(|&r| state.live[r]).collect(),
                    image_tokens: image.iter().map(|&r| state.live[r]).collect(),
                    weights: Matrix::from_vec(instr.len(), image.len(), data),
                    reduction: plan.head_reduction,
                });
            }
            if want_full {
                let mut data = Vec::with_capacity(n * n);
                for i in 0..n {
                    data.extend((0..n).map(|j| reduce(i, j)));
                }
                capture.full_attention = Some(Matrix::from_vec(n, n, data));
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn ffn(
        &self,
        p: &LayerParams<T>,
        roles: &[TokenRole],
        state: &PassState<T>,
        plan: &CapturePlan,
        layer: usize,
        capture: &mut LayerCapture,
        ops: &mut OpCount,
    ) -> Vec<T> {
        let (d, m) = (self.cfg.d_model, self.cfg.d_ffn);
        let n = state.live.len();
        let x = rms_norm(&state.hidden, n, d, &p.ffn_norm, &mut ops.norm_ops);
        let gate = matmul(&x, n, d, &p.w_gate, m, &mut ops.block_macs);
        let up = matmul(&x, n, d, &p.w_up, m, &mut ops.block_macs);
        let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
        let out = matmul(&act, n, m, &p.w_down, d, &mut ops.block_macs);
        if plan.sub_block_layers.contains(&layer) {
            let rows = self.capture_rows(roles, &state.live, plan.scope);
            capture.ffn = Some(SubBlockCapture {
                tokens: rows.iter().map(|&r| state.live[r]).collect(),
                input: to_matrix(&x, &rows, d),
                output: to_matrix(&out, &rows, d),
            });
        }
        out
    }
}

fn decide(
    hooks: &mut dyn ForwardHooks,
    point: DecisionPoint,
    live: &[usize],
    roles: &[TokenRole],
    trace: &ActivationTrace,
) -> Result<Vec<usize>, RuntimeError> {
    let state = DecisionState {
        live_tokens: live,
        roles,
        trace,
    };
    let mut drop = hooks.decide(point, &state).map_err(RuntimeError::Hook)?;
    drop.sort_unstable();
    drop.dedup();
    Ok(drop)
}

impl<T: Scalar> Model<T> {
    pub fn start_state(&self, seq: &TokenSequence) -> Result<PassState<T>, RuntimeError> {
        Ok(PassState {
            hidden: self.embed(seq)?,
            live: (0..seq.len()).collect(),
        })
    }

    pub fn resume_state(&self, hidden: &Matrix, live: Vec<usize>) -> PassState<T> {
        PassState {
            hidden: hidden.data.iter().map(|&x| T::of(x)).collect(),
            live,
        }
    }
}
