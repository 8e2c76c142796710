use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::pruning::{replay_on_trace, PruneError, PruningSchedule, ScoreMode};
use crate::runtime::{ActivationTrace, AttentionSlice, LayerCapture, SubBlockCapture, TokenRole};
use crate::tensor::Matrix;

pub const BIAS_CSV_HEADER: &str = "position,original_index,retained_count,sample_count,frequency,band_low,band_high";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasCriterion {
    Ttv,
    Iga,
    Combined,
}

impl BiasCriterion {
    pub fn mode(self) -> ScoreMode {
        match self {
            BiasCriterion::Ttv => ScoreMode::TtvOnly,
            BiasCriterion::Iga => ScoreMode::IgaOnly,
            BiasCriterion::Combined => ScoreMode::TtvAndIga,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BiasCriterion::Ttv => "ttv",
            BiasCriterion::Iga => "iga",
            BiasCriterion::Combined => "combined",
        }
    }

    /// `schedule` with its scoring mode replaced by this criterion.
    pub fn apply(self, schedule: &PruningSchedule) -> PruningSchedule {
        PruningSchedule { mode: self.mode(), ..schedule.clone() }
    }
}

impl std::str::FromStr for BiasCriterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ttv" => Ok(Self::Ttv),
            "iga" => Ok(Self::Iga),
            "combined" => Ok(Self::Combined),
            other => Err(format!("unknown criterion `{other}` (ttv, iga or combined)")),
        }
    }
}

/// Retain frequency per image position over a sample set.
///
/// Position `i` is the `i`-th image token of the sequence; `first_index`
/// is the original index of position 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasHistogram {
    pub criterion: BiasCriterion,
    pub first_index: usize,
    pub counts: Vec<usize>,
    pub bins: Vec<f64>,
    pub sample_count: usize,
    /// Tokens kept per sample by the final stage.
    pub retained_per_sample: usize,
}

impl BiasHistogram {
    /// Builds the histogram from final retained sets given as original indices.
    pub fn from_retained(
        criterion: BiasCriterion,
        first_index: usize,
        n_positions: usize,
        retained: &[Vec<usize>],
    ) -> Result<Self, PruneError> {
        if retained.is_empty() {
            return Err(PruneError::Config("bias statistics need at least one sample".into()));
        }
        let mut counts = vec![0usize; n_positions];
        for set in retained {
            if set.len() != retained[0].len() {
                return Err(PruneError::Config("samples retain different token counts".into()));
            }
            for &t in set {
                let pos = t
                    .checked_sub(first_index)
                    .filter(|&p| p < n_positions)
                    .ok_or_else(|| PruneError::Config(format!("token {t} outside the image block")))?;
                counts[pos] += 1;
            }
        }
        let n = retained.len();
        Ok(Self {
            criterion,
            first_index,
            bins: counts.iter().map(|&c| c as f64 / n as f64).collect(),
            counts,
            sample_count: n,
            retained_per_sample: retained[0].len(),
        })
    }

    /// Retain rate every position would share if selection ignored position.
    pub fn uniform_rate(&self) -> f64 {
        self.retained_per_sample as f64 / self.counts.len() as f64
    }

    /// `uniform_rate ± k` binomial standard deviations of a frequency.
    pub fn null_band(&self, k_sigma: f64) -> (f64, f64) {
        let p = self.uniform_rate();
        let sd = (p * (1.0 - p) / self.sample_count as f64).sqrt();
        (p - k_sigma * sd, p + k_sigma * sd)
    }

    pub fn max_deviation(&self) -> f64 {
        let p = self.uniform_rate();
        self.bins.iter().map(|b| (b - p).abs()).fold(0.0, f64::max)
    }

    /// Positions whose frequency leaves the `k`-sigma null band.
    pub fn outside_band(&self, k_sigma: f64) -> Vec<usize> {
        let (lo, hi) = self.null_band(k_sigma);
        (0..self.bins.len()).filter(|&i| self.bins[i] < lo || self.bins[i] > hi).collect()
    }

    /// Mean frequency of the outer `edge` positions on each side over the
    /// mean frequency of the rest.
    pub fn edge_ratio(&self, edge: usize) -> f64 {
        let n = self.bins.len();
        let edge = edge.min(n / 2);
        let ends: Vec<f64> = self.bins[..edge].iter().chain(&self.bins[n - edge..]).copied().collect();
        let middle = &self.bins[edge..n - edge];
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        mean(&ends) / mean(middle).max(f64::MIN_POSITIVE)
    }

    /// Bar chart of the frequencies with the `k`-sigma null band drawn as lines.
    pub fn to_svg(&self, k_sigma: f64) -> String {
        const W: f64 = 640.0;
        const H: f64 = 240.0;
        const PAD: f64 = 30.0;
        let n = self.bins.len().max(1) as f64;
        let (lo, hi) = self.null_band(k_sigma);
        let top = self.bins.iter().copied().fold(hi, f64::max).max(1e-12);
        let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / top;
        let bar = (W - 2.0 * PAD) / n;
        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="monospace" font-size="10">"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{PAD}" y="14">{} retain frequency, {} samples</text>"#,
            self.criterion.as_str(),
            self.sample_count
        );
        for (i, &b) in self.bins.iter().enumerate() {
            let x = PAD + i as f64 * bar;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="steelblue"/>"#,
                y(b),
                (bar - 1.0).max(0.5),
                (H - PAD) - y(b)
            );
        }
        for v in [lo, hi] {
            let _ = writeln!(
                svg,
                r#"<line x1="{PAD}" x2="{:.2}" y1="{:.2}" y2="{:.2}" stroke="crimson" stroke-dasharray="4 2"/>"#,
                W - PAD,
                y(v),
                y(v)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn to_csv(&self, k_sigma: f64) -> String {
        let (lo, hi) = self.null_band(k_sigma);
        let mut out = String::from(BIAS_CSV_HEADER);
        out.push('\n');
        for (i, (&c, &f)) in self.counts.iter().zip(&self.bins).enumerate() {
            let _ = writeln!(out, "{i},{},{c},{},{f},{lo},{hi}", self.first_index + i, self.sample_count);
        }
        out
    }
}

/// Attention pattern of the instruction rows over the image block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AttentionProfile {
    /// Weights are part of the token content and move with it.
    Content,
    /// Weights grow toward both ends of the image block by up to
    /// `1 + strength`, independent of content.
    EndHeavy { strength: f64 },
}

/// Generator for synthetic traces whose image-token content is a random
/// permutation of a fixed pool. Any positional preference of a criterion
/// shows up as a non-uniform retain histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTraceSpec {
    pub n_system: usize,
    pub n_image: usize,
    pub n_instruction: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub profile: AttentionProfile,
    /// Seed of the content pool shared by every sample.
    pub pool_seed: u64,
}

impl Default for SyntheticTraceSpec {
    fn default() -> Self {
        Self {
            n_system: 4,
            n_image: 32,
            n_instruction: 8,
            n_layers: 14,
            d_model: 16,
            profile: AttentionProfile::Content,
            pool_seed: 0,
        }
    }
}

/// Per-token content: sub-block input/output rows per layer plus raw
/// attention affinities per instruction row.
struct TokenContent {
    attention: Vec<(Vec<f64>, Vec<f64>)>,
    ffn: Vec<(Vec<f64>, Vec<f64>)>,
    affinity: Vec<f64>,
}

impl SyntheticTraceSpec {
    fn first_image(&self) -> usize {
        self.n_system
    }

    fn roles(&self) -> Vec<TokenRole> {
        let mut roles = vec![TokenRole::System; self.n_system];
        roles.extend(vec![TokenRole::Image; self.n_image]);
        roles.extend(vec![TokenRole::Instruction; self.n_instruction]);
        roles
    }

    fn pool(&self) -> Vec<TokenContent> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.pool_seed);
        let d = self.d_model;
        let vector = |rng: &mut ChaCha8Rng, scale: f64| -> Vec<f64> {
            (0..d).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect()
        };
        (0..self.n_image)
            .map(|_| {
                let pair = |rng: &mut ChaCha8Rng| {
                    let input = vector(rng, 1.0);
                    let scale = 0.2 + 1.8 * rng.gen::<f64>();
                    (input, vector(rng, scale))
                };
                TokenContent {
                    attention: (0..self.n_layers).map(|_| pair(&mut rng)).collect(),
                    ffn: (0..self.n_layers).map(|_| pair(&mut rng)).collect(),
                    affinity: (0..self.n_instruction).map(|_| 0.1 + rng.gen::<f64>()).collect(),
                }
            })
            .collect()
    }

    fn position_weight(&self, pos: usize) -> f64 {
        match self.profile {
            AttentionProfile::Content => 1.0,
            AttentionProfile::EndHeavy { strength } => {
                let n = self.n_image.max(2) - 1;
                let x = 2.0 * pos as f64 / n as f64 - 1.0;
                1.0 + strength * x.powi(4)
            }
        }
    }

    /// Builds one fully captured, unpruned trace with image content
    /// permuted by `sample_seed`.
    pub fn sample(&self, sample_seed: u64) -> ActivationTrace {
        self.sample_from_pool(&self.pool(), sample_seed)
    }

    fn sample_from_pool(&self, pool: &[TokenContent], sample_seed: u64) -> ActivationTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let mut perm: Vec<usize> = (0..self.n_image).collect();
        perm.shuffle(&mut rng);
        let image: Vec<usize> = (self.first_image()..self.first_image() + self.n_image).collect();
        let instr_start = self.first_image() + self.n_image;
        let instruction: Vec<usize> = (instr_start..instr_start + self.n_instruction).collect();
        let all: Vec<usize> = (0..instr_start + self.n_instruction).collect();

        let mut trace = ActivationTrace::new("synthetic", self.n_layers, self.d_model, 1, self.roles());
        for l in 0..self.n_layers {
            let sub = |pick: &dyn Fn(&TokenContent) -> &(Vec<f64>, Vec<f64>)| {
                let rows: Vec<&(Vec<f64>, Vec<f64>)> = perm.iter().map(|&c| pick(&pool[c])).collect();
                SubBlockCapture {
                    tokens: image.clone(),
                    input: Matrix::from_rows(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>()),
                    output: Matrix::from_rows(&rows.iter().map(|r| r.1.clone()).collect::<Vec<_>>()),
                }
            };
            let mut weights = Matrix::zeros(self.n_instruction, self.n_image);
            for q in 0..self.n_instruction {
                let raw: Vec<f64> = perm
                    .iter()
                    .enumerate()
                    .map(|(pos, &c)| pool[c].affinity[q] * self.position_weight(pos))
                    .collect();
                // Image keys take half of each row's attention mass.
                let sum: f64 = raw.iter().sum();
                for (j, v) in raw.into_iter().enumerate() {
                    weights.row_mut(q)[j] = 0.5 * v / sum;
                }
            }
            let mut c = LayerCapture::empty(l + 1, all.clone());
            c.attention = Some(sub(&|t| &t.attention[l]));
            c.ffn = Some(sub(&|t| &t.ffn[l]));
            c.attention_slice = Some(AttentionSlice {
                instruction_tokens: instruction.clone(),
                image_tokens: image.clone(),
                weights,
                reduction: Default::default(),
            });
            trace.layers.push(c);
        }
        trace
    }

    /// Replays `schedule` under `criterion` on `samples` permuted traces
    /// (seeds `seed, seed + 1, ...`) and histograms the final retained sets.
    pub fn bias_histogram(
        &self,
        schedule: &PruningSchedule,
        criterion: BiasCriterion,
        samples: usize,
        seed: u64,
    ) -> Result<BiasHistogram, PruneError> {
        let schedule = criterion.apply(schedule);
        let pool = self.pool();
        let mut retained = Vec::with_capacity(samples);
        for s in 0..samples as u64 {
            let trace = self.sample_from_pool(&pool, seed.wrapping_add(s));
            let report = replay_on_trace(&mut &trace, &schedule)?;
            let kept = report.final_retained().map(|r| r.tokens.clone()).unwrap_or_default();
            retained.push(kept);
        }
        BiasHistogram::from_retained(criterion, self.first_image(), self.n_image, &retained)
    }
}

/// Histogram of final retained sets from already-computed pruning reports.
pub fn histogram_from_reports(
    criterion: BiasCriterion,
    roles: &[TokenRole],
    reports: &[crate::pruning::PruningReport],
) -> Result<BiasHistogram, PruneError> {
    let image: Vec<usize> = (0..roles.len()).filter(|&i| roles[i] == TokenRole::Image).collect();
    let first = *image.first().ok_or_else(|| PruneError::Config("no image tokens".into()))?;
    let retained: Vec<Vec<usize>> = reports
        .iter()
        .map(|r| r.final_retained().map(|s| s.tokens.clone()).unwrap_or_default())
        .collect();
    BiasHistogram::from_retained(criterion, first, image.len(), &retained)
}
