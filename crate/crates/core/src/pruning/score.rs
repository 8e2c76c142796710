use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{retained_count, Normalization, PruneError, ScoreMode};
use crate::iga::IgaVector;
use crate::transition::AccumulatedTtv;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub original_index: usize,
    /// Raw accumulated TTV; absent when the mode does not use TTV.
    pub accumulated_ttv: Option<f64>,
    /// Raw IGA; absent when the mode does not use IGA.
    pub iga: Option<f64>,
    pub combined_score: f64,
}

/// Scores of the surviving image tokens at one stage, ascending original index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScoreBoard {
    pub stage: usize,
    pub pruning_layer: usize,
    pub entries: Vec<TokenScore>,
}

impl TokenScoreBoard {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.original_index).collect()
    }
}

/// Original indices surviving a stage, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetainedSet {
    pub tokens: Vec<usize>,
}

impl RetainedSet {
    pub fn count(&self) -> usize {
        self.tokens.len()
    }

    pub fn contains(&self, token: usize) -> bool {
        self.tokens.binary_search(&token).is_ok()
    }
}

pub fn normalize(values: &[f64], how: Normalization) -> Vec<f64> {
    match how {
        Normalization::None => values.to_vec(),
        Normalization::UnitSum => {
            let sum: f64 = values.iter().sum();
            if sum > 0.0 {
                values.iter().map(|v| v / sum).collect()
            } else {
                vec![1.0 / values.len() as f64; values.len()]
            }
        }
        Normalization::Softmax => {
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            e.into_iter().map(|v| v / sum).collect()
        }
    }
}

/// Normalizes each criterion over the surviving tokens and forms
/// `alpha * ttv + (1 - alpha) * iga`. Single-criterion modes use the
/// normalized criterion alone.
pub fn combine_scores(
    ttv: Option<&AccumulatedTtv>,
    iga: Option<&IgaVector>,
    alpha: f64,
    mode: ScoreMode,
    normalization: Normalization,
) -> Result<Vec<TokenScore>, PruneError> {
    let need = |present: bool, what: &str| {
        if present {
            Ok(())
        } else {
            Err(PruneError::Alignment(format!("mode {} needs {what} scores", mode.as_str())))
        }
    };
    if mode.uses_ttv() {
        need(ttv.is_some(), "TTV")?;
    }
    if mode.uses_iga() {
        need(iga.is_some(), "IGA")?;
    }
    let ttv = ttv.filter(|_| mode.uses_ttv());
    let iga = iga.filter(|_| mode.uses_iga());

    // Canonical order: ascending original index.
    let tokens: Vec<usize> = match (ttv, iga) {
        (Some(t), _) => t.tokens().to_vec(),
        (None, Some(i)) => i.tokens.clone(),
        (None, None) => return Err(PruneError::Alignment("no criterion selected".into())),
    };
    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by_key(|&i| tokens[i]);
    let tokens: Vec<usize> = order.iter().map(|&i| tokens[i]).collect();
    if tokens.windows(2).any(|w| w[0] == w[1]) {
        return Err(PruneError::Alignment("duplicate token in score input".into()));
    }

    let ttv_raw = ttv.map(|t| {
        let s = t.scores();
        order.iter().map(|&i| s[i]).collect::<Vec<f64>>()
    });
    let iga_raw = match iga {
        Some(v) => {
            if v.tokens.len() != tokens.len() {
                return Err(PruneError::Alignment(format!(
                    "TTV covers {} tokens, IGA covers {}",
                    tokens.len(),
                    v.tokens.len()
                )));
            }
            let mut out = Vec::with_capacity(tokens.len());
            for t in &tokens {
                let s = v.score_of(*t).ok_or_else(|| {
                    PruneError::Alignment(format!("token {t} has TTV but no IGA score"))
                })?;
                out.push(s);
            }
            Some(out)
        }
        None => None,
    };

    let ttv_n = ttv_raw.as_deref().map(|v| normalize(v, normalization));
    let iga_n = iga_raw.as_deref().map(|v| normalize(v, normalization));
    let combined: Vec<f64> = match (&ttv_n, &iga_n) {
        (Some(t), Some(i)) => t
            .iter()
            .zip(i)
            .map(|(t, i)| alpha * t + (1.0 - alpha) * i)
            .collect(),
        (Some(t), None) => t.clone(),
        (None, Some(i)) => i.clone(),
        (None, None) => unreachable!(),
    };

    Ok(tokens
        .iter()
        .enumerate()
        .map(|(k, &t)| TokenScore {
            original_index: t,
            accumulated_ttv: ttv_raw.as_ref().map(|v| v[k]),
            iga: iga_raw.as_ref().map(|v| v[k]),
            combined_score: combined[k],
        })
        .collect())
}

/// Descending score, then ascending original index.
pub fn rank_order(a: &TokenScore, b: &TokenScore) -> Ordering {
    b.combined_score
        .total_cmp(&a.combined_score)
        .then(a.original_index.cmp(&b.original_index))
}

/// Keeps the top `ceil(ratio * original_count)` tokens of `board`.
pub fn select_survivors(
    board: &TokenScoreBoard,
    retained_ratio: f64,
    original_count: usize,
) -> Result<RetainedSet, PruneError> {
    if !(retained_ratio > 0.0 && retained_ratio <= 1.0) {
        return Err(PruneError::Schedule(format!(
            "retained ratio {retained_ratio} outside (0, 1]"
        )));
    }
    if board.is_empty() {
        return Err(PruneError::Schedule("no tokens to select from".into()));
    }
    let target = retained_count(retained_ratio, original_count);
    if target > board.len() {
        return Err(PruneError::Schedule(format!(
            "stage {} wants {target} tokens but only {} survive",
            board.stage,
            board.len()
        )));
    }
    let mut ranked: Vec<&TokenScore> = board.entries.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b));
    let kept: BTreeSet<usize> = ranked[..target].iter().map(|e| e.original_index).collect();
    Ok(RetainedSet {
        tokens: kept.into_iter().collect(),
    })
}
