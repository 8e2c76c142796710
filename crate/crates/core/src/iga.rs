//! Instruction-guided attention: the attention mass each image token
//! receives from the instruction tokens, averaged over instruction rows.

use serde::{Deserialize, Serialize};

use crate::runtime::AttentionSlice;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IgaError {
    #[error("attention slice has no instruction rows")]
    MissingInstruction,
    #[error("attention slice has {rows} rows of width {cols} but {tokens} image tokens")]
    Shape { rows: usize, cols: usize, tokens: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgaVector {
    pub tokens: Vec<usize>,
    pub scores: Vec<f64>,
    /// Layer whose attention sub-block the slice was read from.
    pub layer: usize,
}

impl IgaVector {
    pub fn score_of(&self, token: usize) -> Option<f64> {
        self.tokens
            .iter()
            .position(|&t| t == token)
            .map(|i| self.scores[i])
    }
}

/// Column means of an `L x N_img` post-softmax slice.
pub fn iga(weights: &Matrix) -> Result<Vec<f64>, IgaError> {
    if weights.rows == 0 {
        return Err(IgaError::MissingInstruction);
    }
    let mut sums = vec![0.0; weights.cols];
    for row in weights.iter_rows() {
        for (s, w) in sums.iter_mut().zip(row) {
            *s += w;
        }
    }
    let l = weights.rows as f64;
    Ok(sums.into_iter().map(|s| s / l).collect())
}

pub fn iga_from_slice(slice: &AttentionSlice, layer: usize) -> Result<IgaVector, IgaError> {
    if slice.weights.cols != slice.image_tokens.len()
        || slice.weights.rows != slice.instruction_tokens.len()
    {
        return Err(IgaError::Shape {
            rows: slice.weights.rows,
            cols: slice.weights.cols,
            tokens: slice.image_tokens.len(),
        });
    }
    Ok(IgaVector {
        tokens: slice.image_tokens.clone(),
        scores: iga(&slice.weights)?,
        layer,
    })
}
