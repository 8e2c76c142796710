use serde::{Deserialize, Serialize};

use super::RuntimeError;

/// Floating-point type the toy runtime computes in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Float32,
    Float64,
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "float32" | "f32" => Ok(DType::Float32),
            "float64" | "f64" => Ok(DType::Float64),
            other => Err(format!("unknown dtype `{other}` (expected float32 or float64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for RuntimeConfig {
    /// 14 layers is the shallowest stack that hosts accumulation over
    /// layers 7..=12 plus an attention read at layer 13.
    fn default() -> Self {
        Self {
            n_layers: 14,
            d_model: 64,
            n_heads: 4,
            d_ffn: 176,
            vocab_size: 256,
            seed: 0,
            dtype: DType::Float32,
        }
    }
}

impl RuntimeConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// A zero-layer stack is accepted: it is the degenerate embedding-to-head model.
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(RuntimeError::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(RuntimeError::Config(format!(
                "d_model ({}) is not divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}
