use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TraceIoError;
use crate::pruning::CaptureFlags;
use crate::runtime::{HeadReduction, TokenRole};

pub const MAGIC: &[u8; 8] = b"TTVTRACE";
pub const FORMAT_VERSION: u32 = 1;
pub const ENDIANNESS_MARKER: u32 = 0x0102_0304;
pub const FILE_EXTENSION: &str = "ttvt";

/// Element type of the payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageDType {
    Float16,
    Float32,
}

impl StorageDType {
    pub fn size(self) -> usize {
        match self {
            StorageDType::Float16 => 2,
            StorageDType::Float32 => 4,
        }
    }
}

impl std::str::FromStr for StorageDType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "float16" | "f16" => Ok(Self::Float16),
            "float32" | "f32" => Ok(Self::Float32),
            other => Err(format!("unknown storage dtype `{other}` (float16 or float32)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleRun {
    pub role: TokenRole,
    pub count: usize,
}

pub fn encode_roles(roles: &[TokenRole]) -> Vec<RoleRun> {
    let mut runs: Vec<RoleRun> = Vec::new();
    for &role in roles {
        match runs.last_mut() {
            Some(run) if run.role == role => run.count += 1,
            _ => runs.push(RoleRun { role, count: 1 }),
        }
    }
    runs
}

pub fn decode_roles(runs: &[RoleRun]) -> Vec<TokenRole> {
    runs.iter()
        .flat_map(|r| std::iter::repeat(r.role).take(r.count))
        .collect()
}

/// Location of one matrix in the payload. `offset` is relative to the
/// first payload byte.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub offset: u64,
    pub rows: usize,
    pub cols: usize,
    pub crc32: u32,
}

impl BlockRef {
    pub fn byte_len(&self, dtype: StorageDType) -> u64 {
        (self.rows * self.cols * dtype.size()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubBlockEntry {
    pub tokens: Vec<usize>,
    pub input: BlockRef,
    pub output: BlockRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub instruction_tokens: Vec<usize>,
    pub image_tokens: Vec<usize>,
    pub reduction: HeadReduction,
    pub weights: BlockRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: usize,
    pub live_tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<SubBlockEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffn: Option<SubBlockEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention_slice: Option<SliceEntry>,
}

impl LayerEntry {
    pub fn flags(&self) -> CaptureFlags {
        CaptureFlags {
            attention: self.attention.is_some(),
            ffn: self.ffn.is_some(),
            attention_slice: self.attention_slice.is_some(),
        }
    }

    /// Every block of the layer in payload order, with a display name.
    pub fn blocks(&self) -> Vec<(String, BlockRef)> {
        let mut out = Vec::new();
        let l = self.layer;
        if let Some(a) = &self.attention {
            out.push((format!("layer {l} attention_in"), a.input));
            out.push((format!("layer {l} attention_out"), a.output));
        }
        if let Some(f) = &self.ffn {
            out.push((format!("layer {l} ffn_in"), f.input));
            out.push((format!("layer {l} ffn_out"), f.output));
        }
        if let Some(s) = &self.attention_slice {
            out.push((format!("layer {l} attention_slice"), s.weights));
        }
        out
    }
}

/// Human-readable description of a trace file, stored as JSON in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub format_version: u32,
    pub model_name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub dtype: StorageDType,
    pub endianness: String,
    pub token_roles: Vec<RoleRun>,
    pub layers: Vec<LayerEntry>,
    pub payload_bytes: u64,
}

impl TraceManifest {
    pub fn roles(&self) -> Vec<TokenRole> {
        decode_roles(&self.token_roles)
    }

    pub fn captured_layers(&self) -> BTreeMap<usize, CaptureFlags> {
        self.layers.iter().map(|l| (l.layer, l.flags())).collect()
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerEntry> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Checks that declared shapes agree with token lists, that blocks tile
    /// the payload contiguously in layer order, and that the byte total matches.
    pub fn validate(&self) -> Result<(), TraceIoError> {
        let bad = |m: String| Err(TraceIoError::Manifest(m));
        if self.format_version != FORMAT_VERSION {
            return Err(TraceIoError::Version {
                found: Some(self.format_version),
                detail: "manifest declares an unsupported version".into(),
            });
        }
        if self.endianness != "little" {
            return bad(format!("unsupported endianness `{}`", self.endianness));
        }
        let n_tokens: usize = self.token_roles.iter().map(|r| r.count).sum();
        let mut expected_offset = 0u64;
        let mut last_layer = 0;
        for entry in &self.layers {
            if entry.layer <= last_layer || entry.layer > self.n_layers {
                return bad(format!("layer {} out of order or beyond depth", entry.layer));
            }
            last_layer = entry.layer;
            if entry.live_tokens.iter().any(|&t| t >= n_tokens) {
                return bad(format!("layer {} lists a token beyond the sequence", entry.layer));
            }
            for sub in [&entry.attention, &entry.ffn].into_iter().flatten() {
                for b in [sub.input, sub.output] {
                    if b.rows != sub.tokens.len() || b.cols != self.d_model {
                        return bad(format!(
                            "layer {} sub-block is {}x{} for {} tokens of width {}",
                            entry.layer,
                            b.rows,
                            b.cols,
                            sub.tokens.len(),
                            self.d_model
                        ));
                    }
                }
            }
            if let Some(s) = &entry.attention_slice {
                if s.weights.rows != s.instruction_tokens.len() || s.weights.cols != s.image_tokens.len() {
                    return bad(format!("layer {} attention slice shape mismatch", entry.layer));
                }
            }
            for (name, b) in entry.blocks() {
                if b.offset != expected_offset {
                    return bad(format!("{name} starts at {} instead of {expected_offset}", b.offset));
                }
                expected_offset += b.byte_len(self.dtype);
            }
        }
        if expected_offset != self.payload_bytes {
            return bad(format!(
                "blocks cover {expected_offset} bytes but payload_bytes is {}",
                self.payload_bytes
            ));
        }
        Ok(())
    }
}
