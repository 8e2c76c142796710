//! Activation-trace container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "TTVTRACE"
//! 8       4     format version (1)
//! 12      4     endianness marker 0x01020304
//! 16      8     manifest length M
//! 24      M     manifest, UTF-8 JSON (see TraceManifest)
//! 24+M    4     CRC-32 of the manifest bytes
//! 28+M    ...   payload: matrices in ascending layer order
//! ```
//!
//! Within a layer the blocks are attention_in, attention_out, ffn_in,
//! ffn_out (token-major, dimension-minor) and then the instruction-to-image
//! slice (instruction-row-major). Each block's CRC-32 (IEEE, as in zlib) is
//! kept in the manifest. See `docs/trace-format.md` for the full description.

mod manifest;
mod reader;
mod writer;

pub use manifest::{
    decode_roles, encode_roles, BlockRef, LayerEntry, RoleRun, SliceEntry, StorageDType,
    SubBlockEntry, TraceManifest, ENDIANNESS_MARKER, FILE_EXTENSION, FORMAT_VERSION, MAGIC,
};
pub use reader::{read_trace, read_trace_file, TraceReader};
pub use writer::{build_manifest, write_trace, write_trace_file};

use crate::runtime::ActivationTrace;

#[derive(Debug, thiserror::Error)]
pub enum TraceIoError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("unsupported trace version{}: {detail}", .found.map(|v| format!(" {v}")).unwrap_or_default())]
    Version { found: Option<u32>, detail: String },
    #[error("corrupted block `{block}`: {detail}")]
    Corruption { block: String, detail: String },
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("cannot serialize trace: {0}")]
    Serialization(String),
}

/// JSON mirror of a trace, for small hand-written fixtures.
pub fn trace_to_json(trace: &ActivationTrace) -> String {
    serde_json::to_string_pretty(trace).expect("trace serializes")
}

pub fn trace_from_json(text: &str) -> Result<ActivationTrace, TraceIoError> {
    serde_json::from_str(text).map_err(|e| TraceIoError::Manifest(format!("json trace: {e}")))
}
