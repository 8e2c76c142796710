use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use half::f16;

use super::manifest::*;
use super::TraceIoError;
use crate::runtime::{ActivationTrace, LayerCapture};
use crate::tensor::Matrix;

fn encode(m: &Matrix, dtype: StorageDType, out: &mut Vec<u8>) {
    out.clear();
    out.reserve(m.data.len() * dtype.size());
    match dtype {
        StorageDType::Float32 => {
            for &v in &m.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        StorageDType::Float16 => {
            for &v in &m.data {
                out.extend_from_slice(&f16::from_f64(v).to_le_bytes());
            }
        }
    }
}

/// Matrices of a layer in payload order.
fn layer_matrices(c: &LayerCapture) -> Vec<&Matrix> {
    let mut out = Vec::new();
    for sub in [&c.attention, &c.ffn].into_iter().flatten() {
        out.push(&sub.input);
        out.push(&sub.output);
    }
    if let Some(s) = &c.attention_slice {
        out.push(&s.weights);
    }
    out
}

fn check_shapes(trace: &ActivationTrace, c: &LayerCapture) -> Result<(), TraceIoError> {
    let err = |m: String| Err(TraceIoError::Serialization(format!("layer {}: {m}", c.layer)));
    for sub in [&c.attention, &c.ffn].into_iter().flatten() {
        for m in [&sub.input, &sub.output] {
            if m.rows != sub.tokens.len() || m.cols != trace.d_model || m.data.len() != m.rows * m.cols {
                return err(format!(
                    "sub-block matrix is {}x{} for {} tokens of width {}",
                    m.rows,
                    m.cols,
                    sub.tokens.len(),
                    trace.d_model
                ));
            }
        }
    }
    if let Some(s) = &c.attention_slice {
        let w = &s.weights;
        if w.rows != s.instruction_tokens.len() || w.cols != s.image_tokens.len() || w.data.len() != w.rows * w.cols {
            return err("attention slice shape does not match its token lists".into());
        }
    }
    Ok(())
}

fn sorted_layers(trace: &ActivationTrace) -> Result<Vec<&LayerCapture>, TraceIoError> {
    let mut layers: Vec<&LayerCapture> = trace.layers.iter().collect();
    layers.sort_by_key(|c| c.layer);
    if layers.windows(2).any(|w| w[0].layer == w[1].layer) {
        return Err(TraceIoError::Serialization("duplicate layer in trace".into()));
    }
    Ok(layers)
}

/// Describes `trace` as it would be laid out with `dtype`.
///
/// Debug-only captures (full attention maps and residual inputs) are not
/// part of the container and are dropped.
pub fn build_manifest(trace: &ActivationTrace, dtype: StorageDType) -> Result<TraceManifest, TraceIoError> {
    let mut offset = 0u64;
    let mut buf = Vec::new();
    let mut block = |m: &Matrix| {
        encode(m, dtype, &mut buf);
        let b = BlockRef { offset, rows: m.rows, cols: m.cols, crc32: crc32fast::hash(&buf) };
        offset += buf.len() as u64;
        b
    };
    let mut entries = Vec::new();
    for c in sorted_layers(trace)? {
        check_shapes(trace, c)?;
        let mut sub = |s: &crate::runtime::SubBlockCapture| SubBlockEntry {
            tokens: s.tokens.clone(),
            input: block(&s.input),
            output: block(&s.output),
        };
        let attention = c.attention.as_ref().map(&mut sub);
        let ffn = c.ffn.as_ref().map(&mut sub);
        let attention_slice = c.attention_slice.as_ref().map(|s| SliceEntry {
            instruction_tokens: s.instruction_tokens.clone(),
            image_tokens: s.image_tokens.clone(),
            reduction: s.reduction,
            weights: block(&s.weights),
        });
        entries.push(LayerEntry { layer: c.layer, live_tokens: c.live_tokens.clone(), attention, ffn, attention_slice });
    }
    let manifest = TraceManifest {
        format_version: FORMAT_VERSION,
        model_name: trace.model_name.clone(),
        n_layers: trace.n_layers,
        d_model: trace.d_model,
        n_heads: trace.n_heads,
        dtype,
        endianness: "little".into(),
        token_roles: encode_roles(&trace.roles),
        layers: entries,
        payload_bytes: offset,
    };
    manifest.validate().map_err(|e| TraceIoError::Serialization(e.to_string()))?;
    Ok(manifest)
}

/// Writes `trace` to `dest` and returns the number of bytes written.
///
/// The payload is encoded twice (once for checksums, once for output) so
/// that memory use stays at one block.
pub fn write_trace<W: Write>(trace: &ActivationTrace, dtype: StorageDType, mut dest: W) -> Result<u64, TraceIoError> {
    let manifest = build_manifest(trace, dtype)?;
    let json = serde_json::to_vec(&manifest).map_err(|e| TraceIoError::Serialization(e.to_string()))?;
    dest.write_all(MAGIC)?;
    dest.write_all(&FORMAT_VERSION.to_le_bytes())?;
    dest.write_all(&ENDIANNESS_MARKER.to_le_bytes())?;
    dest.write_all(&(json.len() as u64).to_le_bytes())?;
    dest.write_all(&json)?;
    dest.write_all(&crc32fast::hash(&json).to_le_bytes())?;
    let mut buf = Vec::new();
    for c in sorted_layers(trace)? {
        for m in layer_matrices(c) {
            encode(m, dtype, &mut buf);
            dest.write_all(&buf)?;
        }
    }
    dest.flush()?;
    Ok(28 + json.len() as u64 + manifest.payload_bytes)
}

pub fn write_trace_file(trace: &ActivationTrace, dtype: StorageDType, path: impl AsRef<Path>) -> Result<u64, TraceIoError> {
    let file = File::create(path.as_ref())?;
    write_trace(trace, dtype, BufWriter::new(file))
}
