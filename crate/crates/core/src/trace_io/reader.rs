use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, ErrorKind, Read, Seek, SeekFrom};
use std::path::Path;

use half::f16;

use super::manifest::*;
use super::TraceIoError;
use crate::pruning::{CaptureFlags, LayerSource, PruneError};
use crate::runtime::{ActivationTrace, AttentionSlice, LayerCapture, SubBlockCapture, TokenRole};
use crate::tensor::Matrix;

const HEADER_LEN: u64 = 24;

/// Streaming reader: the manifest is parsed on open, payload blocks are
/// read and checksummed one layer at a time.
pub struct TraceReader<R> {
    inner: R,
    manifest: TraceManifest,
    roles: Vec<TokenRole>,
    payload_start: u64,
}

fn version_error(detail: &str) -> TraceIoError {
    TraceIoError::Version { found: None, detail: detail.into() }
}

impl TraceReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, TraceIoError> {
        Self::new(BufReader::new(File::open(path.as_ref())?))
    }
}

impl<R: Read + Seek> TraceReader<R> {
    pub fn new(mut inner: R) -> Result<Self, TraceIoError> {
        let total = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        if total == 0 {
            return Err(version_error("empty file"));
        }
        if total < HEADER_LEN {
            let mut head = vec![0u8; total as usize];
            inner.read_exact(&mut head)?;
            if !MAGIC.starts_with(&head[..head.len().min(8)]) {
                return Err(version_error("not a trace file"));
            }
            return Err(version_error("header is truncated"));
        }
        let mut header = [0u8; HEADER_LEN as usize];
        inner.read_exact(&mut header)?;
        if &header[..8] != MAGIC {
            return Err(version_error("not a trace file"));
        }
        let word = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().unwrap());
        let version = word(8);
        if version != FORMAT_VERSION {
            return Err(TraceIoError::Version {
                found: Some(version),
                detail: format!("this build reads version {FORMAT_VERSION}"),
            });
        }
        if word(12) != ENDIANNESS_MARKER {
            return Err(TraceIoError::Manifest("endianness marker mismatch".into()));
        }
        let manifest_len = u64::from_le_bytes(header[16..24].try_into().unwrap());
        let manifest_corrupt = |detail: &str| TraceIoError::Corruption { block: "manifest".into(), detail: detail.into() };
        if manifest_len.saturating_add(HEADER_LEN + 4) > total {
            return Err(manifest_corrupt("truncated"));
        }
        let mut json = vec![0u8; manifest_len as usize];
        inner.read_exact(&mut json)?;
        let mut crc = [0u8; 4];
        inner.read_exact(&mut crc)?;
        if crc32fast::hash(&json) != u32::from_le_bytes(crc) {
            return Err(manifest_corrupt("checksum mismatch"));
        }
        let manifest: TraceManifest =
            serde_json::from_slice(&json).map_err(|e| TraceIoError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(Self {
            inner,
            roles: manifest.roles(),
            manifest,
            payload_start: HEADER_LEN + manifest_len + 4,
        })
    }

    pub fn manifest(&self) -> &TraceManifest {
        &self.manifest
    }

    fn read_block(&mut self, name: &str, b: BlockRef) -> Result<Matrix, TraceIoError> {
        let dtype = self.manifest.dtype;
        let mut bytes = vec![0u8; b.byte_len(dtype) as usize];
        self.inner.seek(SeekFrom::Start(self.payload_start + b.offset))?;
        self.inner.read_exact(&mut bytes).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => TraceIoError::Corruption { block: name.into(), detail: "truncated".into() },
            _ => TraceIoError::Io(e),
        })?;
        if crc32fast::hash(&bytes) != b.crc32 {
            return Err(TraceIoError::Corruption { block: name.into(), detail: "checksum mismatch".into() });
        }
        let data: Vec<f64> = match dtype {
            StorageDType::Float32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            StorageDType::Float16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f64())
                .collect(),
        };
        Ok(Matrix::from_vec(b.rows, b.cols, data))
    }

    /// Loads one layer, or `None` when the trace has no record of it.
    pub fn read_layer(&mut self, layer: usize) -> Result<Option<LayerCapture>, TraceIoError> {
        let Some(entry) = self.manifest.layer(layer).cloned() else {
            return Ok(None);
        };
        let l = entry.layer;
        let sub = |this: &mut Self, what: &str, s: &SubBlockEntry| -> Result<SubBlockCapture, TraceIoError> {
            Ok(SubBlockCapture {
                tokens: s.tokens.clone(),
                input: this.read_block(&format!("layer {l} {what}_in"), s.input)?,
                output: this.read_block(&format!("layer {l} {what}_out"), s.output)?,
            })
        };
        let mut capture = LayerCapture::empty(l, entry.live_tokens.clone());
        if let Some(a) = &entry.attention {
            capture.attention = Some(sub(self, "attention", a)?);
        }
        if let Some(f) = &entry.ffn {
            capture.ffn = Some(sub(self, "ffn", f)?);
        }
        if let Some(s) = &entry.attention_slice {
            capture.attention_slice = Some(AttentionSlice {
                instruction_tokens: s.instruction_tokens.clone(),
                image_tokens: s.image_tokens.clone(),
                weights: self.read_block(&format!("layer {l} attention_slice"), s.weights)?,
                reduction: s.reduction,
            });
        }
        Ok(Some(capture))
    }

    pub fn read_all(&mut self) -> Result<ActivationTrace, TraceIoError> {
        let m = &self.manifest;
        let mut trace = ActivationTrace::new(m.model_name.clone(), m.n_layers, m.d_model, m.n_heads, self.roles.clone());
        let layers: Vec<usize> = m.layers.iter().map(|e| e.layer).collect();
        for l in layers {
            trace.layers.extend(self.read_layer(l)?);
        }
        Ok(trace)
    }
}

impl<R: Read + Seek> LayerSource for TraceReader<R> {
    fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    fn n_layers(&self) -> usize {
        self.manifest.n_layers
    }

    fn available(&self) -> BTreeMap<usize, CaptureFlags> {
        self.manifest.captured_layers()
    }

    fn load_layer(&mut self, layer: usize) -> Result<Option<Cow<'_, LayerCapture>>, PruneError> {
        self.read_layer(layer)
            .map(|c| c.map(Cow::Owned))
            .map_err(|e| PruneError::Source(e.to_string()))
    }
}

/// Reads a whole trace from any seekable source.
pub fn read_trace<R: Read + Seek>(source: R) -> Result<ActivationTrace, TraceIoError> {
    TraceReader::new(source)?.read_all()
}

pub fn read_trace_file(path: impl AsRef<Path>) -> Result<ActivationTrace, TraceIoError> {
    TraceReader::open(path)?.read_all()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace_io::write_trace;
    use std::io::Cursor;

    fn tiny() -> ActivationTrace {
        let roles = vec![TokenRole::System, TokenRole::Image, TokenRole::Image, TokenRole::Instruction];
        let mut t = ActivationTrace::new("tiny", 2, 2, 1, roles);
        let mut c = LayerCapture::empty(2, vec![0, 1, 2, 3]);
        let m = Matrix::from_vec(2, 2, vec![1.0, -0.5, 0.25, 3.0]);
        c.attention = Some(SubBlockCapture { tokens: vec![1, 2], input: m.clone(), output: m.clone() });
        c.attention_slice = Some(AttentionSlice {
            instruction_tokens: vec![3],
            image_tokens: vec![1, 2],
            weights: Matrix::from_vec(1, 2, vec![0.125, 0.5]),
            reduction: Default::default(),
        });
        t.layers.push(c);
        t
    }

    #[test]
    fn round_trip_both_dtypes() {
        for dtype in [StorageDType::Float32, StorageDType::Float16] {
            let mut bytes = Vec::new();
            let n = write_trace(&tiny(), dtype, &mut bytes).unwrap();
            assert_eq!(n as usize, bytes.len());
            assert_eq!(read_trace(Cursor::new(bytes)).unwrap(), tiny());
        }
    }

    #[test]
    fn header_errors() {
        assert!(matches!(read_trace(Cursor::new(Vec::new())), Err(TraceIoError::Version { found: None, .. })));
        assert!(matches!(read_trace(Cursor::new(b"GIF89a".to_vec())), Err(TraceIoError::Version { found: None, .. })));
        let mut bytes = Vec::new();
        write_trace(&tiny(), StorageDType::Float32, &mut bytes).unwrap();
        bytes[8] = 9;
        assert!(matches!(read_trace(Cursor::new(bytes)), Err(TraceIoError::Version { found: Some(9), .. })));
    }

    #[test]
    fn flipped_payload_byte_names_block() {
        let mut bytes = Vec::new();
        write_trace(&tiny(), StorageDType::Float32, &mut bytes).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0x40;
        match read_trace(Cursor::new(bytes)) {
            Err(TraceIoError::Corruption { block, .. }) => assert_eq!(block, "layer 2 attention_slice"),
            other => panic!("{other:?}"),
        }
    }
}
