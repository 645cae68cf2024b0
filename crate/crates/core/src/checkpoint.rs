//! Model checkpoints: a JSON header followed by a little-endian f32 blob.
//!
//! ```text
//! magic "ALFCKPT1" | u64 LE header length | header JSON | f32 LE values
//! ```
//!
//! Tensor offsets are byte offsets into the blob and must be 4-aligned.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::gca::ScoreMode;
use crate::model::{ModelParams, ModelSpec, VariantKind};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ALFCKPT1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub variant: VariantKind,
    pub score_mode: ScoreMode,
    pub d: usize,
    pub num_classes: usize,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            variant: self.variant,
            score_mode: self.score_mode,
            d: self.d,
            num_classes: self.num_classes,
        }
    }
}

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let spec = params.spec();
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    params.visit("", &mut |name, t| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in t.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    });
    let header = CheckpointHeader {
        variant: spec.variant,
        score_mode: spec.score_mode,
        d: spec.d,
        num_classes: spec.num_classes,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: usize, len: usize) -> Result<&'a [u8], FormatError> {
    at.checked_add(len)
        .and_then(|end| bytes.get(at..end))
        .ok_or(FormatError::Truncated {
            needed: at.saturating_add(len),
            available: bytes.len(),
        })
}

/// Decodes a checkpoint, validating every declared name and shape against
/// the architecture the header describes.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams, FormatError> {
    let magic = take(bytes, 0, 8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let len = u64::from_le_bytes(take(bytes, 8, 8)?.try_into().expect("8 bytes"));
    let len = usize::try_from(len).map_err(|_| FormatError::Header(format!("header length {len}")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(take(bytes, 16, len)?).map_err(|e| FormatError::Header(e.to_string()))?;
    let blob = &bytes[16 + len..];

    let mut params = ModelParams::init(header.spec(), 0).map_err(|e| FormatError::Header(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();

    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(header.tensors.len());
    let mut used = 0usize;
    for entry in &header.tensors {
        let Some((_, shape)) = expected.iter().find(|(n, _)| *n == entry.name) else {
            return Err(FormatError::UnknownTensor(entry.name.clone()));
        };
        if loaded.iter().any(|(n, _)| *n == entry.name) {
            return Err(FormatError::Header(format!("tensor {:?} listed twice", entry.name)));
        }
        if entry.shape != *shape {
            return Err(FormatError::ShapeMismatch {
                name: entry.name.clone(),
                declared: entry.shape.clone(),
                expected: shape.clone(),
            });
        }
        let numel: usize = shape.iter().product();
        let nbytes = numel * 4;
        if entry.offset % 4 != 0 || entry.offset.checked_add(nbytes).is_none_or(|end| end > blob.len()) {
            return Err(FormatError::BadOffset {
                name: entry.name.clone(),
                offset: entry.offset,
                len: nbytes,
                blob: blob.len(),
            });
        }
        let raw = &blob[entry.offset..entry.offset + nbytes];
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(entry.name.clone()));
        }
        used = used.max(entry.offset + nbytes);
        loaded.push((entry.name.clone(), Tensor::new(shape, data).expect("validated shape")));
    }
    if let Some((name, _)) = expected.iter().find(|(n, _)| !loaded.iter().any(|(l, _)| l == n)) {
        return Err(FormatError::MissingTensor(name.clone()));
    }
    if used < blob.len() {
        return Err(FormatError::TrailingBytes(blob.len() - used));
    }
    params
        .load_tensors(&loaded)
        .map_err(|e| FormatError::Header(e.to_string()))?;
    Ok(params)
}

pub fn save_model(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|source| Error::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Rounds every value to single precision, matching what a checkpoint stores.
pub fn quantize(params: &mut ModelParams) {
    params.visit_mut("", &mut |_, t| {
        t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(variant: VariantKind) -> ModelParams {
        let spec = ModelSpec {
            variant,
            score_mode: ScoreMode::Bimodal,
            d: 4,
            num_classes: 3,
        };
        ModelParams::init(spec, 9).unwrap()
    }

    fn header_and_blob(bytes: &[u8]) -> (CheckpointHeader, Vec<u8>) {
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let h = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        (h, bytes[16 + len..].to_vec())
    }

    fn assemble(h: &CheckpointHeader, blob: &[u8]) -> Vec<u8> {
        let json = serde_json::to_vec(h).unwrap();
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(blob);
        out
    }

    #[test]
    fn round_trip_is_exact_at_single_precision() {
        for v in VariantKind::ALL {
            let p = model(v);
            let bytes = to_bytes(&p).unwrap();
            let back = from_bytes(&bytes).unwrap();
            let mut q = p.clone();
            quantize(&mut q);
            assert_eq!(back, q);
            assert_eq!(to_bytes(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn header_lists_every_parameter_once() {
        let p = model(VariantKind::Full);
        let (h, _) = header_and_blob(&to_bytes(&p).unwrap());
        let names: Vec<_> = h.tensors.iter().map(|t| t.name.clone()).collect();
        assert_eq!(names, p.names());
    }

    #[test]
    fn distinct_errors() {
        let bytes = to_bytes(&model(VariantKind::Dca)).unwrap();
        let (h, blob) = header_and_blob(&bytes);

        let mut bad = h.clone();
        bad.tensors[0].name = "gmf.W_x".into();
        assert!(matches!(from_bytes(&assemble(&bad, &blob)), Err(FormatError::UnknownTensor(_))));

        let mut bad = h.clone();
        bad.tensors[0].shape = vec![4, 5];
        assert!(matches!(from_bytes(&assemble(&bad, &blob)), Err(FormatError::ShapeMismatch { .. })));

        let mut bad = h.clone();
        bad.tensors.pop();
        assert!(matches!(from_bytes(&assemble(&bad, &blob)), Err(FormatError::MissingTensor(_))));

        assert!(matches!(
            from_bytes(&assemble(&h, &blob[..blob.len() - 4])),
            Err(FormatError::BadOffset { .. })
        ));
        assert!(matches!(from_bytes(&bytes[..12]), Err(FormatError::Truncated { .. })));

        let mut extra = blob.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(matches!(from_bytes(&assemble(&h, &extra)), Err(FormatError::TrailingBytes(4))));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(from_bytes(&magic), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = model(VariantKind::NoEmo);
        save_model(&p, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.spec(), p.spec());
        assert!(matches!(load_model(&dir.path().join("none")), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn tampered_offsets_never_panic(idx in 0usize..9, offset in 0usize..10_000) {
            let bytes = to_bytes(&model(VariantKind::Dca)).unwrap();
            let (mut h, blob) = header_and_blob(&bytes);
            let i = idx % h.tensors.len();
            h.tensors[i].offset = offset;
            let _ = from_bytes(&assemble(&h, &blob));
        }

        #[test]
        fn random_bytes_never_panic(tail in prop::collection::vec(any::<u8>(), 0..64)) {
            let mut bytes = CHECKPOINT_MAGIC.to_vec();
            bytes.extend_from_slice(&tail);
            prop_assert!(from_bytes(&bytes).is_err());
        }
    }
}
