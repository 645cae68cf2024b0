//! Per-sample embedding bundles and their binary file format.
//!
//! Layout (little-endian): the 8-byte magic `MOODEMB1`, then `u32` fields
//! version, d, m, n, label (`0xFFFF_FFFF` when unlabeled), then the image
//! (m·d), text (n·d) and emotion (m·d) features as row-major `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &[u8; 8] = b"MOODEMB1";
pub const BUNDLE_VERSION: u32 = 1;
pub const UNLABELED: u32 = u32::MAX;
const HEADER_LEN: usize = 8 + 5 * 4;

/// One meme: image patch, text token and emotion patch features plus label.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    pub id: String,
    /// m×d image patch features.
    pub image: Tensor,
    /// n×d text token features.
    pub text: Tensor,
    /// m×d emotion patch features.
    pub emotion: Tensor,
    pub label: Option<usize>,
}

impl EmbeddingBundle {
    pub fn new(
        id: impl Into<String>,
        image: Tensor,
        text: Tensor,
        emotion: Tensor,
        label: Option<usize>,
    ) -> Result<Self> {
        let bundle = Self {
            id: id.into(),
            image,
            text,
            emotion,
            label,
        };
        bundle.validate().map_err(Error::Parse)?;
        Ok(bundle)
    }

    pub fn d(&self) -> usize {
        self.image.cols()
    }

    pub fn m(&self) -> usize {
        self.image.rows()
    }

    pub fn n(&self) -> usize {
        self.text.rows()
    }

    pub fn validate(&self) -> Result<(), FormatError> {
        for (name, t) in [("image", &self.image), ("text", &self.text), ("emotion", &self.emotion)] {
            if t.rank() != 2 {
                return Err(FormatError::Dimension(format!("{name} features must be a matrix")));
            }
            if !t.is_finite() {
                return Err(FormatError::NonFinite(format!("{name} features")));
            }
        }
        if self.image.shape() != self.emotion.shape() {
            return Err(FormatError::Dimension(format!(
                "image {:?} and emotion {:?} shapes differ",
                self.image.shape(),
                self.emotion.shape()
            )));
        }
        if self.text.cols() != self.d() {
            return Err(FormatError::Dimension(format!(
                "text width {} differs from image width {}",
                self.text.cols(),
                self.d()
            )));
        }
        if let Some(label) = self.label {
            if label >= UNLABELED as usize {
                return Err(FormatError::Header(format!("label {label} collides with the sentinel")));
            }
        }
        Ok(())
    }

    /// Checks the label against a class count.
    pub fn check_label(&self, num_classes: usize) -> Result<(), FormatError> {
        match self.label {
            Some(l) if l >= num_classes => Err(FormatError::Header(format!(
                "label {l} out of range for {num_classes} classes"
            ))),
            _ => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (d, m, n) = (self.d(), self.m(), self.n());
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * d * (2 * m + n));
        out.extend_from_slice(BUNDLE_MAGIC);
        let label = self.label.map_or(UNLABELED, |l| l as u32);
        for v in [BUNDLE_VERSION, d as u32, m as u32, n as u32, label] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in [&self.image, &self.text, &self.emotion] {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Decodes a bundle; the header is fully validated before any payload is read.
    pub fn from_bytes(id: impl Into<String>, bytes: &[u8]) -> Result<Self, FormatError> {
        if bytes.len() < 8 || &bytes[..8] != BUNDLE_MAGIC {
            let found = &bytes[..bytes.len().min(8)];
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(BUNDLE_MAGIC).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated {
                needed: HEADER_LEN,
                available: bytes.len(),
            });
        }
        let field = |k: usize| {
            let at = 8 + 4 * k;
            u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
        };
        let version = field(0);
        if version != BUNDLE_VERSION {
            return Err(FormatError::Version {
                found: version,
                expected: BUNDLE_VERSION,
            });
        }
        let (d, m, n, label) = (field(1) as usize, field(2) as usize, field(3) as usize, field(4));
        if d == 0 || m == 0 || n == 0 {
            return Err(FormatError::Dimension(format!(
                "d={d}, m={m}, n={n}: all must be positive"
            )));
        }
        let values = d
            .checked_mul(2 * m + n)
            .ok_or_else(|| FormatError::Dimension("payload size overflows".into()))?;
        let needed = HEADER_LEN + 4 * values;
        if bytes.len() < needed {
            return Err(FormatError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(FormatError::TrailingBytes(bytes.len() - needed));
        }
        let mut cursor = HEADER_LEN;
        let mut read = |rows: usize| {
            let data: Vec<f64> = bytes[cursor..cursor + 4 * rows * d]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            cursor += 4 * rows * d;
            Tensor::matrix(rows, d, data).expect("sized above")
        };
        let image = read(m);
        let text = read(n);
        let emotion = read(m);
        let bundle = Self {
            id: id.into(),
            image,
            text,
            emotion,
            label: (label != UNLABELED).then_some(label as usize),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Loads a bundle whose id is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::load_as(path, id)
    }

    pub fn load_as(path: &Path, id: impl Into<String>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(id, &bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rounds every feature to single precision, the on-disk fidelity.
    pub fn quantized(mut self) -> Self {
        for t in [&mut self.image, &mut self.text, &mut self.emotion] {
            t.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
        self
    }
}
