use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bundle::EmbeddingBundle;
use crate::error::{Error, FormatError, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Class names in index order; the seventh is only used with `num_classes = 7`.
pub const CLASS_NAMES: [&str; 7] = ["fear", "anger", "joy", "sadness", "surprise", "disgust", "neutral"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub d: usize,
    pub num_classes: usize,
    pub label_map: IndexMap<String, usize>,
    pub entries: Vec<ManifestEntry>,
}

/// The standard table: six emotions, plus `neutral` for seven classes.
/// Other class counts get generic `class_k` names.
pub fn default_label_map(num_classes: usize) -> IndexMap<String, usize> {
    (0..num_classes)
        .map(|k| {
            let name = if num_classes <= CLASS_NAMES.len() {
                CLASS_NAMES[k].to_string()
            } else {
                format!("class_{k}")
            };
            (name, k)
        })
        .collect()
}

impl DatasetManifest {
    pub fn new(d: usize, num_classes: usize) -> Self {
        Self {
            version: MANIFEST_VERSION,
            d,
            num_classes,
            label_map: default_label_map(num_classes),
            entries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.d == 0 || self.num_classes == 0 {
            return Err(Error::Config("manifest d and num_classes must be positive".into()));
        }
        let mut seen = vec![false; self.num_classes];
        for (name, &idx) in &self.label_map {
            if idx >= self.num_classes || seen[idx] {
                return Err(Error::Config(format!(
                    "label map entry {name:?} -> {idx} is out of range or duplicated"
                )));
            }
            seen[idx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!("label map has no name for class {missing}")));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.num_classes];
        for (name, &idx) in &self.label_map {
            if idx < names.len() {
                names[idx] = name.clone();
            }
        }
        names
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub bundle: EmbeddingBundle,
    pub split: Split,
}

/// A manifest together with every bundle it references, in entry order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Builds an in-memory dataset; the manifest entries are regenerated from
    /// the samples with paths `bundles/<id>.bin`.
    pub fn from_samples(d: usize, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut manifest = DatasetManifest::new(d, num_classes);
        manifest.entries = samples
            .iter()
            .map(|s| ManifestEntry {
                id: s.bundle.id.clone(),
                path: format!("bundles/{}.bin", s.bundle.id),
                split: s.split,
            })
            .collect();
        let ds = Self { manifest, samples };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        for s in &self.samples {
            let b = &s.bundle;
            if b.d() != self.manifest.d {
                return Err(Error::Parse(FormatError::Dimension(format!(
                    "bundle {} has d={}, manifest declares d={}",
                    b.id,
                    b.d(),
                    self.manifest.d
                ))));
            }
            b.check_label(self.manifest.num_classes)?;
        }
        Ok(())
    }

    /// Loads a manifest and all referenced bundles (in parallel).
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let samples = manifest
            .entries
            .par_iter()
            .map(|e| {
                let path = resolve(&root, &e.path);
                let bundle = EmbeddingBundle::load_as(&path, e.id.clone())?;
                if bundle.d() != manifest.d {
                    return Err(Error::Format {
                        path,
                        source: FormatError::Dimension(format!(
                            "bundle d={} but manifest declares d={}",
                            bundle.d(),
                            manifest.d
                        )),
                    });
                }
                bundle.check_label(manifest.num_classes).map_err(|source| Error::Format {
                    path: path.clone(),
                    source,
                })?;
                Ok(Sample {
                    bundle,
                    split: e.split,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, samples })
    }

    /// Writes `manifest.json` and one bundle file per entry under `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        for (entry, sample) in self.manifest.entries.iter().zip(&self.samples) {
            let path = resolve(dir, &entry.path);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            sample.bundle.save(&path)?;
        }
        let manifest_path = dir.join("manifest.json");
        self.manifest.save(&manifest_path)?;
        Ok(manifest_path)
    }

    pub fn d(&self) -> usize {
        self.manifest.d
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn split(&self, split: Split) -> Vec<&EmbeddingBundle> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| &s.bundle)
            .collect()
    }

    pub fn find(&self, id: &str) -> Option<&EmbeddingBundle> {
        self.samples.iter().map(|s| &s.bundle).find(|b| b.id == id)
    }
}

fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn default_label_order() {
        let map = default_label_map(6);
        let names: Vec<_> = map.keys().cloned().collect();
        assert_eq!(names, ["fear", "anger", "joy", "sadness", "surprise", "disgust"]);
        assert_eq!(default_label_map(7)["neutral"], 6);
    }

    #[test]
    fn label_map_must_be_a_bijection() {
        let mut m = DatasetManifest::new(4, 3);
        m.validate().unwrap();
        m.label_map.insert("extra".into(), 1);
        assert!(m.validate().is_err());
        let mut m = DatasetManifest::new(4, 3);
        m.label_map.shift_remove("joy");
        assert!(m.validate().is_err());
    }

    #[test]
    fn load_rejects_wrong_dimension() {
        let dir = tempfile::tempdir().unwrap();
        let b = EmbeddingBundle::new(
            "a",
            Tensor::zeros(&[1, 3]),
            Tensor::zeros(&[1, 3]),
            Tensor::zeros(&[1, 3]),
            Some(0),
        )
        .unwrap();
        let ds = Dataset::from_samples(3, 6, vec![Sample { bundle: b, split: Split::Train }]).unwrap();
        let path = ds.write(dir.path()).unwrap();
        assert_eq!(Dataset::load(&path).unwrap().samples.len(), 1);

        let mut manifest = DatasetManifest::load(&path).unwrap();
        manifest.d = 4;
        manifest.save(&path).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::new(2, 6);
        m.entries.push(ManifestEntry {
            id: "gone".into(),
            path: "nope.bin".into(),
            split: Split::Test,
        });
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn labels_out_of_range_are_rejected() {
        let b = EmbeddingBundle::new(
            "a",
            Tensor::zeros(&[1, 2]),
            Tensor::zeros(&[1, 2]),
            Tensor::zeros(&[1, 2]),
            Some(6),
        )
        .unwrap();
        assert!(Dataset::from_samples(2, 6, vec![Sample { bundle: b, split: Split::Train }]).is_err());
    }
}
