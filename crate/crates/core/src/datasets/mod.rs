//! Dataset manifests, Market-1501 style ingestion and the synthetic
//! desk-scale generator.

mod ingest;
mod synthetic;

pub use ingest::{format_name, ingest, parse_name, ParsedName, GALLERY_DIR, QUERY_DIR, TRAIN_DIR};
pub use synthetic::{generate_synthetic, SyntheticMeta, SyntheticSpec};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::IoContext;
use crate::image::Image;
use crate::netblocks::model::hex;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
/// Identity of junk images, ignored during evaluation.
pub const JUNK_IDENTITY: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the dataset root.
    pub path: String,
    pub identity: i64,
    pub camera: u32,
    /// Contiguous class index, assigned for training samples only.
    pub label: Option<usize>,
    pub junk: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub train: Vec<SampleRecord>,
    pub query: Vec<SampleRecord>,
    pub gallery: Vec<SampleRecord>,
    pub num_classes: usize,
    /// Files that did not follow the naming scheme.
    pub rejects: Vec<String>,
    pub fingerprint: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub synthetic: BTreeMap<String, SyntheticMeta>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_vec_pretty(self)?).at(&path)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        Ok(serde_json::from_slice(&fs::read(&path).at(&path)?)?)
    }
}

/// SHA-256 over the sorted `(path, size, content hash)` triples of every
/// sample file.
pub fn fingerprint(root: &Path, records: &[&SampleRecord]) -> Result<String> {
    let mut triples = records
        .par_iter()
        .map(|r| {
            let path = root.join(&r.path);
            let bytes = fs::read(&path).at(&path)?;
            Ok((r.path.clone(), bytes.len(), hex(&Sha256::digest(&bytes))))
        })
        .collect::<Result<Vec<_>>>()?;
    triples.sort();
    let mut h = Sha256::new();
    for (p, size, digest) in triples {
        h.update(p.as_bytes());
        h.update([0]);
        h.update(size.to_le_bytes());
        h.update(digest.as_bytes());
    }
    Ok(hex(&h.finalize()))
}

/// A manifest with every image decoded in memory.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<Image>,
    pub query: Vec<Image>,
    pub gallery: Vec<Image>,
}

impl Dataset {
    /// Loads the persisted manifest and decodes all images.
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        Self::from_manifest(root, manifest)
    }

    pub fn from_manifest(root: &Path, manifest: DatasetManifest) -> Result<Self> {
        let load = |records: &[SampleRecord]| {
            records
                .par_iter()
                .map(|r| Image::load_png(&root.join(&r.path)))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            root: root.to_path_buf(),
            train: load(&manifest.train)?,
            query: load(&manifest.query)?,
            gallery: load(&manifest.gallery)?,
            manifest,
        })
    }

    pub fn labels(&self) -> Result<Vec<usize>> {
        self.manifest
            .train
            .iter()
            .map(|r| {
                r.label
                    .ok_or_else(|| Error::Dataset(format!("training sample {} has no class label", r.path)))
            })
            .collect()
    }

    pub fn fingerprint(&self) -> &str {
        &self.manifest.fingerprint
    }
}
