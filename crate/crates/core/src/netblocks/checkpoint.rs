//! Checkpoints: a JSON manifest (config hash, model spec, view registry,
//! tensor table) beside one little-endian `f64` parameter blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::model::{ModelSpec, ReidNet};
use super::param::HasParams;
use crate::error::IoContext;
use crate::views::ViewRegistry;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config_hash: String,
    pub model: ModelSpec,
    pub views: Option<ViewRegistry>,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    pub fn capture(
        net: &mut ReidNet,
        views: Option<&ViewRegistry>,
        epoch: usize,
        metrics: BTreeMap<String, f64>,
    ) -> Self {
        let mut tensors = BTreeMap::new();
        let mut entries = Vec::new();
        let mut offset = 0;
        net.visit_params("", &mut |name, p| {
            entries.push(TensorEntry {
                name: name.to_string(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += p.value.len();
            tensors.insert(name.to_string(), p.value.clone());
        });
        Self {
            manifest: CheckpointManifest {
                config_hash: net.spec.config_hash(),
                model: net.spec.clone(),
                views: views.cloned(),
                epoch,
                metrics,
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        let mut blob = Vec::new();
        for e in &self.manifest.tensors {
            for v in self.tensors[&e.name].iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        // Blob first: a manifest is only present once its blob is complete.
        let params = dir.join(PARAMS_FILE);
        fs::write(&params, blob).at(&params)?;
        let manifest = dir.join(MANIFEST_FILE);
        fs::write(&manifest, serde_json::to_vec_pretty(&self.manifest)?).at(&manifest)?;
        Ok(())
    }

    /// Loads a checkpoint; with `expected_hash` set, a different config hash
    /// is an error.
    pub fn load(dir: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path).at(&manifest_path)?)?;
        if manifest.config_hash != manifest.model.config_hash() {
            return Err(Error::Corrupt {
                path: manifest_path,
                reason: "config hash does not match the stored model spec".into(),
            });
        }
        if let Some(expected) = expected_hash {
            if expected != manifest.config_hash {
                return Err(Error::ConfigHashMismatch {
                    expected: expected.to_string(),
                    found: manifest.config_hash,
                });
            }
        }
        let params_path = dir.join(PARAMS_FILE);
        let blob = fs::read(&params_path).at(&params_path)?;
        let total: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if blob.len() != total * 8 {
            return Err(Error::Corrupt {
                path: params_path,
                reason: format!("expected {} bytes, found {}", total * 8, blob.len()),
            });
        }
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let len: usize = e.shape.iter().product();
            let values = blob[e.offset * 8..(e.offset + len) * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| Error::Corrupt {
                path: params_path.clone(),
                reason: err.to_string(),
            })?;
            tensors.insert(e.name.clone(), arr);
        }
        Ok(Self { manifest, tensors })
    }

    /// Rebuilds the network and restores every tensor.
    pub fn to_model(&self) -> Result<ReidNet> {
        let mut net = ReidNet::build(&self.manifest.model, 0)?;
        let copied = self.copy_into(&mut net, |_| true)?;
        let mut total = 0;
        net.visit_params("", &mut |_, _| total += 1);
        if copied != total {
            return Err(Error::Config(format!(
                "checkpoint restored {copied} of {total} tensors"
            )));
        }
        Ok(net)
    }

    /// Copies every tensor whose name passes `filter` and exists in `net`.
    /// Shapes must agree. Returns the number of tensors copied.
    pub fn copy_into(&self, net: &mut ReidNet, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let mut copied = 0;
        let mut err = None;
        net.visit_params("", &mut |name, p| {
            if !filter(name) {
                return;
            }
            if let Some(t) = self.tensors.get(name) {
                if t.shape() == p.value.shape() {
                    p.value.assign(t);
                    copied += 1;
                } else if err.is_none() {
                    err = Some(Error::Shape(format!(
                        "{name}: checkpoint {:?} vs model {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(copied),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netblocks::backbone::BackboneConfig;
    use crate::netblocks::layers::Tensor4;

    fn spec(classes: usize) -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig::reference([4, 4, 4, 6]),
            input_height: 32,
            input_width: 16,
            embedding_dim: 5,
            num_classes: classes,
            pool_kernel: 2,
            branch_pool_kernel: 2,
            fmfb_channels: 4,
            rfb_dim: 4,
            branches: vec![],
        }
    }

    #[test]
    fn round_trip_restores_outputs_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = ReidNet::build(&spec(3), 9).unwrap();
        let x = Tensor4::from_shape_fn((2, 3, 32, 16), |(n, c, y, x)| ((n + c * y + x) % 4) as f64);
        net.forward(&x, crate::netblocks::model::BranchSelection::NONE);
        let ckpt = Checkpoint::capture(&mut net, None, 3, BTreeMap::new());
        ckpt.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path(), Some(&net.spec.config_hash())).unwrap();
        assert_eq!(loaded.manifest.epoch, 3);
        let restored = loaded.to_model().unwrap();
        assert_eq!(restored.embed(&x), net.embed(&x));
    }

    #[test]
    fn hash_mismatch_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let mut net = ReidNet::build(&spec(3), 9).unwrap();
        Checkpoint::capture(&mut net, None, 0, BTreeMap::new())
            .save(dir.path())
            .unwrap();
        let other = spec(4).config_hash();
        assert!(matches!(
            Checkpoint::load(dir.path(), Some(&other)),
            Err(Error::ConfigHashMismatch { .. })
        ));
    }
}
