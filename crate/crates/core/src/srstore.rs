//! Offline supervisory representations: one binary file per teacher view.
//!
//! File layout (little endian):
//!
//! ```text
//! magic  "FDSRv1\0\0"
//! u32    manifest length, then the manifest as JSON
//! record { u64 sample id, dim x f32, u32 crc32 of the preceding bytes }*
//! ```
//!
//! Records are appended by a single writer. A rebuild keeps valid records,
//! rewrites corrupted ones in place and appends missing ones.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::IoContext;
use crate::features::{flip_averaged, Embedder, InputNorm};
use crate::image::Image;
use crate::netblocks::model::hex;
use crate::views::{crop_view, ViewRegistry, ViewSpec};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"FDSRv1\0\0";

/// `(f(crop) + f(flip crop)) / 2`, stored as `f32`.
pub fn generate_sr<E: Embedder + ?Sized>(
    teacher: &E,
    image: &Image,
    spec: &ViewSpec,
    norm: &InputNorm,
) -> Result<Vec<f32>> {
    let sr = flip_averaged(teacher, &crop_view(image, spec)?, norm);
    if sr.iter().any(|v| !v.is_finite()) {
        return Err(Error::Pipeline(format!(
            "teacher for view {} produced a non-finite feature",
            spec.name
        )));
    }
    Ok(sr.iter().map(|&v| v as f32).collect())
}

pub fn cache_file(dir: &Path, teacher_id: &str) -> PathBuf {
    dir.join(format!("sr_{teacher_id}.bin"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrManifest {
    pub teacher_id: String,
    /// Hash of the teacher's model description.
    pub teacher_hash: String,
    pub view: ViewSpec,
    pub dataset_fingerprint: String,
    pub dim: usize,
}

/// A teacher ready for extraction.
pub struct TeacherHandle<'a> {
    pub model: &'a dyn Embedder,
    pub hash: String,
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildStats {
    pub written: usize,
    pub reused: usize,
    pub repaired: usize,
}

fn record_len(dim: usize) -> usize {
    8 + 4 * dim + 4
}

fn encode_record(sample: u64, v: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(record_len(v.len()));
    buf.extend_from_slice(&sample.to_le_bytes());
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// `None` when the checksum fails.
fn decode_record(buf: &[u8], dim: usize) -> Option<(u64, Vec<f32>)> {
    let body = &buf[..buf.len() - 4];
    let crc = u32::from_le_bytes(buf[buf.len() - 4..].try_into().ok()?);
    if crc32fast::hash(body) != crc {
        return None;
    }
    let sample = u64::from_le_bytes(body[..8].try_into().ok()?);
    let v = body[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect::<Vec<_>>();
    (v.len() == dim).then_some((sample, v))
}

/// Sample id and vector of one record.
type Record = (u64, Vec<f32>);

struct RawFile {
    manifest: SrManifest,
    /// `(offset, record)`; `None` marks a checksum failure.
    records: Vec<(u64, Option<Record>)>,
}

fn read_file(path: &Path) -> Result<RawFile> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let bytes = fs::read(path).at(path)?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_len = 12 + mlen;
    if bytes.len() < header_len {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: SrManifest = serde_json::from_slice(&bytes[12..header_len]).map_err(|_| corrupt("bad manifest"))?;
    let rl = record_len(manifest.dim);
    let body = &bytes[header_len..];
    if body.len() % rl != 0 {
        return Err(corrupt("truncated record"));
    }
    let records = body
        .chunks_exact(rl)
        .enumerate()
        .map(|(i, c)| ((header_len + i * rl) as u64, decode_record(c, manifest.dim)))
        .collect();
    Ok(RawFile { manifest, records })
}

fn write_header(path: &Path, manifest: &SrManifest) -> Result<()> {
    let json = serde_json::to_vec(manifest)?;
    let mut buf = MAGIC.to_vec();
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    fs::write(path, buf).at(path)
}

/// Extracts representations of every training image for every view in
/// `views`, reusing valid records already on disk. Fails before any
/// extraction when a view has no teacher.
pub fn build_cache(
    dir: &Path,
    views: &ViewRegistry,
    teachers: &BTreeMap<String, TeacherHandle<'_>>,
    images: &[Image],
    fingerprint: &str,
    norm: &InputNorm,
) -> Result<BuildStats> {
    for v in &views.views {
        if !teachers.contains_key(&v.name) {
            return Err(Error::Pipeline(format!("no teacher for view {}", v.name)));
        }
    }
    fs::create_dir_all(dir).at(dir)?;
    let mut stats = BuildStats::default();
    for spec in &views.views {
        let teacher = &teachers[&spec.name];
        let path = cache_file(dir, &spec.name);
        let manifest = SrManifest {
            teacher_id: spec.name.clone(),
            teacher_hash: teacher.hash.clone(),
            view: spec.clone(),
            dataset_fingerprint: fingerprint.to_string(),
            dim: teacher.dim,
        };
        let existing = match read_file(&path) {
            Ok(f) if f.manifest == manifest => Some(f),
            Ok(_) => {
                log::warn!("{} is stale; rebuilding it", path.display());
                None
            }
            Err(Error::Io { .. }) => None,
            Err(e) => {
                log::warn!("{e}; rebuilding");
                None
            }
        };
        let records = match existing {
            Some(f) => f.records,
            None => {
                write_header(&path, &manifest)?;
                Vec::new()
            }
        };
        let mut valid = vec![false; images.len()];
        let mut broken: Vec<u64> = Vec::new();
        for (offset, rec) in &records {
            match rec {
                Some((s, _)) if (*s as usize) < images.len() && !valid[*s as usize] => valid[*s as usize] = true,
                Some(_) => {}
                None => broken.push(*offset),
            }
        }
        let missing: Vec<usize> = (0..images.len()).filter(|&i| !valid[i]).collect();
        let computed = missing
            .par_iter()
            .map(|&i| {
                let v = generate_sr(teacher.model, &images[i], spec, norm)?;
                if v.len() != teacher.dim {
                    return Err(Error::Shape(format!(
                        "teacher {} emits {} dims, manifest says {}",
                        spec.name,
                        v.len(),
                        teacher.dim
                    )));
                }
                Ok((i as u64, v))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut file = OpenOptions::new().read(true).write(true).open(&path).at(&path)?;
        let mut slots = broken.into_iter();
        for (sample, v) in computed {
            let rec = encode_record(sample, &v);
            match slots.next() {
                Some(offset) => {
                    file.seek(SeekFrom::Start(offset)).at(&path)?;
                    stats.repaired += 1;
                }
                None => {
                    file.seek(SeekFrom::End(0)).at(&path)?;
                    stats.written += 1;
                }
            }
            file.write_all(&rec).at(&path)?;
        }
        file.sync_all().at(&path)?;
        stats.reused += valid.iter().filter(|&&v| v).count();
        if slots.next().is_some() {
            return Err(Error::Corrupt {
                path,
                reason: "corrupted records beyond the training set".into(),
            });
        }
    }
    Ok(stats)
}

struct ViewTable {
    manifest: SrManifest,
    rows: HashMap<u64, Vec<f32>>,
}

/// All supervisory representations of a run, loaded for reading.
pub struct SrCache {
    tables: BTreeMap<String, ViewTable>,
}

impl SrCache {
    /// Opens the files of `views`; refuses caches built on another dataset
    /// and files with checksum failures.
    pub fn open(dir: &Path, views: &ViewRegistry, fingerprint: &str) -> Result<Self> {
        let mut tables = BTreeMap::new();
        for spec in &views.views {
            let path = cache_file(dir, &spec.name);
            let raw = read_file(&path)?;
            if raw.manifest.dataset_fingerprint != fingerprint {
                return Err(Error::Provenance(format!(
                    "{} was built for dataset {}, not {fingerprint}",
                    path.display(),
                    raw.manifest.dataset_fingerprint
                )));
            }
            if raw.manifest.view != *spec {
                return Err(Error::Provenance(format!(
                    "{} was built for another view geometry",
                    path.display()
                )));
            }
            let mut rows = HashMap::with_capacity(raw.records.len());
            for (offset, rec) in raw.records {
                let (sample, v) = rec.ok_or_else(|| Error::Corrupt {
                    path: path.clone(),
                    reason: format!("checksum failure at byte {offset}"),
                })?;
                rows.insert(sample, v);
            }
            tables.insert(
                spec.name.clone(),
                ViewTable {
                    manifest: raw.manifest,
                    rows,
                },
            );
        }
        Ok(Self { tables })
    }

    pub fn read_sr(&self, sample_id: u64, view_id: &str) -> Result<&[f32]> {
        self.tables
            .get(view_id)
            .and_then(|t| t.rows.get(&sample_id))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingSr {
                sample_id,
                view_id: view_id.to_string(),
            })
    }

    pub fn manifest(&self, view_id: &str) -> Option<&SrManifest> {
        self.tables.get(view_id).map(|t| &t.manifest)
    }

    pub fn dim(&self, view_id: &str) -> Option<usize> {
        self.manifest(view_id).map(|m| m.dim)
    }

    pub fn entries(&self) -> usize {
        self.tables.values().map(|t| t.rows.len()).sum()
    }

    /// Checks that every sample in `0..samples` has a record for every view.
    pub fn check_complete(&self, samples: usize) -> Result<()> {
        for (view, t) in &self.tables {
            for s in 0..samples as u64 {
                if !t.rows.contains_key(&s) {
                    return Err(Error::MissingSr {
                        sample_id: s,
                        view_id: view.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Stacks the rows of `samples` for one view.
    pub fn batch(&self, samples: &[u64], view_id: &str) -> Result<ndarray::Array2<f64>> {
        let dim = self.dim(view_id).ok_or_else(|| Error::MissingSr {
            sample_id: samples.first().copied().unwrap_or(0),
            view_id: view_id.to_string(),
        })?;
        let mut out = ndarray::Array2::zeros((samples.len(), dim));
        for (i, &s) in samples.iter().enumerate() {
            let v = self.read_sr(s, view_id)?;
            out.row_mut(i).assign(&Array1::from_iter(v.iter().map(|&x| x as f64)));
        }
        Ok(out)
    }
}

/// SHA-256 over the cache files of `views`, in registry order.
pub fn cache_hash(dir: &Path, views: &ViewRegistry) -> Result<String> {
    let mut h = Sha256::new();
    for spec in &views.views {
        let path = cache_file(dir, &spec.name);
        let mut bytes = Vec::new();
        File::open(&path).at(&path)?.read_to_end(&mut bytes).at(&path)?;
        h.update(spec.name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netblocks::{Tensor2, Tensor4};
    use ndarray::{s, Array3};

    /// Reports the mean of the left and right image halves.
    struct HalfMeans;

    impl Embedder for HalfMeans {
        fn embed_batch(&self, x: &Tensor4) -> Tensor2 {
            let (n, _, _, w) = x.dim();
            let mut out = Tensor2::zeros((n, 2));
            for i in 0..n {
                out[[i, 0]] = x.slice(s![i, .., .., ..w / 2]).mean().unwrap();
                out[[i, 1]] = x.slice(s![i, .., .., w / 2..]).mean().unwrap();
            }
            out
        }
    }

    fn images(n: usize) -> Vec<Image> {
        (0..n)
            .map(|k| {
                Image::new(Array3::from_shape_fn((3, 14, 8), |(c, y, x)| {
                    ((c + y * 3 + x * k) % 11) as f32 / 10.0
                }))
            })
            .collect()
    }

    fn setup(dir: &Path, imgs: &[Image]) -> (ViewRegistry, BuildStats) {
        let views = ViewRegistry::with_resolutions((14, 8), (8, 8));
        let teachers: BTreeMap<_, _> = views
            .names()
            .into_iter()
            .map(|n| {
                (
                    n,
                    TeacherHandle {
                        model: &HalfMeans,
                        hash: "h".into(),
                        dim: 2,
                    },
                )
            })
            .collect();
        let stats = build_cache(dir, &views, &teachers, imgs, "fp", &InputNorm::IDENTITY).unwrap();
        (views, stats)
    }

    #[test]
    fn flip_average_example() {
        // Left half white, right half black: the flipped crop swaps the halves.
        let img = Image::new(Array3::from_shape_fn(
            (3, 4, 4),
            |(_, _, x)| if x < 2 { 1.0 } else { 0.0 },
        ));
        let spec = ViewSpec::new(
            "Holistic",
            crate::views::Fraction::ZERO,
            crate::views::Fraction::ONE,
            4,
            4,
        )
        .unwrap();
        let sr = generate_sr(&HalfMeans, &img, &spec, &InputNorm::IDENTITY).unwrap();
        assert_eq!(sr, vec![0.5, 0.5]);
        assert_eq!(sr, generate_sr(&HalfMeans, &img, &spec, &InputNorm::IDENTITY).unwrap());
    }

    #[test]
    fn build_counts_and_reuses() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = images(10);
        let (views, stats) = setup(dir.path(), &imgs);
        assert_eq!(stats.written, 70);
        let cache = SrCache::open(dir.path(), &views, "fp").unwrap();
        assert_eq!(cache.entries(), 70);
        let hash = cache_hash(dir.path(), &views).unwrap();
        let (_, again) = setup(dir.path(), &imgs);
        assert_eq!(
            again,
            BuildStats {
                written: 0,
                reused: 70,
                repaired: 0
            }
        );
        assert_eq!(cache_hash(dir.path(), &views).unwrap(), hash);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = images(4);
        let (views, _) = setup(dir.path(), &imgs);
        let cache = SrCache::open(dir.path(), &views, "fp").unwrap();
        for spec in &views.views {
            for (i, img) in imgs.iter().enumerate() {
                let direct = generate_sr(&HalfMeans, img, spec, &InputNorm::IDENTITY).unwrap();
                let stored = cache.read_sr(i as u64, &spec.name).unwrap();
                let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(stored), bits(&direct));
            }
        }
        assert!(matches!(
            cache.read_sr(99, "Up1"),
            Err(Error::MissingSr { sample_id: 99, .. })
        ));
    }

    #[test]
    fn repairs_exactly_the_corrupted_record() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = images(5);
        let (views, _) = setup(dir.path(), &imgs);
        let hash = cache_hash(dir.path(), &views).unwrap();
        let path = cache_file(dir.path(), "Mid2");
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0xff;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            SrCache::open(dir.path(), &views, "fp"),
            Err(Error::Corrupt { .. })
        ));
        let (_, stats) = setup(dir.path(), &imgs);
        assert_eq!(
            stats,
            BuildStats {
                written: 0,
                reused: 34,
                repaired: 1
            }
        );
        assert_eq!(cache_hash(dir.path(), &views).unwrap(), hash);
    }

    #[test]
    fn wrong_fingerprint_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let (views, _) = setup(dir.path(), &images(2));
        assert!(matches!(
            SrCache::open(dir.path(), &views, "other"),
            Err(Error::Provenance(_))
        ));
    }

    #[test]
    fn missing_teacher_fails_before_writing() {
        let dir = tempfile::tempdir().unwrap();
        let views = ViewRegistry::with_resolutions((14, 8), (8, 8));
        let teachers = BTreeMap::new();
        let err = build_cache(dir.path(), &views, &teachers, &images(2), "fp", &InputNorm::IDENTITY);
        assert!(matches!(err, Err(Error::Pipeline(_))));
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
