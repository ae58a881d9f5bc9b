//! Market-1501 directory layout: `bounding_box_train/`, `query/` and
//! `bounding_box_test/` holding files named `<identity>_c<camera>...`.
//! DukeMTMC-reID and the CUHK03 new protocol use the same prefix and are
//! parsed by the same rules.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{fingerprint, DatasetManifest, SampleRecord, JUNK_IDENTITY};
use crate::error::IoContext;
use crate::{Error, Result};

pub const TRAIN_DIR: &str = "bounding_box_train";
pub const QUERY_DIR: &str = "query";
pub const GALLERY_DIR: &str = "bounding_box_test";

const IMAGE_EXTENSIONS: [&str; 4] = ["jpg", "jpeg", "png", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedName {
    pub identity: i64,
    pub camera: u32,
    pub sequence: u32,
    pub frame: u32,
    pub index: u32,
}

/// Parses `<identity>_c<camera>[s<sequence>]_<frame>_<index>.<ext>`. Only
/// identity and camera are required.
pub fn parse_name(file_name: &str) -> Option<ParsedName> {
    let stem = file_name.rsplit_once('.').map_or(file_name, |(s, _)| s);
    let mut parts = stem.split('_');
    let identity: i64 = parts.next()?.parse().ok()?;
    let cam_part = parts.next()?.strip_prefix('c')?;
    let digits = cam_part.find(|c: char| !c.is_ascii_digit()).unwrap_or(cam_part.len());
    let camera: u32 = cam_part[..digits].parse().ok()?;
    let sequence = match cam_part[digits..].strip_prefix('s') {
        Some(s) => s.parse().ok()?,
        None if cam_part.len() == digits => 0,
        None => return None,
    };
    let frame = parts
        .next()
        .map_or(Some(0), |p| p.trim_start_matches('f').parse().ok())?;
    let index = parts.next().map_or(Some(0), |p| p.parse().ok())?;
    Some(ParsedName {
        identity,
        camera,
        sequence,
        frame,
        index,
    })
}

pub fn format_name(n: &ParsedName, ext: &str) -> String {
    let id = if n.identity < 0 {
        n.identity.to_string()
    } else {
        format!("{:04}", n.identity)
    };
    format!("{id}_c{}s{}_{:06}_{:02}.{ext}", n.camera, n.sequence, n.frame, n.index)
}

fn scan(root: &Path, dir: &str, rejects: &mut Vec<String>) -> Result<Vec<SampleRecord>> {
    let path = root.join(dir);
    let mut names: Vec<String> = fs::read_dir(&path)
        .at(&path)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()
        .at(&path)?;
    names.sort();
    let mut records = Vec::new();
    for name in names {
        let is_image = name
            .rsplit_once('.')
            .is_some_and(|(_, ext)| IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()));
        if !is_image {
            continue;
        }
        match parse_name(&name) {
            Some(p) => records.push(SampleRecord {
                path: format!("{dir}/{name}"),
                identity: p.identity,
                camera: p.camera,
                label: None,
                junk: p.identity == JUNK_IDENTITY,
            }),
            None => rejects.push(format!("{dir}/{name}")),
        }
    }
    if records.is_empty() {
        return Err(Error::Dataset(format!(
            "split directory {} has no usable images",
            path.display()
        )));
    }
    Ok(records)
}

/// Builds a manifest from a Market-1501 style tree. Training identities are
/// re-indexed contiguously in ascending order; junk training images are
/// dropped.
pub fn ingest(root: &Path, name: &str) -> Result<DatasetManifest> {
    let mut rejects = Vec::new();
    let mut train = scan(root, TRAIN_DIR, &mut rejects)?;
    let query = scan(root, QUERY_DIR, &mut rejects)?;
    let gallery = scan(root, GALLERY_DIR, &mut rejects)?;
    train.retain(|r| !r.junk);
    let ids: BTreeMap<i64, usize> = train
        .iter()
        .map(|r| r.identity)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id, i))
        .collect();
    for r in &mut train {
        r.label = Some(ids[&r.identity]);
    }
    if !rejects.is_empty() {
        log::warn!("{} files did not match the naming scheme", rejects.len());
    }
    let all: Vec<&SampleRecord> = train.iter().chain(&query).chain(&gallery).collect();
    let fingerprint = fingerprint(root, &all)?;
    Ok(DatasetManifest {
        name: name.to_string(),
        num_classes: ids.len(),
        train,
        query,
        gallery,
        rejects,
        fingerprint,
        synthetic: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_market_names() {
        let p = parse_name("0001_c1s1_000151_00.jpg").unwrap();
        assert_eq!((p.identity, p.camera, p.sequence, p.frame, p.index), (1, 1, 1, 151, 0));
        let junk = parse_name("-1_c3s2_000301_01.jpg").unwrap();
        assert_eq!(junk.identity, JUNK_IDENTITY);
        assert_eq!(junk.camera, 3);
    }

    #[test]
    fn parses_duke_names() {
        let p = parse_name("0005_c2_f0046985.jpg").unwrap();
        assert_eq!((p.identity, p.camera, p.frame), (5, 2, 46985));
    }

    #[test]
    fn rejects_malformed_names() {
        assert!(parse_name("Thumbs.db").is_none());
        assert!(parse_name("abc_c1s1_000151_00.jpg").is_none());
        assert!(parse_name("0001_x1s1_000151_00.jpg").is_none());
    }

    fn touch(root: &Path, rel: &str) {
        let p = root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, rel.as_bytes()).unwrap();
    }

    #[test]
    fn ingest_reindexes_and_reports_rejects() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        touch(root, "bounding_box_train/0007_c1s1_000001_00.jpg");
        touch(root, "bounding_box_train/0002_c2s1_000001_00.jpg");
        touch(root, "bounding_box_train/0007_c2s1_000002_00.jpg");
        touch(root, "bounding_box_train/oops.jpg");
        touch(root, "query/0003_c1s1_000001_00.jpg");
        touch(root, "bounding_box_test/-1_c1s1_000001_00.jpg");
        touch(root, "bounding_box_test/0003_c2s1_000001_00.jpg");
        let m = ingest(root, "toy").unwrap();
        assert_eq!(m.num_classes, 2);
        let labels: Vec<_> = m.train.iter().map(|r| (r.identity, r.label.unwrap())).collect();
        assert_eq!(labels, vec![(2, 0), (7, 1), (7, 1)]);
        assert_eq!(m.rejects, vec!["bounding_box_train/oops.jpg".to_string()]);
        assert!(m.gallery[0].junk);
        assert_eq!(m.fingerprint, ingest(root, "toy").unwrap().fingerprint);
        touch(root, "query/0003_c1s1_000001_00.jpg");
        fs::write(root.join("query/0003_c1s1_000001_00.jpg"), b"changed").unwrap();
        assert_ne!(m.fingerprint, ingest(root, "toy").unwrap().fingerprint);
    }

    #[test]
    fn empty_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "bounding_box_train/0001_c1s1_000001_00.jpg");
        fs::create_dir_all(dir.path().join(QUERY_DIR)).unwrap();
        touch(dir.path(), "bounding_box_test/0001_c2s1_000001_00.jpg");
        assert!(matches!(ingest(dir.path(), "x"), Err(Error::Dataset(_))));
    }

    proptest! {
        #[test]
        fn format_then_parse_round_trips(
            identity in -1i64..100_000, camera in 1u32..10, sequence in 0u32..10,
            frame in 0u32..1_000_000, index in 0u32..100,
        ) {
            let n = ParsedName { identity, camera, sequence, frame, index };
            prop_assert_eq!(parse_name(&format_name(&n, "jpg")), Some(n));
        }
    }
}
