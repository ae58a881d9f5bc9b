//! Retrieval evaluation: flip-averaged features, cosine ranking, Rank-1
//! and mean average precision.
//!
//! Per query, gallery entries with the same identity *and* camera are
//! excluded, as are junk entries (identity -1). Distractors (any other
//! identity, including 0) count as negatives. Queries without a relevant
//! gallery entry are skipped and reported.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, SampleRecord, JUNK_IDENTITY};
use crate::features::{flip_averaged, Embedder, InputNorm};
use crate::image::Image;
use crate::views::{crop_view, ViewSpec};
use crate::{Error, Result};

/// Test feature of a raw image: the holistic crop, flip-averaged.
pub fn test_feature<E: Embedder + ?Sized>(
    model: &E,
    image: &Image,
    holistic: &ViewSpec,
    norm: &InputNorm,
) -> Result<Array1<f64>> {
    Ok(flip_averaged(model, &crop_view(image, holistic)?, norm))
}

pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.len(), b.len())));
    }
    let sa = a.iter().map(|v| v * v).sum::<f64>();
    let sb = b.iter().map(|v| v * v).sum::<f64>();
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (sa * sb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Standard,
    /// Same ranking rules; the model was trained on another dataset.
    CrossDataset,
}

/// Features with identity and camera labels, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GalleryIndex {
    pub features: Array2<f64>,
    pub identities: Vec<i64>,
    pub cameras: Vec<u32>,
}

impl GalleryIndex {
    pub fn new(features: Array2<f64>, identities: Vec<i64>, cameras: Vec<u32>) -> Result<Self> {
        if identities.len() != features.nrows() || cameras.len() != features.nrows() {
            return Err(Error::Shape("index labels do not match feature rows".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("index holds non-finite features".into()));
        }
        Ok(Self {
            features,
            identities,
            cameras,
        })
    }

    /// Extracts test features for every record with `model`.
    pub fn extract<E: Embedder + ?Sized>(
        model: &E,
        images: &[Image],
        records: &[SampleRecord],
        holistic: &ViewSpec,
        norm: &InputNorm,
    ) -> Result<Self> {
        let rows = images
            .par_iter()
            .map(|img| test_feature(model, img, holistic, norm))
            .collect::<Result<Vec<_>>>()?;
        let dim = rows.first().map_or(0, |r| r.len());
        let mut features = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            features.row_mut(i).assign(r);
        }
        Self::new(
            features,
            records.iter().map(|r| r.identity).collect(),
            records.iter().map(|r| r.camera).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: usize,
    /// Gallery indices after exclusions, best first.
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub average_precision: f64,
    pub top1_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub protocol: Protocol,
    pub rank1: f64,
    pub map: f64,
    pub evaluated: usize,
    /// Queries without any relevant gallery entry.
    pub skipped: Vec<usize>,
    pub queries: Vec<QueryRanking>,
}

/// Average precision of a ranked relevance list (non-interpolated).
fn average_precision(relevant: &[bool]) -> f64 {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, _) in relevant.iter().enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (i + 1) as f64;
    }
    sum / total as f64
}

pub fn evaluate(queries: &GalleryIndex, gallery: &GalleryIndex, protocol: Protocol) -> Result<RankingResult> {
    if queries.features.ncols() != gallery.features.ncols() && !gallery.is_empty() && !queries.is_empty() {
        return Err(Error::Shape("query and gallery dims differ".into()));
    }
    let per_query = (0..queries.len())
        .into_par_iter()
        .map(|q| -> Result<Option<QueryRanking>> {
            let (qid, qcam) = (queries.identities[q], queries.cameras[q]);
            let qf = queries.features.row(q);
            let mut ranked = Vec::new();
            for g in 0..gallery.len() {
                let gid = gallery.identities[g];
                if gid == JUNK_IDENTITY || (gid == qid && gallery.cameras[g] == qcam) {
                    continue;
                }
                let score = cosine_score(
                    qf.as_slice().expect("contiguous row"),
                    gallery.features.row(g).as_slice().expect("contiguous row"),
                )?;
                ranked.push((g, score));
            }
            // Stable: equal scores keep gallery order.
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            let relevant: Vec<bool> = ranked.iter().map(|&(g, _)| gallery.identities[g] == qid).collect();
            if !relevant.contains(&true) {
                return Ok(None);
            }
            Ok(Some(QueryRanking {
                query: q,
                average_precision: average_precision(&relevant),
                top1_correct: relevant[0],
                order: ranked.iter().map(|r| r.0).collect(),
                scores: ranked.iter().map(|r| r.1).collect(),
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    let skipped: Vec<usize> = per_query
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_none())
        .map(|(q, _)| q)
        .collect();
    if !skipped.is_empty() {
        log::warn!(
            "{} queries have no relevant gallery entry and were skipped",
            skipped.len()
        );
    }
    let rankings: Vec<QueryRanking> = per_query.into_iter().flatten().collect();
    let n = rankings.len();
    let (rank1, map) = if n == 0 {
        (0.0, 0.0)
    } else {
        (
            rankings.iter().filter(|r| r.top1_correct).count() as f64 / n as f64,
            rankings.iter().map(|r| r.average_precision).sum::<f64>() / n as f64,
        )
    };
    Ok(RankingResult {
        protocol,
        rank1,
        map,
        evaluated: n,
        skipped,
        queries: rankings,
    })
}

/// Summary row for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub protocol: Protocol,
    pub rank1: f64,
    pub map: f64,
    pub queries: usize,
    pub evaluated: usize,
    pub skipped: usize,
}

impl EvalReport {
    pub fn new(model: &str, dataset: &str, r: &RankingResult) -> Self {
        Self {
            model: model.into(),
            dataset: dataset.into(),
            protocol: r.protocol,
            rank1: r.rank1,
            map: r.map,
            queries: r.evaluated + r.skipped.len(),
            evaluated: r.evaluated,
            skipped: r.skipped.len(),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "model {} on {} ({:?}): Rank-1 {:.2}%  mAP {:.2}%  ({} of {} queries evaluated)\n",
            self.model,
            self.dataset,
            self.protocol,
            100.0 * self.rank1,
            100.0 * self.map,
            self.evaluated,
            self.queries
        )
    }
}

/// Extracts query and gallery features of `dataset` with `model` and ranks.
pub fn evaluate_dataset<E: Embedder + ?Sized>(
    model: &E,
    dataset: &Dataset,
    holistic: &ViewSpec,
    norm: &InputNorm,
    protocol: Protocol,
) -> Result<RankingResult> {
    let q = GalleryIndex::extract(model, &dataset.query, &dataset.manifest.query, holistic, norm)?;
    let g = GalleryIndex::extract(model, &dataset.gallery, &dataset.manifest.gallery, holistic, norm)?;
    evaluate(&q, &g, protocol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        assert_eq!(cosine_score(&[1.0, -2.0], &[-1.0, 2.0]).unwrap(), -1.0);
        assert!(matches!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn ap_example() {
        let ap = average_precision(&[true, false, true, false, false]);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking() {
        let q = GalleryIndex::new(array![[1.0, 0.0], [0.0, 1.0]], vec![1, 2], vec![1, 1]).unwrap();
        let g = GalleryIndex::new(
            array![[1.0, 0.1], [0.1, 1.0], [0.9, 0.0], [0.5, 0.5]],
            vec![1, 2, 1, JUNK_IDENTITY],
            vec![2, 2, 3, 2],
        )
        .unwrap();
        let r = evaluate(&q, &g, Protocol::Standard).unwrap();
        assert_eq!((r.rank1, r.map), (1.0, 1.0));
        assert!(r.queries.iter().all(|q| !q.order.contains(&3)));
    }

    #[test]
    fn same_camera_matches_are_excluded_and_unmatched_queries_skipped() {
        let q = GalleryIndex::new(array![[1.0, 0.0], [0.0, 1.0]], vec![1, 5], vec![1, 1]).unwrap();
        let g = GalleryIndex::new(array![[1.0, 0.0], [0.8, 0.2]], vec![1, 1], vec![1, 2]).unwrap();
        let r = evaluate(&q, &g, Protocol::Standard).unwrap();
        assert_eq!(r.skipped, vec![1]);
        assert_eq!(r.evaluated, 1);
        assert_eq!(r.queries[0].order, vec![1]);
    }

    #[test]
    fn ties_keep_gallery_order() {
        let q = GalleryIndex::new(array![[1.0, 0.0]], vec![1], vec![1]).unwrap();
        let g = GalleryIndex::new(array![[2.0, 0.0], [1.0, 0.0], [3.0, 0.0]], vec![3, 1, 2], vec![2, 2, 2]).unwrap();
        let r = evaluate(&q, &g, Protocol::Standard).unwrap();
        assert_eq!(r.queries[0].order, vec![0, 1, 2]);
        assert_eq!(r.rank1, 0.0);
        assert!((r.map - 0.5).abs() < 1e-15);
    }
}
