//! Retrieval metrics and the two-direction evaluation protocol.
//!
//! Rankings sort gallery items by descending cosine similarity; equal
//! scores are ordered by gallery index so results are deterministic.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{GeoLinkError, Result};
use crate::features::{l2_normalize, FeatureBatch, ViewTag};
use crate::image_encoder::{encode_images, EncoderParams, Image, ImageBatch};
use crate::synthetic::{Dataset, SceneTriplet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "d2s")]
    DroneToSatellite,
    #[serde(rename = "s2d")]
    SatelliteToDrone,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::DroneToSatellite => "d2s",
            Direction::SatelliteToDrone => "s2d",
        })
    }
}

impl FromStr for Direction {
    type Err = GeoLinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d2s" => Ok(Direction::DroneToSatellite),
            "s2d" => Ok(Direction::SatelliteToDrone),
            other => Err(GeoLinkError::ConfigError(format!("direction must be d2s or s2d, got {other}"))),
        }
    }
}

/// `Q×G` cosine similarities of L2-normalized rows.
pub fn similarity_matrix(queries: &FeatureBatch, gallery: &FeatureBatch) -> Result<Mat> {
    if queries.dim() != gallery.dim() {
        return Err(GeoLinkError::DimMismatch(format!(
            "query width {} vs gallery width {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    Ok(queries.values.dot(&gallery.values.t()))
}

/// Gallery indices ordered best first; ties go to the lower index.
pub fn ranking(scores: ndarray::ArrayView1<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_truth(sims: &Mat, ground_truth: &[Vec<usize>]) -> Result<()> {
    if ground_truth.len() != sims.nrows() {
        return Err(GeoLinkError::DimMismatch(format!(
            "{} ground-truth sets for {} queries",
            ground_truth.len(),
            sims.nrows()
        )));
    }
    for (q, gt) in ground_truth.iter().enumerate() {
        if gt.is_empty() || gt.iter().any(|&g| g >= sims.ncols()) {
            return Err(GeoLinkError::MissingGroundTruth(q));
        }
    }
    Ok(())
}

/// 1-based rank of the best-ranked relevant item for every query.
pub fn first_relevant_ranks(sims: &Mat, ground_truth: &[Vec<usize>]) -> Result<Vec<usize>> {
    check_truth(sims, ground_truth)?;
    Ok(sims
        .axis_iter(Axis(0))
        .zip(ground_truth)
        .map(|(row, gt)| {
            ranking(row)
                .iter()
                .position(|g| gt.contains(g))
                .expect("checked non-empty")
                + 1
        })
        .collect())
}

/// Fraction of queries with a relevant item among the top `k`.
pub fn recall_at_k(sims: &Mat, ground_truth: &[Vec<usize>], k: usize) -> Result<f64> {
    let ranks = first_relevant_ranks(sims, ground_truth)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len().max(1) as f64)
}

/// Average precision of one ranked list.
fn query_ap(order: &[usize], relevant: &[usize]) -> f64 {
    let mut hits = 0;
    let mut total = 0.0;
    for (i, g) in order.iter().enumerate() {
        if relevant.contains(g) {
            hits += 1;
            total += hits as f64 / (i + 1) as f64;
        }
    }
    total / relevant.len() as f64
}

/// Mean over queries of per-query average precision.
pub fn average_precision(sims: &Mat, ground_truth: &[Vec<usize>]) -> Result<f64> {
    check_truth(sims, ground_truth)?;
    let n = sims.nrows().max(1) as f64;
    Ok(sims
        .axis_iter(Axis(0))
        .zip(ground_truth)
        .map(|(row, gt)| {
            let mut relevant = gt.clone();
            relevant.sort_unstable();
            relevant.dedup();
            query_ap(&ranking(row), &relevant)
        })
        .sum::<f64>()
        / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub direction: Direction,
    pub recall_at: BTreeMap<usize, f64>,
    pub mean_ap: f64,
    pub per_query_ranks: Vec<usize>,
    pub n_query: usize,
    pub n_gallery: usize,
}

/// Metrics for already-computed, normalized features.
pub fn evaluate_features(
    queries: &FeatureBatch,
    gallery: &FeatureBatch,
    ground_truth: &[Vec<usize>],
    direction: Direction,
    ks: &[usize],
) -> Result<RetrievalResult> {
    if queries.is_empty() {
        return Err(GeoLinkError::EmptySplit("query".into()));
    }
    if gallery.is_empty() {
        return Err(GeoLinkError::EmptySplit("gallery".into()));
    }
    let sims = similarity_matrix(queries, gallery)?;
    let ranks = first_relevant_ranks(&sims, ground_truth)?;
    let n = ranks.len() as f64;
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    Ok(RetrievalResult {
        direction,
        recall_at,
        mean_ap: average_precision(&sims, ground_truth)?,
        per_query_ranks: ranks,
        n_query: queries.len(),
        n_gallery: gallery.len(),
    })
}

const CHUNK: usize = 64;

/// Encode and L2-normalize images in chunks.
pub fn embed_images(encoder: &EncoderParams, images: &[&Image], tag: ViewTag, ids: &[String]) -> Result<FeatureBatch> {
    let mut rows = Vec::with_capacity(images.len());
    for (imgs, chunk_ids) in images.chunks(CHUNK).zip(ids.chunks(CHUNK)) {
        let batch = ImageBatch::from_images(imgs, tag, chunk_ids.to_vec())?;
        rows.push(l2_normalize(&encode_images(encoder, &batch)?)?.values);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    let values = ndarray::concatenate(Axis(0), &views).map_err(|e| GeoLinkError::ShapeError(e.to_string()))?;
    FeatureBatch::new(values, tag, ids.to_vec())
}

type Views<'a> = (Vec<&'a Image>, Vec<String>);

fn drones<'a>(scenes: &[&'a SceneTriplet]) -> Views<'a> {
    scenes
        .iter()
        .flat_map(|t| t.drone_images.iter().map(|img| (img, t.scene_id.clone())))
        .unzip()
}

fn satellites<'a>(scenes: &[&'a SceneTriplet]) -> Views<'a> {
    scenes.iter().map(|t| (&t.satellite_image, t.scene_id.clone())).unzip()
}

/// Query and gallery features plus ground truth for one direction. Only
/// the 2D encoder is touched.
pub fn build_retrieval_sets(
    encoder: &EncoderParams,
    dataset: &Dataset,
    direction: Direction,
) -> Result<(FeatureBatch, FeatureBatch, Vec<Vec<usize>>)> {
    let query = dataset.split("query")?;
    let gallery = dataset.split("gallery")?;
    let ((qi, qid), qtag, (gi, gid), gtag) = match direction {
        Direction::DroneToSatellite => (drones(&query), ViewTag::Drone, satellites(&gallery), ViewTag::Satellite),
        Direction::SatelliteToDrone => (satellites(&query), ViewTag::Satellite, drones(&gallery), ViewTag::Drone),
    };
    let truth: Vec<Vec<usize>> = qid
        .iter()
        .enumerate()
        .map(|(q, id)| {
            let gt: Vec<usize> = gid.iter().enumerate().filter(|(_, g)| *g == id).map(|(j, _)| j).collect();
            if gt.is_empty() {
                Err(GeoLinkError::MissingGroundTruth(q))
            } else {
                Ok(gt)
            }
        })
        .collect::<Result<_>>()?;
    let q = embed_images(encoder, &qi, qtag, &qid)?;
    let g = embed_images(encoder, &gi, gtag, &gid)?;
    Ok((q, g, truth))
}

/// Evaluate the 2D encoder on the query/gallery splits of `dataset`.
pub fn evaluate(encoder: &EncoderParams, dataset: &Dataset, direction: Direction, ks: &[usize]) -> Result<RetrievalResult> {
    let (q, g, truth) = build_retrieval_sets(encoder, dataset, direction)?;
    evaluate_features(&q, &g, &truth, direction, ks)
}

/// Average several results of the same direction and K list (for example,
/// one per altitude or per seed). Per-query ranks are concatenated.
pub fn average_results(results: &[RetrievalResult]) -> Result<RetrievalResult> {
    let first = results
        .first()
        .ok_or_else(|| GeoLinkError::EmptySplit("results".into()))?;
    let n = results.len() as f64;
    let mut out = first.clone();
    for r in &results[1..] {
        if r.direction != first.direction || r.recall_at.keys().ne(first.recall_at.keys()) {
            return Err(GeoLinkError::ConfigError("cannot average results of different shape".into()));
        }
        for (k, v) in &r.recall_at {
            *out.recall_at.get_mut(k).expect("same keys") += v;
        }
        out.mean_ap += r.mean_ap;
        out.per_query_ranks.extend(&r.per_query_ranks);
        out.n_query += r.n_query;
        out.n_gallery = out.n_gallery.max(r.n_gallery);
    }
    out.recall_at.values_mut().for_each(|v| *v /= n);
    out.mean_ap /= n;
    Ok(out)
}

/// One flat output row per K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub direction: Direction,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "R@K")]
    pub recall: f64,
    #[serde(rename = "AP")]
    pub ap: f64,
    pub n_query: usize,
    pub n_gallery: usize,
    pub config_hash: String,
}

impl RetrievalResult {
    pub fn records(&self, config_hash: &str) -> Vec<ResultRecord> {
        self.recall_at
            .iter()
            .map(|(&k, &recall)| ResultRecord {
                direction: self.direction,
                k,
                recall,
                ap: self.mean_ap,
                n_query: self.n_query,
                n_gallery: self.n_gallery,
                config_hash: config_hash.to_string(),
            })
            .collect()
    }
}

pub fn write_records_json(path: &Path, records: &[ResultRecord]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(records)?)?;
    Ok(())
}

/// One row per `(label, direction)` with a column per K and the AP, in
/// percent, like a results table.
pub fn write_aggregate_csv(path: &Path, rows: &[(String, RetrievalResult)]) -> Result<()> {
    let ks: Vec<usize> = rows
        .iter()
        .flat_map(|(_, r)| r.recall_at.keys().copied())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["config".to_string(), "direction".to_string()];
    header.extend(ks.iter().map(|k| format!("R@{k}")));
    header.push("AP".into());
    w.write_record(&header).map_err(csv_err)?;
    for (label, r) in rows {
        let mut rec = vec![label.clone(), r.direction.to_string()];
        rec.extend(
            ks.iter()
                .map(|k| r.recall_at.get(k).map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_default()),
        );
        rec.push(format!("{:.2}", 100.0 * r.mean_ap));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| GeoLinkError::ConfigError(e.to_string()))?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> GeoLinkError {
    GeoLinkError::ConfigError(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fb(v: Mat) -> FeatureBatch {
        FeatureBatch::unlabelled(v, ViewTag::Drone).unwrap()
    }

    #[test]
    fn cosine_entries() {
        let s = similarity_matrix(&fb(array![[1.0, 0.0]]), &fb(array![[0.0, 1.0], [1.0, 0.0]])).unwrap();
        assert_eq!(s, array![[0.0, 1.0]]);
        assert!(similarity_matrix(&fb(array![[1.0]]), &fb(array![[1.0, 0.0]])).is_err());
    }

    #[test]
    fn ties_prefer_lower_index() {
        assert_eq!(ranking(array![0.5, 0.9, 0.5, 0.9].view()), vec![1, 3, 0, 2]);
    }

    #[test]
    fn ap_examples() {
        let sims = array![[0.9, 0.8, 0.7, 0.6, 0.5]];
        assert_eq!(average_precision(&sims, &[vec![0]]).unwrap(), 1.0);
        assert_eq!(average_precision(&sims, &[vec![3]]).unwrap(), 0.25);
        let two = average_precision(&sims, &[vec![0, 2]]).unwrap();
        assert!((two - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn recall_edges() {
        let sims = array![[0.1, 0.9], [0.3, 0.2]];
        let gt = vec![vec![1], vec![0]];
        assert_eq!(recall_at_k(&sims, &gt, 1).unwrap(), 1.0);
        assert_eq!(recall_at_k(&sims, &[vec![0], vec![1]], 2).unwrap(), 1.0);
        assert_eq!(recall_at_k(&sims, &[vec![0], vec![1]], 1).unwrap(), 0.0);
        assert!(matches!(
            recall_at_k(&sims, &[vec![0], vec![]], 1),
            Err(GeoLinkError::MissingGroundTruth(1))
        ));
    }

    #[test]
    fn averaging() {
        let mk = |r1: f64, ap: f64| RetrievalResult {
            direction: Direction::DroneToSatellite,
            recall_at: BTreeMap::from([(1, r1)]),
            mean_ap: ap,
            per_query_ranks: vec![1],
            n_query: 1,
            n_gallery: 3,
        };
        let avg = average_results(&[mk(1.0, 0.5), mk(0.0, 0.25)]).unwrap();
        assert_eq!(avg.recall_at[&1], 0.5);
        assert_eq!(avg.mean_ap, 0.375);
    }

    #[test]
    fn direction_parsing() {
        assert_eq!("s2d".parse::<Direction>().unwrap(), Direction::SatelliteToDrone);
        assert!("x".parse::<Direction>().is_err());
        assert_eq!(serde_json::to_string(&Direction::DroneToSatellite).unwrap(), "\"d2s\"");
    }

    #[test]
    fn record_schema() {
        let r = RetrievalResult {
            direction: Direction::SatelliteToDrone,
            recall_at: BTreeMap::from([(1, 0.5), (5, 1.0)]),
            mean_ap: 0.7,
            per_query_ranks: vec![1, 2],
            n_query: 2,
            n_gallery: 8,
        };
        let v = serde_json::to_value(r.records("abc")).unwrap();
        assert_eq!(v[1]["K"], 5);
        assert_eq!(v[1]["R@K"], 1.0);
        assert_eq!(v[0]["direction"], "s2d");
        assert_eq!(v[0]["config_hash"], "abc");
    }
}
