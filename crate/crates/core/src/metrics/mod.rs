//! Retrieval evaluation for person re-identification.
//!
//! Each query is ranked against the gallery once ([`evaluate`]); the
//! per-query outcomes then feed the system-wide scores (mAP, CMC) and the
//! per-camera ones:
//!
//! * query-mAP of camera `c`: mean AP over queries captured by `c`, ranked
//!   against the full gallery;
//! * gallery-mAP of camera `c`: mean AP over queries with at least one valid
//!   positive captured by `c`, after removing every positive captured by
//!   another camera from the ranked list.

mod report;


use std::fmt;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Exec};

pub use report::{
    imbalance_report, CameraEntry, GlobalScores, PerCameraReport, Report, ReportTable, Weakest,
    WeakestEntry,
};

pub type CameraId = u32;
pub type PersonId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Query,
    Gallery,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub person_id: PersonId,
    pub camera_id: CameraId,
    pub split: Split,
    pub vector: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(person_id: PersonId, camera_id: CameraId, split: Split, vector: Vec<f64>) -> Self {
        EmbeddingRecord {
            person_id,
            camera_id,
            split,
            vector,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; zero vectors have similarity 0.
    Cosine,
}

impl std::str::FromStr for Distance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Distance::Euclidean),
            "cosine" => Ok(Distance::Cosine),
            other => Err(Error::invalid(format!("unknown distance {other:?}"))),
        }
    }
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Euclidean => "euclidean",
            Distance::Cosine => "cosine",
        })
    }
}

impl Distance {
    /// A value monotone in the distance; Euclidean is left squared.
    pub fn rank_key(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalProtocol {
    pub distance: Distance,
    /// Gallery items sharing both identity and camera with the query are junk.
    pub cross_camera_only: bool,
}

impl Default for RetrievalProtocol {
    fn default() -> Self {
        RetrievalProtocol {
            distance: Distance::Euclidean,
            cross_camera_only: true,
        }
    }
}

impl RetrievalProtocol {
    pub fn is_junk(&self, query: &EmbeddingRecord, item: &EmbeddingRecord) -> bool {
        self.cross_camera_only
            && item.person_id == query.person_id
            && item.camera_id == query.camera_id
    }
}

fn check_dims(query: &EmbeddingRecord, gallery: &[EmbeddingRecord]) -> Result<()> {
    let d = query.vector.len();
    if let Some((i, g)) = gallery.iter().enumerate().find(|(_, g)| g.vector.len() != d) {
        return Err(Error::invalid(format!(
            "dimension mismatch: query has {d}, gallery item {i} has {}",
            g.vector.len()
        )));
    }
    Ok(())
}

/// Gallery indices by ascending distance, junk removed, ties in input order.
pub fn rank_gallery(
    query: &EmbeddingRecord,
    gallery: &[EmbeddingRecord],
    protocol: &RetrievalProtocol,
) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::Empty("gallery".into()));
    }
    check_dims(query, gallery)?;
    let mut keyed: Vec<(f64, usize)> = gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| !protocol.is_junk(query, g))
        .map(|(i, g)| (protocol.distance.rank_key(&query.vector, &g.vector), i))
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(keyed.into_iter().map(|(_, i)| i).collect())
}

/// Mean over positives of `(positives so far) / rank`.
pub fn average_precision(ranked_positive: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &pos) in ranked_positive.iter().enumerate() {
        if pos {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoPositives);
    }
    Ok(sum / hits as f64)
}

/// Everything the aggregate metrics need from one ranked query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    pub camera: CameraId,
    /// `None` when the query has no valid positive in the gallery.
    pub ap: Option<f64>,
    /// 1-based rank of the first valid positive.
    pub first_hit: Option<usize>,
    /// AP against the gallery restricted to each camera's positives, for every
    /// camera holding at least one valid positive.
    pub gallery_ap: Vec<(CameraId, f64)>,
}

pub fn evaluate_query(
    query: &EmbeddingRecord,
    gallery: &[EmbeddingRecord],
    protocol: &RetrievalProtocol,
) -> Result<QueryOutcome> {
    let ranked = rank_gallery(query, gallery, protocol)?;
    let positive: Vec<bool> = ranked
        .iter()
        .map(|&i| gallery[i].person_id == query.person_id)
        .collect();
    let ap = average_precision(&positive).ok();
    let first_hit = positive.iter().position(|p| *p).map(|r| r + 1);
    let cams: BTreeSet<CameraId> = ranked
        .iter()
        .zip(&positive)
        .filter(|(_, p)| **p)
        .map(|(&i, _)| gallery[i].camera_id)
        .collect();
    let gallery_ap = cams
        .into_iter()
        .map(|c| {
            // drop positives from other cameras; keep negatives and camera-c positives
            let mask: Vec<bool> = ranked
                .iter()
                .zip(&positive)
                .filter(|(&i, &p)| !p || gallery[i].camera_id == c)
                .map(|(_, &p)| p)
                .collect();
            (c, average_precision(&mask).expect("camera has a positive"))
        })
        .collect();
    Ok(QueryOutcome {
        camera: query.camera_id,
        ap,
        first_hit,
        gallery_ap,
    })
}

/// A per-camera mean and how many queries it averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraScore {
    pub value: f64,
    pub num_queries: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Queries with no valid positive, excluded from every metric.
    pub excluded_queries: usize,
    /// Query cameras whose queries were all excluded (absent from query-mAP).
    pub cameras_without_queries: Vec<CameraId>,
    /// Cameras seen in the data with an empty gallery-mAP query set.
    pub cameras_without_gallery_queries: Vec<CameraId>,
}

/// Ranked outcomes of a query set against one gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub outcomes: Vec<QueryOutcome>,
    cameras: BTreeSet<CameraId>,
}

/// Ranks every query; queries are independent and run under `exec`.
pub fn evaluate(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    protocol: &RetrievalProtocol,
    exec: Exec,
) -> Result<Evaluation> {
    let outcomes = exec::map_indexed(exec, queries.len(), |i| {
        evaluate_query(&queries[i], gallery, protocol)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let cameras = queries
        .iter()
        .chain(gallery)
        .map(|r| r.camera_id)
        .collect();
    Ok(Evaluation { outcomes, cameras })
}

impl Evaluation {
    fn retained(&self) -> impl Iterator<Item = &QueryOutcome> {
        self.outcomes.iter().filter(|o| o.ap.is_some())
    }

    fn require_retained(&self) -> Result<usize> {
        match self.retained().count() {
            0 => Err(Error::Empty("no query has a valid positive".into())),
            n => Ok(n),
        }
    }

    pub fn mean_ap(&self) -> Result<f64> {
        let n = self.require_retained()?;
        Ok(self.retained().filter_map(|o| o.ap).sum::<f64>() / n as f64)
    }

    /// Fraction of retained queries whose first positive is within the top `k`.
    pub fn cmc(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::invalid("rank k must be at least 1"));
        }
        let n = self.require_retained()?;
        let hits = self
            .retained()
            .filter(|o| o.first_hit.is_some_and(|r| r <= k))
            .count();
        Ok(hits as f64 / n as f64)
    }

    pub fn query_map_per_camera(&self) -> BTreeMap<CameraId, CameraScore> {
        let mut acc: BTreeMap<CameraId, (f64, usize)> = BTreeMap::new();
        for o in self.retained() {
            let e = acc.entry(o.camera).or_default();
            e.0 += o.ap.unwrap_or_default();
            e.1 += 1;
        }
        finish(acc)
    }

    pub fn gallery_map_per_camera(&self) -> BTreeMap<CameraId, CameraScore> {
        let mut acc: BTreeMap<CameraId, (f64, usize)> = BTreeMap::new();
        for o in &self.outcomes {
            for &(c, ap) in &o.gallery_ap {
                let e = acc.entry(c).or_default();
                e.0 += ap;
                e.1 += 1;
            }
        }
        finish(acc)
    }

    pub fn diagnostics(&self) -> Diagnostics {
        let q = self.query_map_per_camera();
        let g = self.gallery_map_per_camera();
        let query_cams: BTreeSet<CameraId> = self.outcomes.iter().map(|o| o.camera).collect();
        Diagnostics {
            excluded_queries: self.outcomes.iter().filter(|o| o.ap.is_none()).count(),
            cameras_without_queries: query_cams
                .into_iter()
                .filter(|c| !q.contains_key(c))
                .collect(),
            cameras_without_gallery_queries: self
                .cameras
                .iter()
                .copied()
                .filter(|c| !g.contains_key(c))
                .collect(),
        }
    }
}

fn finish(acc: BTreeMap<CameraId, (f64, usize)>) -> BTreeMap<CameraId, CameraScore> {
    acc.into_iter()
        .map(|(c, (sum, n))| {
            (
                c,
                CameraScore {
                    value: sum / n as f64,
                    num_queries: n,
                },
            )
        })
        .collect()
}

pub fn mean_ap(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord], protocol: &RetrievalProtocol) -> Result<f64> {
    evaluate(queries, gallery, protocol, Exec::default())?.mean_ap()
}

pub fn cmc_rank_k(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    protocol: &RetrievalProtocol,
    k: usize,
) -> Result<f64> {
    evaluate(queries, gallery, protocol, Exec::default())?.cmc(k)
}

pub fn query_map_per_camera(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    protocol: &RetrievalProtocol,
) -> Result<BTreeMap<CameraId, CameraScore>> {
    Ok(evaluate(queries, gallery, protocol, Exec::default())?.query_map_per_camera())
}

pub fn gallery_map_per_camera(
    queries: &[EmbeddingRecord],
    gallery: &[EmbeddingRecord],
    protocol: &RetrievalProtocol,
) -> Result<BTreeMap<CameraId, CameraScore>> {
    Ok(evaluate(queries, gallery, protocol, Exec::default())?.gallery_map_per_camera())
}

#[cfg(test)]
mod tests;
