use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CameraId, Diagnostics, Evaluation};
use crate::error::{Error, Result};

/// Weakest / average / spread of the per-camera scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PerCameraReport {
    pub q_map: BTreeMap<CameraId, f64>,
    pub g_map: BTreeMap<CameraId, f64>,
    pub weakest_q: (CameraId, f64),
    pub weakest_g: (CameraId, f64),
    pub mean_q: f64,
    pub mean_g: f64,
    /// Population standard deviations.
    pub spread_q: f64,
    pub spread_g: f64,
}

struct Stats {
    weakest: (CameraId, f64),
    mean: f64,
    std: f64,
}

fn stats(values: &BTreeMap<CameraId, f64>, what: &str) -> Result<Stats> {
    let mut it = values.iter();
    let (&c0, &v0) = it
        .next()
        .ok_or_else(|| Error::Empty(format!("{what} per-camera map")))?;
    // strict comparison keeps the lowest camera id on ties
    let weakest = it.fold((c0, v0), |w, (&c, &v)| if v < w.1 { (c, v) } else { w });
    let n = values.len() as f64;
    // shifted by the minimum so constant inputs give their value exactly
    let mean = weakest.1 + values.values().map(|v| v - weakest.1).sum::<f64>() / n;
    let var = values.values().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Stats {
        weakest,
        mean,
        std: var.sqrt(),
    })
}

pub fn imbalance_report(
    q_map: &BTreeMap<CameraId, f64>,
    g_map: &BTreeMap<CameraId, f64>,
) -> Result<PerCameraReport> {
    let q = stats(q_map, "query-mAP")?;
    let g = stats(g_map, "gallery-mAP")?;
    Ok(PerCameraReport {
        q_map: q_map.clone(),
        g_map: g_map.clone(),
        weakest_q: q.weakest,
        weakest_g: g.weakest,
        mean_q: q.mean,
        mean_g: g.mean,
        spread_q: q.std,
        spread_g: g.std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub q_map: Option<f64>,
    pub g_map: Option<f64>,
    /// Queries behind the query-mAP value, when known.
    #[serde(default)]
    pub num_queries: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalScores {
    pub map: f64,
    pub rank1: f64,
}

/// Per-camera scores before summarizing; also the input of `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub method: String,
    pub per_camera: BTreeMap<CameraId, CameraEntry>,
    #[serde(default)]
    pub global: Option<GlobalScores>,
    #[serde(default)]
    pub diagnostics: Option<Diagnostics>,
}

impl ReportTable {
    pub fn from_evaluation(eval: &Evaluation, dataset: &str, method: &str) -> Result<Self> {
        let q = eval.query_map_per_camera();
        let g = eval.gallery_map_per_camera();
        let mut per_camera = BTreeMap::new();
        for c in q.keys().chain(g.keys()) {
            per_camera.insert(
                *c,
                CameraEntry {
                    q_map: q.get(c).map(|s| s.value),
                    g_map: g.get(c).map(|s| s.value),
                    num_queries: q.get(c).map(|s| s.num_queries),
                },
            );
        }
        Ok(ReportTable {
            dataset: dataset.to_string(),
            method: method.to_string(),
            per_camera,
            global: Some(GlobalScores {
                map: eval.mean_ap()?,
                rank1: eval.cmc(1)?,
            }),
            diagnostics: Some(eval.diagnostics()),
        })
    }

    pub fn q_map(&self) -> BTreeMap<CameraId, f64> {
        self.per_camera
            .iter()
            .filter_map(|(c, e)| e.q_map.map(|v| (*c, v)))
            .collect()
    }

    pub fn g_map(&self) -> BTreeMap<CameraId, f64> {
        self.per_camera
            .iter()
            .filter_map(|(c, e)| e.g_map.map(|v| (*c, v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakestEntry {
    pub camera: CameraId,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weakest {
    pub q_map: WeakestEntry,
    pub g_map: WeakestEntry,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Average {
    pub q_map: f64,
    pub g_map: f64,
    pub q_map_std: f64,
    pub g_map_std: f64,
}

/// The rendered evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    pub method: String,
    pub per_camera: BTreeMap<CameraId, CameraEntry>,
    pub weakest: Weakest,
    pub average: Average,
    pub global: Option<GlobalScores>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub diagnostics: Option<Diagnostics>,
}

pub const SUMMARY_HEADER: &str =
    "dataset,method,weakest_q_map,weakest_g_map,average_q_map,average_g_map";

impl Report {
    pub fn from_table(table: ReportTable) -> Result<Self> {
        let r = imbalance_report(&table.q_map(), &table.g_map())?;
        Ok(Report {
            dataset: table.dataset,
            method: table.method,
            per_camera: table.per_camera,
            weakest: Weakest {
                q_map: WeakestEntry {
                    camera: r.weakest_q.0,
                    value: r.weakest_q.1,
                },
                g_map: WeakestEntry {
                    camera: r.weakest_g.0,
                    value: r.weakest_g.1,
                },
            },
            average: Average {
                q_map: r.mean_q,
                g_map: r.mean_g,
                q_map_std: r.spread_q,
                g_map_std: r.spread_g,
            },
            global: table.global,
            diagnostics: table.diagnostics,
        })
    }

    pub fn from_evaluation(eval: &Evaluation, dataset: &str, method: &str) -> Result<Self> {
        Self::from_table(ReportTable::from_evaluation(eval, dataset, method)?)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row in the Weakest/Average x Q-mAP/G-mAP layout, in percent.
    pub fn summary_csv(&self) -> String {
        format!(
            "{SUMMARY_HEADER}\n{},{},{:.1},{:.1},{:.1},{:.1}\n",
            csv_field(&self.dataset),
            csv_field(&self.method),
            100.0 * self.weakest.q_map.value,
            100.0 * self.weakest.g_map.value,
            100.0 * self.average.q_map,
            100.0 * self.average.g_map,
        )
    }

    /// `camera,num_queries,q_map,g_map` in percent; missing values are empty.
    pub fn per_camera_csv(&self) -> String {
        let pct = |v: Option<f64>| v.map(|v| format!("{:.2}", 100.0 * v)).unwrap_or_default();
        let mut out = String::from("camera,num_queries,q_map,g_map\n");
        for (c, e) in &self.per_camera {
            let n = e.num_queries.map(|n| n.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{c},{n},{},{}", pct(e.q_map), pct(e.g_map));
        }
        out
    }

    /// Writes `report.json`, `summary.csv` and `per_camera.csv` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.json", self.to_json()),
            ("summary.csv", self.summary_csv()),
            ("per_camera.csv", self.per_camera_csv()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[(CameraId, f64)]) -> BTreeMap<CameraId, f64> {
        v.iter().copied().collect()
    }

    #[test]
    fn hand_statistics() {
        let m = map(&[(0, 0.2), (1, 0.4), (2, 0.6)]);
        let r = imbalance_report(&m, &m).unwrap();
        assert_eq!(r.weakest_q, (0, 0.2));
        assert!((r.mean_q - 0.4).abs() < 1e-15);
        // sqrt(((0.2)^2 + 0 + (0.2)^2) / 3)
        assert!((r.spread_q - (0.08f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!((r.spread_q - 0.1633).abs() < 1e-4);
    }

    #[test]
    fn constant_values() {
        let m = map(&[(3, 0.7), (5, 0.7), (9, 0.7)]);
        let r = imbalance_report(&m, &m).unwrap();
        assert_eq!(r.weakest_q, (3, 0.7));
        assert_eq!(r.mean_q, 0.7);
        assert_eq!(r.spread_q, 0.0);
    }

    #[test]
    fn tie_breaks_to_lowest_camera() {
        let m = map(&[(4, 0.5), (2, 0.5), (7, 0.9)]);
        assert_eq!(imbalance_report(&m, &m).unwrap().weakest_g, (2, 0.5));
    }

    #[test]
    fn empty_maps_error() {
        let m = map(&[(0, 0.5)]);
        assert!(imbalance_report(&BTreeMap::new(), &m).is_err());
        assert!(imbalance_report(&m, &BTreeMap::new()).is_err());
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
