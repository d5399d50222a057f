//! Embedding tables and dataset manifests.
//!
//! Embeddings are CSV with the header `person_id,camera_id,split,f0,...`,
//! one record per row. Values are written with 9 significant digits.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Distance, EmbeddingRecord, RetrievalProtocol, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Label for the method column of reports; defaults to the distance name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub num_cameras: u32,
    pub embedding_dim: usize,
    #[serde(default)]
    pub distance: Distance,
    #[serde(default = "default_true")]
    pub cross_camera_only: bool,
    /// Relative paths resolve against the manifest's directory.
    #[serde(default)]
    pub query: Option<PathBuf>,
    #[serde(default)]
    pub gallery: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut m.query, &mut m.gallery].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    pub fn method(&self) -> String {
        self.method.clone().unwrap_or_else(|| self.distance.to_string())
    }

    pub fn protocol(&self) -> RetrievalProtocol {
        RetrievalProtocol {
            distance: self.distance,
            cross_camera_only: self.cross_camera_only,
        }
    }
}

/// Vector length declared by an embedding table's header, `None` for an empty file.
pub fn header_dim(path: &Path) -> Result<Option<usize>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = rdr.headers().map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })?;
    Ok((!header.is_empty()).then(|| header.len().saturating_sub(3)))
}

/// Reads and validates an embedding table; row order is preserved.
pub fn load_embeddings(path: &Path, manifest: &DatasetManifest) -> Result<Vec<EmbeddingRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(file, path, manifest)
}

pub fn read_embeddings<R: std::io::Read>(
    reader: R,
    path: &Path,
    manifest: &DatasetManifest,
) -> Result<Vec<EmbeddingRecord>> {
    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.is_empty() {
        return Ok(Vec::new());
    }
    let expected: Vec<String> = ["person_id", "camera_id", "split"]
        .into_iter()
        .map(String::from)
        .chain((0..manifest.embedding_dim).map(|i| format!("f{i}")))
        .collect();
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(
            1,
            format!(
                "header must be {:?} for embedding_dim {}",
                expected.join(","),
                manifest.embedding_dim
            ),
        ));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != 3 + manifest.embedding_dim {
            return Err(parse_err(
                line,
                format!(
                    "expected {} vector values, found {}",
                    manifest.embedding_dim,
                    row.len().saturating_sub(3)
                ),
            ));
        }
        let field = |i: usize| row.get(i).unwrap_or_default().trim();
        let person_id = field(0)
            .parse()
            .map_err(|e| parse_err(line, format!("person_id {:?}: {e}", field(0))))?;
        let camera_id: u32 = field(1)
            .parse()
            .map_err(|e| parse_err(line, format!("camera_id {:?}: {e}", field(1))))?;
        if camera_id >= manifest.num_cameras {
            return Err(parse_err(
                line,
                format!("camera_id {camera_id} outside 0..{}", manifest.num_cameras),
            ));
        }
        let split: Split = field(2).parse().map_err(|e: Error| parse_err(line, e.to_string()))?;
        let vector = (3..row.len())
            .map(|i| {
                let v: f64 = field(i)
                    .parse()
                    .map_err(|e| parse_err(line, format!("value {:?}: {e}", field(i))))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("non-finite value {:?}", field(i))));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(EmbeddingRecord::new(person_id, camera_id, split, vector));
    }
    Ok(out)
}

/// Shortest decimal that round-trips the value rounded to 9 significant digits.
pub fn format_decimal(v: f64) -> String {
    let rounded: f64 = format!("{v:.8e}").parse().expect("formatted float parses");
    let s = format!("{rounded}");
    if s == "-0" { "0".into() } else { s }
}

pub fn embeddings_to_csv(records: &[EmbeddingRecord], dim: usize) -> Result<String> {
    if let Some(r) = records.iter().find(|r| r.vector.len() != dim) {
        return Err(Error::InvalidArgument(format!(
            "record for person {} has {} values, expected {dim}",
            r.person_id,
            r.vector.len()
        )));
    }
    let mut out = String::from("person_id,camera_id,split");
    for i in 0..dim {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{}", r.person_id, r.camera_id, r.split));
        for v in &r.vector {
            out.push(',');
            out.push_str(&format_decimal(*v));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord], dim: usize) -> Result<()> {
    std::fs::write(path, embeddings_to_csv(records, dim)?).map_err(|e| Error::io(path, e))
}

/// Splits records by their split tag, preserving order.
pub fn partition(records: Vec<EmbeddingRecord>) -> (Vec<EmbeddingRecord>, Vec<EmbeddingRecord>) {
    records.into_iter().partition(|r| r.split == Split::Query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn manifest(dim: usize) -> DatasetManifest {
        DatasetManifest {
            name: "t".into(),
            method: None,
            num_cameras: 6,
            embedding_dim: dim,
            distance: Distance::Euclidean,
            cross_camera_only: true,
            query: None,
            gallery: None,
        }
    }

    fn read(text: &str, dim: usize) -> Result<Vec<EmbeddingRecord>> {
        read_embeddings(text.as_bytes(), Path::new("mem.csv"), &manifest(dim))
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(read("", 2).unwrap().is_empty());
        assert!(read("person_id,camera_id,split,f0,f1\n", 2).unwrap().is_empty());
    }

    #[test]
    fn parses_row_and_reserializes() {
        let text = "person_id,camera_id,split,f0,f1\n7,3,gallery,0.1,0.2\n";
        let recs = read(text, 2).unwrap();
        assert_eq!(recs, vec![EmbeddingRecord::new(7, 3, Split::Gallery, vec![0.1, 0.2])]);
        assert_eq!(embeddings_to_csv(&recs, 2).unwrap(), text);
        assert!(embeddings_to_csv(&recs, 3).is_err());
    }

    #[test]
    fn wrong_dimension_reports_line() {
        let text = "person_id,camera_id,split,f0,f1\n1,0,query,0,0\n7,3,gallery,0.1,0.2,0.3\n";
        let err = read(text, 2).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn validation_errors() {
        let h = "person_id,camera_id,split,f0\n";
        assert!(read(&format!("{h}1,6,query,0\n"), 1).is_err());
        assert!(read(&format!("{h}1,0,probe,0\n"), 1).is_err());
        assert!(read(&format!("{h}x,0,query,0\n"), 1).is_err());
        assert!(read(&format!("{h}1,0,query,nan\n"), 1).is_err());
        assert!(read("id,camera_id,split,f0\n1,0,query,0\n", 1).is_err());
    }

    #[test]
    fn duplicates_and_order_preserved() {
        let text = "person_id,camera_id,split,f0\n2,1,query,1\n2,1,query,1\n1,0,gallery,3\n";
        let recs = read(text, 1).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0], recs[1]);
        let (q, g) = partition(recs);
        assert_eq!((q.len(), g.len()), (2, 1));
    }

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_decimal(0.1), "0.1");
        assert_eq!(format_decimal(1.0 / 3.0), "0.333333333");
        assert_eq!(format_decimal(-2.0), "-2");
        assert_eq!(format_decimal(123456789.87), "123456790");
        assert_eq!(format_decimal(-0.0), "0");
    }

    proptest! {
        #[test]
        fn load_serialize_load_is_identity(
            rows in prop::collection::vec((0u32..50, 0u32..6, any::<bool>(), prop::collection::vec(-1e3f64..1e3, 3)), 0..20)
        ) {
            let recs: Vec<EmbeddingRecord> = rows
                .into_iter()
                .map(|(p, c, q, v)| EmbeddingRecord::new(p, c, if q { Split::Query } else { Split::Gallery }, v))
                .collect();
            let text = embeddings_to_csv(&recs, 3).unwrap();
            let once = read(&text, 3).unwrap();
            let text2 = embeddings_to_csv(&once, 3).unwrap();
            prop_assert_eq!(&text2, &text);
            prop_assert_eq!(read(&text2, 3).unwrap(), once);
        }
    }
}
