//! Place datasets: manifest CSV ingestion and image loading.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::augment::baseline::resize;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 5] = ["path", "place_id", "x", "y", "split"];
pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Query,
    Database,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Query => "query",
            Split::Database => "database",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "query" => Ok(Split::Query),
            "database" => Ok(Split::Database),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub path: String,
    pub place_id: usize,
    pub x: f64,
    pub y: f64,
    pub split: Split,
}

impl Record {
    pub fn distance(&self, other: &Record) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Query/database records plus the positive radius that defines matches.
#[derive(Clone, Debug)]
pub struct PlaceDataset {
    pub root: PathBuf,
    pub records: Vec<Record>,
    pub radius: f64,
    queries: Vec<usize>,
    database: Vec<usize>,
}

impl PlaceDataset {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>, radius: f64) -> Self {
        let queries = (0..records.len()).filter(|&i| records[i].split == Split::Query).collect();
        let database = (0..records.len()).filter(|&i| records[i].split == Split::Database).collect();
        PlaceDataset {
            root: root.into(),
            records,
            radius,
            queries,
            database,
        }
    }

    /// Record indices of the queries.
    pub fn queries(&self) -> &[usize] {
        &self.queries
    }

    /// Record indices of the database images.
    pub fn database(&self) -> &[usize] {
        &self.database
    }

    /// Database record indices within the (closed) positive radius.
    pub fn positives_of(&self, record: usize) -> Vec<usize> {
        let q = &self.records[record];
        self.database
            .iter()
            .copied()
            .filter(|&d| d != record && q.distance(&self.records[d]) <= self.radius)
            .collect()
    }

    /// Database record indices beyond the positive radius.
    pub fn negatives_of(&self, record: usize) -> Vec<usize> {
        let q = &self.records[record];
        self.database
            .iter()
            .copied()
            .filter(|&d| q.distance(&self.records[d]) > self.radius)
            .collect()
    }

    /// Queries with at least one database image in radius.
    pub fn evaluable_queries(&self) -> Vec<usize> {
        self.queries
            .iter()
            .copied()
            .filter(|&q| !self.positives_of(q).is_empty())
            .collect()
    }

    pub fn image_path(&self, record: usize) -> PathBuf {
        self.root.join(&self.records[record].path)
    }

    /// Loads every image, resized to `res`×`res`, in record order.
    pub fn load_images(&self, res: u32) -> Result<Vec<RgbImage>> {
        crate::exec::try_map_range(self.records.len(), |i| {
            let p = self.image_path(i);
            let img = image::open(&p).map_err(|source| Error::Image { path: p, source })?;
            Ok(resize(&img.to_rgb8(), res))
        })
    }
}

/// Accepts either a manifest file or a directory containing `manifest.csv`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

pub fn load_manifest(path: &Path, radius: f64) -> Result<PlaceDataset> {
    let path = manifest_path(path);
    let err = |msg: String| Error::Manifest {
        path: path.clone(),
        msg,
    };
    let mut reader = csv::Reader::from_path(&path).map_err(|e| err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(MANIFEST_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| err(format!("missing column `{name}`")))?;
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| err(format!("row {line}: {e}")))?;
        let field = |c: usize| row.get(cols[c]).unwrap_or("").trim();
        let num = |c: usize| -> Result<f64> {
            field(c)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("row {line}: non-numeric `{}` value {:?}", MANIFEST_HEADER[c], field(c))))
        };
        let place_id = field(1)
            .parse::<usize>()
            .map_err(|_| err(format!("row {line}: bad place_id {:?}", field(1))))?;
        let split = field(4).parse::<Split>().map_err(|m| err(format!("row {line}: {m}")))?;
        if field(0).is_empty() {
            return Err(err(format!("row {line}: empty path")));
        }
        records.push(Record {
            path: field(0).to_string(),
            place_id,
            x: num(2)?,
            y: num(3)?,
            split,
        });
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let ds = PlaceDataset::new(root, records, radius);
    let dropped = ds.queries().len() - ds.evaluable_queries().len();
    if dropped > 0 {
        log::warn!("{}: {dropped} queries have no database image within {radius}", path.display());
    }
    Ok(ds)
}

pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let wrap = |e: csv::Error| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    w.write_record(MANIFEST_HEADER).map_err(wrap)?;
    for r in records {
        w.write_record([
            r.path.clone(),
            r.place_id.to_string(),
            format!("{}", r.x),
            format!("{}", r.y),
            r.split.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
