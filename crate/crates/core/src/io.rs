//! On-disk formats: drive, ground-truth and route CSVs and the dataset index.
//!
//! A dataset directory holds `dataset.json`, `route.csv`, `drives/<name>.csv`
//! and, where known, `truth/<name>.csv`. Floats are written in shortest
//! round-trip form, so reading a file back gives the exact values.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::drive::{Dataset, Drive, Fix, Split};
use crate::error::{Error, Result};
use crate::route::RouteModel;
use crate::sim::DatasetManifest;
use crate::types::{ImuSample, Position};

pub const DATASET_VERSION: u32 = 1;

const DRIVE_HEADER: [&str; 7] = ["t", "ax", "ay", "az", "gx", "gy", "gz"];
const TRUTH_HEADER: [&str; 3] = ["t", "x", "y"];
const ROUTE_HEADER: [&str; 2] = ["x", "y"];

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

fn check_header<R: Read>(r: &mut csv::Reader<R>, expected: &[&str], path: &Path) -> Result<()> {
    let h = r.headers().map_err(|e| csv_err(path, e))?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(Error::parse(path, format!("expected header `{}`, found `{}`", expected.join(","), h.iter().collect::<Vec<_>>().join(","))));
    }
    Ok(())
}

fn read_rows<const K: usize, R: Read>(reader: R, header: &[&str; K], path: &Path) -> Result<Vec<[f64; K]>> {
    let mut r = csv::Reader::from_reader(reader);
    check_header(&mut r, header, path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != K {
            return Err(Error::parse(path, format!("row {}: expected {K} fields, found {}", i + 1, rec.len())));
        }
        let mut row = [0.0; K];
        for (v, field) in row.iter_mut().zip(rec.iter()) {
            *v = field.trim().parse().map_err(|e| Error::parse(path, format!("row {}: {field:?}: {e}", i + 1)))?;
        }
        out.push(row);
    }
    Ok(out)
}

fn write_rows<const K: usize, W: Write>(writer: W, header: &[&str; K], rows: impl Iterator<Item = [f64; K]>) -> Result<()> {
    let path = Path::new("<csv>");
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(f64::to_string)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_samples<W: Write>(samples: &[ImuSample], writer: W) -> Result<()> {
    write_rows(writer, &DRIVE_HEADER, samples.iter().map(|s| {
        let r = s.row();
        [s.t, r[0], r[1], r[2], r[3], r[4], r[5]]
    }))
}

pub fn read_samples<R: Read>(reader: R, path: &Path) -> Result<Vec<ImuSample>> {
    Ok(read_rows(reader, &DRIVE_HEADER, path)?
        .into_iter()
        .map(|r| ImuSample { t: r[0], accel: [r[1], r[2], r[3]], gyro: [r[4], r[5], r[6]] })
        .collect())
}

pub fn write_truth<W: Write>(fixes: &[Fix], writer: W) -> Result<()> {
    write_rows(writer, &TRUTH_HEADER, fixes.iter().map(|f| [f.t, f.x, f.y]))
}

pub fn read_truth<R: Read>(reader: R, path: &Path) -> Result<Vec<Fix>> {
    Ok(read_rows(reader, &TRUTH_HEADER, path)?.into_iter().map(|r| Fix { t: r[0], x: r[1], y: r[2] }).collect())
}

pub fn write_polyline<W: Write>(points: &[Position], writer: W) -> Result<()> {
    write_rows(writer, &ROUTE_HEADER, points.iter().map(|p| [p.x, p.y]))
}

pub fn read_polyline<R: Read>(reader: R, path: &Path) -> Result<Vec<Position>> {
    Ok(read_rows(reader, &ROUTE_HEADER, path)?.into_iter().map(|r| Position::new(r[0], r[1])).collect())
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, s: &str) -> Result<()> {
    let mut f = create(path)?;
    f.write_all(s.as_bytes()).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

/// Point errors that carry a placeholder path at the file they came from.
pub fn at_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Version { found, supported, .. } => Error::Version { path: path.into(), found, supported },
        Error::Parse { message, .. } => Error::parse(path, message),
        Error::Io { source, .. } => Error::io(path, source),
        other => Error::parse(path, other),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    write_string(path, &(s + "\n"))
}

/// Read a JSON file whose top-level `version` must not exceed `supported`.
pub fn read_versioned_json<T: DeserializeOwned>(path: &Path, supported: u32) -> Result<T> {
    let text = read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
    let found = v
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::parse(path, "missing integer `version` field"))?;
    if found > u64::from(supported) {
        return Err(Error::Version { path: path.into(), found: found.min(u64::from(u32::MAX)) as u32, supported });
    }
    serde_json::from_value(v).map_err(|e| Error::parse(path, e))
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub rate_hz: f64,
    pub n_segments: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    /// Present when the dataset was simulated; enough to regenerate it exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<DatasetManifest>,
}

impl DatasetIndex {
    pub fn names(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn drive_name(split: Split, i: usize) -> String {
    format!("{}_{i:03}", split.name())
}

pub fn drive_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("drives").join(format!("{name}.csv"))
}

pub fn truth_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("truth").join(format!("{name}.csv"))
}

pub fn save_dataset(dir: &Path, dataset: &Dataset, simulation: Option<DatasetManifest>) -> Result<DatasetIndex> {
    let rate_hz = Split::ALL
        .iter()
        .flat_map(|&s| dataset.split(s))
        .map(Drive::rate_hz)
        .next()
        .ok_or_else(|| Error::InvalidInput("dataset has no drives".into()))?;
    let mut names = [Vec::new(), Vec::new(), Vec::new()];
    for (k, split) in Split::ALL.into_iter().enumerate() {
        for (i, d) in dataset.split(split).iter().enumerate() {
            if d.rate_hz() != rate_hz {
                return Err(Error::InvalidInput("all drives in a dataset must share one sample rate".into()));
            }
            let name = drive_name(split, i);
            let p = drive_path(dir, &name);
            write_samples(d.samples(), create(&p)?).map_err(|e| at_path(e, &p))?;
            if let Some(gt) = d.ground_truth() {
                let p = truth_path(dir, &name);
                write_truth(gt, create(&p)?).map_err(|e| at_path(e, &p))?;
            }
            names[k].push(name);
        }
    }
    let p = dir.join("route.csv");
    write_polyline(dataset.route.polyline(), create(&p)?).map_err(|e| at_path(e, &p))?;
    let [train, val, test] = names;
    let index = DatasetIndex {
        version: DATASET_VERSION,
        rate_hz,
        n_segments: dataset.route.num_segments(),
        train,
        val,
        test,
        simulation,
    };
    write_json(&dir.join("dataset.json"), &index)?;
    Ok(index)
}

pub fn load_drive(dir: &Path, name: &str, rate_hz: f64) -> Result<Drive> {
    let p = drive_path(dir, name);
    let samples = read_samples(open(&p)?, &p)?;
    let tp = truth_path(dir, name);
    let truth = if tp.exists() { Some(read_truth(open(&tp)?, &tp)?) } else { None };
    Drive::new(samples, rate_hz, truth).map_err(|e| at_path(e, &p))
}

pub fn load_route(path: &Path, n_segments: usize) -> Result<RouteModel> {
    RouteModel::build(read_polyline(open(path)?, path)?, n_segments)
}

/// Load a dataset directory; `n_segments` overrides the count stored in the index.
pub fn load_dataset(dir: &Path, n_segments: Option<usize>) -> Result<(Dataset, DatasetIndex)> {
    let index: DatasetIndex = read_versioned_json(&dir.join("dataset.json"), DATASET_VERSION)?;
    let route = load_route(&dir.join("route.csv"), n_segments.unwrap_or(index.n_segments))?;
    let load = |split: Split| -> Result<Vec<Drive>> {
        index.names(split).iter().map(|n| load_drive(dir, n, index.rate_hz)).collect()
    };
    let dataset = Dataset { route, train: load(Split::Train)?, val: load(Split::Val)?, test: load(Split::Test)? };
    Ok((dataset, index))
}
