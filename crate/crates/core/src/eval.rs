//! Positioning metrics, segment-count sweep and the quantisation bounds of a perfect segmentor.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cnn::{self, CnnArch, CnnModel, LabeledWindows, TrainConfig};
use crate::drive::{Dataset, Drive};
use crate::error::{Error, Result};
use crate::features::{extract, FeatureVector};
use crate::forest::{fit_forest, ForestConfig, ForestModel};
use crate::par::Parallelism;
use crate::positioning::{run_labels, TrajectoryPoint};
use crate::preprocess::preprocess;
use crate::route::{RouteModel, DEFAULT_CORRIDOR_M};
use crate::types::{Position, ProcessedWindow, SegmentId};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_raw: f64,
    pub acc: f64,
    pub two_acc_raw: f64,
    pub two_acc: f64,
    pub max_dist_raw: f64,
    pub max_dist: f64,
    pub mean_dist_raw: f64,
    pub mean_dist: f64,
}

/// On-disk form of a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub version: u32,
    pub windows: usize,
    #[serde(flatten)]
    pub report: MetricsReport,
}

/// Pools windows from any number of drives; every window weighs the same.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsAccumulator {
    windows: usize,
    hit_raw: usize,
    hit: usize,
    near_raw: usize,
    near: usize,
    sum_raw: f64,
    sum: f64,
    max_raw: f64,
    max: f64,
}

fn truth_segment(route: &RouteModel, p: &Position) -> SegmentId {
    route.segment_at_arc(route.project(p).arc_length)
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    /// Add time-aligned windows. `positions` are the reported (corrected) positions; a missing raw
    /// segment counts as a raw miss and is charged the reported position's distance.
    pub fn add(
        &mut self,
        raw: &[Option<SegmentId>],
        corrected: &[SegmentId],
        positions: &[Position],
        truth: &[Position],
        route: &RouteModel,
    ) -> Result<()> {
        let n = raw.len();
        if corrected.len() != n || positions.len() != n || truth.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} entries in every sequence"),
                actual: format!("{}, {}, {}, {}", n, corrected.len(), positions.len(), truth.len()),
            });
        }
        for i in 0..n {
            let gt = truth_segment(route, &truth[i]).get();
            let d = positions[i].distance(&truth[i]);
            let c = corrected[i].get();
            self.hit += usize::from(c == gt);
            self.near += usize::from(c.abs_diff(gt) <= 1);
            self.sum += d;
            self.max = self.max.max(d);
            let d_raw = match raw[i] {
                Some(r) => {
                    self.hit_raw += usize::from(r.get() == gt);
                    self.near_raw += usize::from(r.get().abs_diff(gt) <= 1);
                    route.midpoint(r).distance(&truth[i])
                }
                None => d,
            };
            self.sum_raw += d_raw;
            self.max_raw = self.max_raw.max(d_raw);
        }
        self.windows += n;
        Ok(())
    }

    /// Add a positioned drive, interpolating its ground truth at each point's time.
    pub fn add_trajectory(&mut self, points: &[TrajectoryPoint], drive: &Drive, route: &RouteModel) -> Result<()> {
        let truth = points
            .iter()
            .map(|p| drive.position_at(p.t))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidInput("drive has no ground truth to evaluate against".into()))?;
        let raw: Vec<_> = points.iter().map(|p| p.seg_raw).collect();
        let corrected: Vec<_> = points.iter().map(|p| p.seg_corrected).collect();
        let positions: Vec<_> = points.iter().map(|p| p.position).collect();
        self.add(&raw, &corrected, &positions, &truth, route)
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.windows == 0 {
            return Err(Error::InvalidInput("no windows to evaluate".into()));
        }
        let n = self.windows as f64;
        Ok(MetricsReport {
            acc_raw: self.hit_raw as f64 / n,
            acc: self.hit as f64 / n,
            two_acc_raw: self.near_raw as f64 / n,
            two_acc: self.near as f64 / n,
            max_dist_raw: self.max_raw,
            max_dist: self.max,
            mean_dist_raw: self.sum_raw / n,
            mean_dist: self.sum / n,
        })
    }

    pub fn to_file(&self) -> Result<MetricsFile> {
        Ok(MetricsFile { version: REPORT_VERSION, windows: self.windows, report: self.finish()? })
    }
}

/// Metrics over one time-aligned sequence.
pub fn metrics(
    raw: &[Option<SegmentId>],
    corrected: &[SegmentId],
    positions: &[Position],
    truth: &[Position],
    route: &RouteModel,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new();
    acc.add(raw, corrected, positions, truth, route)?;
    acc.finish()
}

/// Worst-case and average distance of a perfect segmentor reporting segment midpoints:
/// `(L / 2N, L / 4N)`.
pub fn ideal_bounds(length_m: f64, n: usize) -> Result<(f64, f64)> {
    if !(length_m > 0.0) || n == 0 {
        return Err(Error::InvalidInput(format!("bounds need L > 0 and N >= 1, got L = {length_m}, N = {n}")));
    }
    let seg = length_m / n as f64;
    Ok((seg / 2.0, seg / 4.0))
}

/// Candidate segment counts `start, start + step, ..., <= end`.
pub fn candidate_range(start: usize, end: usize, step: usize) -> Vec<usize> {
    (start..=end).step_by(step.max(1)).collect()
}

/// 10 to 70 in steps of 5.
pub fn car_candidates() -> Vec<usize> {
    candidate_range(10, 70, 5)
}

/// 4 to 20 in steps of 2.
pub fn scooter_candidates() -> Vec<usize> {
    candidate_range(4, 20, 2)
}

/// Windows of a drive after preprocessing, with ground truth at window midpoints.
#[derive(Debug, Clone)]
pub struct PreparedDrive {
    pub times: Vec<f64>,
    pub truth: Vec<Position>,
    /// `None` where preprocessing rejected the window.
    pub windows: Vec<Option<ProcessedWindow>>,
}

impl PreparedDrive {
    pub fn new(drive: &Drive, par: Parallelism) -> Result<Self> {
        let timed = drive.windows();
        let times: Vec<f64> = timed.iter().map(|w| w.t_mid()).collect();
        let truth = times
            .iter()
            .map(|&t| drive.position_at(t))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidInput("drive has no ground truth".into()))?;
        let windows = par.map(&timed, |w| preprocess(&w.window).ok());
        Ok(Self { times, truth, windows })
    }

    /// Ground-truth labels under `route`, for windows that survived preprocessing.
    pub fn labeled(&self, route: &RouteModel) -> Result<Vec<(ProcessedWindow, SegmentId)>> {
        self.windows
            .iter()
            .zip(&self.truth)
            .filter_map(|(w, p)| w.map(|w| route.label_within(p, DEFAULT_CORRIDOR_M).map(|s| (w, s))))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SweepTrainer {
    Forest(ForestConfig),
    Cnn { arch: CnnArch, train: TrainConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    /// Validation mean distance; `None` when the candidate failed.
    pub mean_dist: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub chosen: usize,
}

impl SweepResult {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let wrap = |e: csv::Error| Error::InvalidInput(format!("writing sweep CSV: {e}"));
        w.write_record(["n", "mean_dist"]).map_err(wrap)?;
        for p in &self.points {
            w.write_record([p.n.to_string(), p.mean_dist.map(|d| d.to_string()).unwrap_or_default()]).map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::InvalidInput(format!("writing sweep CSV: {e}")))
    }
}

/// Smallest finite mean distance; ties go to the smaller N.
pub fn choose(points: &[SweepPoint]) -> Option<usize> {
    points
        .iter()
        .filter_map(|p| p.mean_dist.filter(|d| d.is_finite()).map(|d| (p.n, d)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(n, _)| n)
}

enum Inputs {
    Features(Vec<Vec<Option<FeatureVector>>>, Vec<Vec<Option<FeatureVector>>>),
    Windows,
}

fn candidate(
    n: usize,
    route: &RouteModel,
    train: &[PreparedDrive],
    val: &[PreparedDrive],
    inputs: &Inputs,
    trainer: &SweepTrainer,
    par: Parallelism,
) -> Result<f64> {
    let route_n = route.resegment(n)?;
    let mut labels = Vec::new();
    for d in train {
        for (w, p) in d.windows.iter().zip(&d.truth) {
            if w.is_some() {
                labels.push(route_n.label_within(p, DEFAULT_CORRIDOR_M)?);
            }
        }
    }
    let predictions: Vec<Vec<Option<SegmentId>>> = match (trainer, inputs) {
        (SweepTrainer::Forest(cfg), Inputs::Features(tr, va)) => {
            let x: Vec<&[f64]> = tr.iter().flatten().flatten().map(FeatureVector::values).collect();
            let model: ForestModel = fit_forest(&x, &labels, n, cfg, par)?;
            va.iter()
                .map(|d| d.iter().map(|f| f.as_ref().map(|f| model.predict(f.values()).map(|p| p.0)).transpose()).collect())
                .collect::<Result<_>>()?
        }
        (SweepTrainer::Cnn { arch, train: cfg }, Inputs::Windows) => {
            let x: Vec<ProcessedWindow> = train.iter().flat_map(|d| d.windows.iter().flatten().copied()).collect();
            let outcome = cnn::train(&LabeledWindows { windows: &x, labels: &labels }, None, n, arch, cfg, par)?;
            let model: CnnModel = outcome.model;
            val.iter().map(|d| d.windows.iter().map(|w| w.as_ref().map(|w| model.predict(w))).collect()).collect()
        }
        _ => unreachable!("inputs are prepared to match the trainer"),
    };
    let mut acc = MetricsAccumulator::new();
    for (d, raw) in val.iter().zip(&predictions) {
        let points = run_labels(&d.times, raw, &route_n);
        let corrected: Vec<_> = points.iter().map(|p| p.seg_corrected).collect();
        let positions: Vec<_> = points.iter().map(|p| p.position).collect();
        acc.add(raw, &corrected, &positions, &d.truth, &route_n)?;
    }
    Ok(acc.finish()?.mean_dist)
}

/// Retrain from scratch for every candidate N and score validation mean distance.
/// Windows and features are computed once; only labels change with N.
pub fn sweep(dataset: &Dataset, candidates: &[usize], trainer: &SweepTrainer, par: Parallelism) -> Result<SweepResult> {
    if candidates.len() < 2 {
        return Err(Error::Config("a sweep needs at least two candidates".into()));
    }
    let prepare = |drives: &[Drive]| drives.iter().map(|d| PreparedDrive::new(d, par)).collect::<Result<Vec<_>>>();
    let train = prepare(&dataset.train)?;
    let val = prepare(&dataset.val)?;
    let inputs = match trainer {
        SweepTrainer::Forest(_) => {
            let feats = |ds: &[PreparedDrive]| -> Vec<Vec<Option<FeatureVector>>> {
                ds.iter().map(|d| par.map(&d.windows, |w| w.as_ref().map(extract))).collect()
            };
            Inputs::Features(feats(&train), feats(&val))
        }
        SweepTrainer::Cnn { .. } => Inputs::Windows,
    };
    let points = par.map(candidates, |&n| match candidate(n, &dataset.route, &train, &val, &inputs, trainer, par) {
        Ok(d) => SweepPoint { n, mean_dist: Some(d), error: None },
        Err(e) => SweepPoint { n, mean_dist: None, error: Some(e.to_string()) },
    });
    let chosen = choose(&points).ok_or_else(|| {
        let why: Vec<String> =
            points.iter().map(|p| format!("N = {}: {}", p.n, p.error.as_deref().unwrap_or("no score"))).collect();
        Error::Config(format!("every sweep candidate failed ({})", why.join("; ")))
    })?;
    Ok(SweepResult { points, chosen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn line(n: usize) -> RouteModel {
        RouteModel::build(vec![Position::new(0.0, 0.0), Position::new(300.0, 0.0)], n).unwrap()
    }

    fn sid(v: u32) -> SegmentId {
        SegmentId::new(v, 3).unwrap()
    }

    #[test]
    fn bounds_match_closed_form() {
        let (m, a) = ideal_bounds(5919.0, 40).unwrap();
        assert_abs_diff_eq!(m, 73.9875);
        assert_abs_diff_eq!(a, 36.99375);
        let (m, a) = ideal_bounds(917.0, 14).unwrap();
        assert_abs_diff_eq!(m, 917.0 / 28.0);
        assert_abs_diff_eq!(a, 917.0 / 56.0);
        assert_eq!(ideal_bounds(100.0, 1).unwrap(), (50.0, 25.0));
        assert!(ideal_bounds(0.0, 3).is_err());
        assert!(ideal_bounds(10.0, 0).is_err());
    }

    #[test]
    fn hand_case() {
        let route = line(3);
        let truth = [Position::new(20.0, 0.0), Position::new(90.0, 0.0), Position::new(160.0, 0.0)];
        let pred = [sid(1), sid(2), sid(2)];
        let pos: Vec<Position> = pred.iter().map(|&s| route.midpoint(s)).collect();
        let raw: Vec<_> = pred.iter().map(|&s| Some(s)).collect();
        let r = metrics(&raw, &pred, &pos, &truth, &route).unwrap();
        assert_abs_diff_eq!(r.acc, 2.0 / 3.0);
        assert_eq!(r.two_acc, 1.0);
        // Midpoints at 50 and 150: distances 30, 60, 10.
        assert_abs_diff_eq!(r.mean_dist, 100.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.max_dist, 60.0, epsilon = 1e-12);
        assert_eq!(r.mean_dist_raw, r.mean_dist);
    }

    #[test]
    fn off_by_one_everywhere() {
        let route = line(3);
        let truth = [Position::new(20.0, 0.0), Position::new(150.0, 0.0)];
        let pred = [sid(2), sid(3)];
        let pos: Vec<_> = pred.iter().map(|&s| route.midpoint(s)).collect();
        let r = metrics(&[Some(sid(2)), Some(sid(3))], &pred, &pos, &truth, &route).unwrap();
        assert_eq!((r.acc, r.two_acc, r.acc_raw, r.two_acc_raw), (0.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn perfect_prediction_keeps_quantisation_floor() {
        let route = line(3);
        let truth = [Position::new(10.0, 0.0)];
        let r = metrics(&[Some(sid(1))], &[sid(1)], &[route.midpoint(sid(1))], &truth, &route).unwrap();
        assert_eq!(r.acc, 1.0);
        assert_abs_diff_eq!(r.max_dist, 40.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_raw_counts_as_miss() {
        let route = line(3);
        let truth = [Position::new(10.0, 0.0)];
        let r = metrics(&[None], &[sid(1)], &[route.midpoint(sid(1))], &truth, &route).unwrap();
        assert_eq!((r.acc_raw, r.acc), (0.0, 1.0));
        assert_eq!(r.mean_dist_raw, r.mean_dist);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let route = line(3);
        assert!(metrics(&[None], &[], &[], &[], &route).is_err());
        assert!(metrics(&[], &[], &[], &[], &route).is_err());
    }

    #[test]
    fn choose_prefers_smaller_n_on_ties() {
        let pts = |v: &[(usize, Option<f64>)]| -> Vec<SweepPoint> {
            v.iter().map(|&(n, d)| SweepPoint { n, mean_dist: d, error: None }).collect()
        };
        assert_eq!(choose(&pts(&[(10, Some(5.0)), (20, Some(5.0)), (30, Some(6.0))])), Some(10));
        assert_eq!(choose(&pts(&[(10, None), (20, Some(7.0)), (30, Some(6.0))])), Some(30));
        assert_eq!(choose(&pts(&[(10, None)])), None);
    }

    #[test]
    fn default_candidate_grids() {
        assert_eq!(car_candidates().len(), 13);
        assert_eq!(car_candidates().last(), Some(&70));
        assert_eq!(scooter_candidates(), vec![4, 6, 8, 10, 12, 14, 16, 18, 20]);
    }

    #[test]
    fn sweep_csv_header_and_failed_rows() {
        let r = SweepResult {
            points: vec![
                SweepPoint { n: 5, mean_dist: Some(1.5), error: None },
                SweepPoint { n: 10, mean_dist: None, error: Some("x".into()) },
            ],
            chosen: 5,
        };
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "n,mean_dist\n5,1.5\n10,\n");
    }
}
