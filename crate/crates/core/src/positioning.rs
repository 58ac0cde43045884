//! Window-by-window positioning: preprocess, classify, apply the forward-by-one
//! transition rule, and report the midpoint of the accepted segment.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::cnn::CnnModel;
use crate::drive::Drive;
use crate::error::{Error, Result};
use crate::features::extract;
use crate::forest::ForestModel;
use crate::par::Parallelism;
use crate::preprocess::preprocess;
use crate::route::RouteModel;
use crate::types::{Position, ProcessedWindow, RawWindow, SegmentId};

/// Maps one processed window to a route segment.
pub trait Segmentor: Sync {
    fn n_segments(&self) -> usize;

    fn segment(&self, w: &ProcessedWindow) -> Result<SegmentId>;

    fn segment_batch(&self, windows: &[ProcessedWindow], par: Parallelism) -> Result<Vec<SegmentId>> {
        par.map(windows, |w| self.segment(w)).into_iter().collect()
    }
}

pub struct ForestSegmentor<'a> {
    pub model: &'a ForestModel,
}

impl Segmentor for ForestSegmentor<'_> {
    fn n_segments(&self) -> usize {
        self.model.n_classes
    }

    fn segment(&self, w: &ProcessedWindow) -> Result<SegmentId> {
        self.model.predict(extract(w).values()).map(|(s, _)| s)
    }
}

pub struct CnnSegmentor<'a> {
    pub model: &'a CnnModel,
}

impl Segmentor for CnnSegmentor<'_> {
    fn n_segments(&self) -> usize {
        self.model.n_classes
    }

    fn segment(&self, w: &ProcessedWindow) -> Result<SegmentId> {
        Ok(self.model.predict(w))
    }
}

/// Returns a fixed sequence, one entry per call; repeats the last entry when exhausted.
#[derive(Debug)]
pub struct ScriptedSegmentor {
    script: Vec<SegmentId>,
    n_segments: usize,
    next: AtomicUsize,
}

impl ScriptedSegmentor {
    pub fn new(script: Vec<SegmentId>, n_segments: usize) -> Result<Self> {
        if script.is_empty() || script.iter().any(|s| s.get() as usize > n_segments) {
            return Err(Error::InvalidInput("script must be non-empty and within [1, N]".into()));
        }
        Ok(Self { script, n_segments, next: AtomicUsize::new(0) })
    }
}

impl Segmentor for ScriptedSegmentor {
    fn n_segments(&self) -> usize {
        self.n_segments
    }

    fn segment(&self, _w: &ProcessedWindow) -> Result<SegmentId> {
        let i = self.next.fetch_add(1, Ordering::Relaxed);
        Ok(self.script[i.min(self.script.len() - 1)])
    }

    fn segment_batch(&self, windows: &[ProcessedWindow], _par: Parallelism) -> Result<Vec<SegmentId>> {
        windows.iter().map(|w| self.segment(w)).collect()
    }
}

/// Accept `s_tilde` only when it stays on or advances by one from `s_prev`.
pub fn transition_logic(s_tilde: SegmentId, s_prev: SegmentId) -> SegmentId {
    let d = i64::from(s_tilde.get()) - i64::from(s_prev.get());
    if d == 0 || d == 1 {
        s_tilde
    } else {
        s_prev
    }
}

pub fn midpoint(route: &RouteModel, s: SegmentId) -> Position {
    route.midpoint(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositioningState {
    pub prev_segment: SegmentId,
    pub t: f64,
}

impl Default for PositioningState {
    fn default() -> Self {
        Self { prev_segment: SegmentId::from_index(0), t: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Window midpoint time, seconds.
    pub t: f64,
    pub position: Position,
    /// Classifier output; `None` when preprocessing rejected the window.
    pub seg_raw: Option<SegmentId>,
    pub seg_corrected: SegmentId,
    /// Set when the window could not be classified and the previous segment was held.
    pub flag: bool,
}

impl PositioningState {
    /// Advance by one raw classification (or a failed window) observed at time `t`.
    pub fn advance(&mut self, t: f64, seg_raw: Option<SegmentId>, route: &RouteModel) -> TrajectoryPoint {
        let corrected = match seg_raw {
            Some(s) => transition_logic(s, self.prev_segment),
            None => self.prev_segment,
        };
        self.prev_segment = corrected;
        self.t = t;
        TrajectoryPoint { t, position: route.midpoint(corrected), seg_raw, seg_corrected: corrected, flag: seg_raw.is_none() }
    }
}

/// Process one raw window. A preprocessing failure holds the previous segment and flags the point;
/// classifier errors are returned.
pub fn step(
    state: &mut PositioningState,
    t: f64,
    raw: &RawWindow,
    segmentor: &dyn Segmentor,
    route: &RouteModel,
) -> Result<TrajectoryPoint> {
    let seg_raw = match preprocess(raw) {
        Ok(w) => Some(segmentor.segment(&w)?),
        Err(_) => None,
    };
    Ok(state.advance(t, seg_raw, route))
}

/// Apply the transition rule and midpoint map to a precomputed raw segment stream.
pub fn run_labels(times: &[f64], raw: &[Option<SegmentId>], route: &RouteModel) -> Vec<TrajectoryPoint> {
    let mut state = PositioningState::default();
    times.iter().zip(raw).map(|(&t, &s)| state.advance(t, s, route)).collect()
}

/// Position a whole drive. Windows are preprocessed and classified in parallel;
/// the stateful transition pass is sequential.
pub fn run_drive(
    drive: &Drive,
    segmentor: &dyn Segmentor,
    route: &RouteModel,
    par: Parallelism,
) -> Result<Vec<TrajectoryPoint>> {
    if segmentor.n_segments() != route.num_segments() {
        return Err(Error::InvalidInput(format!(
            "segmentor has {} segments but the route has {}",
            segmentor.n_segments(),
            route.num_segments()
        )));
    }
    let windows = drive.windows();
    let processed = par.map(&windows, |w| preprocess(&w.window).ok());
    let ok: Vec<ProcessedWindow> = processed.iter().flatten().copied().collect();
    let mut labels = segmentor.segment_batch(&ok, par)?.into_iter();
    let raw: Vec<Option<SegmentId>> = processed.iter().map(|p| p.and_then(|_| labels.next())).collect();
    let times: Vec<f64> = windows.iter().map(|w| w.t_mid()).collect();
    Ok(run_labels(&times, &raw, route))
}

/// Trajectory CSV `t,x,y,seg_raw,seg_corrected,flag`; segment columns may be empty.
pub fn write_trajectory_csv<W: Write>(points: &[TrajectoryPoint], writer: W) -> Result<()> {
    let rows = points.iter().map(|p| {
        [
            p.t.to_string(),
            p.position.x.to_string(),
            p.position.y.to_string(),
            p.seg_raw.map(|s| s.to_string()).unwrap_or_default(),
            p.seg_corrected.to_string(),
            u8::from(p.flag).to_string(),
        ]
    });
    write_trajectory_rows(writer, rows)
}

/// Trajectory CSV writer shared with dead reckoning.
pub(crate) fn write_trajectory_rows<W: Write>(writer: W, rows: impl Iterator<Item = [String; 6]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::parse("<trajectory>", e);
    w.write_record(["t", "x", "y", "seg_raw", "seg_corrected", "flag"]).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<trajectory>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ImuSample, GRAVITY};

    fn seg(v: u32) -> SegmentId {
        SegmentId::from_index(v as usize - 1)
    }

    fn straight(n: usize) -> RouteModel {
        RouteModel::build(vec![Position::new(0.0, 0.0), Position::new(100.0, 0.0)], n).unwrap()
    }

    fn still_drive(seconds: usize) -> Drive {
        let samples = (0..seconds * 100)
            .map(|k| ImuSample { t: k as f64 / 100.0, accel: [0.0, 0.0, GRAVITY], gyro: [0.0; 3] })
            .collect();
        Drive::new(samples, 100.0, None).unwrap()
    }

    #[test]
    fn transition_examples() {
        assert_eq!(transition_logic(seg(5), seg(4)), seg(5));
        assert_eq!(transition_logic(seg(4), seg(4)), seg(4));
        assert_eq!(transition_logic(seg(9), seg(4)), seg(4));
        assert_eq!(transition_logic(seg(3), seg(4)), seg(4));
    }

    #[test]
    fn midpoint_examples() {
        let r = straight(4);
        assert_eq!(midpoint(&r, seg(1)), Position::new(12.5, 0.0));
        assert_eq!(midpoint(&r, seg(4)), Position::new(100.0 - 12.5, 0.0));
    }

    #[test]
    fn hand_trace() {
        let r = straight(10);
        let s = ScriptedSegmentor::new(vec![seg(1), seg(7), seg(2), seg(2)], 10).unwrap();
        let traj = run_drive(&still_drive(8), &s, &r, Parallelism::Sequential).unwrap();
        let corrected: Vec<u32> = traj.iter().map(|p| p.seg_corrected.get()).collect();
        assert_eq!(corrected, vec![1, 1, 2, 2]);
        assert!(traj.iter().all(|p| p.position == r.midpoint(p.seg_corrected)));
    }

    #[test]
    fn constant_stub_and_counting_stub() {
        let r = straight(10);
        let ones = ScriptedSegmentor::new(vec![seg(1)], 10).unwrap();
        let traj = run_drive(&still_drive(10), &ones, &r, Parallelism::Sequential).unwrap();
        assert_eq!(traj.len(), 5);
        assert!(traj.iter().all(|p| p.position == r.midpoint(seg(1))));
        let counting = ScriptedSegmentor::new((1..=5).map(seg).collect(), 10).unwrap();
        let traj = run_drive(&still_drive(10), &counting, &r, Parallelism::Sequential).unwrap();
        let c: Vec<u32> = traj.iter().map(|p| p.seg_corrected.get()).collect();
        assert_eq!(c, vec![1, 2, 3, 4, 5]);
        assert!((traj[0].t - 1.0).abs() < 1e-12);
    }

    #[test]
    fn failed_window_holds_previous_segment() {
        let r = straight(10);
        let mut samples: Vec<ImuSample> = still_drive(6).samples().to_vec();
        // Freefall in the middle window fails the gravity check.
        for s in &mut samples[200..400] {
            s.accel = [0.0, 0.0, 0.0];
        }
        let d = Drive::new(samples, 100.0, None).unwrap();
        let s = ScriptedSegmentor::new(vec![seg(2), seg(3)], 10).unwrap();
        let traj = run_drive(&d, &s, &r, Parallelism::Sequential).unwrap();
        assert_eq!(traj.iter().map(|p| p.flag).collect::<Vec<_>>(), vec![false, true, false]);
        assert_eq!(traj[1].seg_raw, None);
        assert_eq!(traj.iter().map(|p| p.seg_corrected.get()).collect::<Vec<_>>(), vec![2, 2, 3]);
    }

    #[test]
    fn empty_stream_gives_empty_trajectory() {
        let s = ScriptedSegmentor::new(vec![seg(1)], 4).unwrap();
        let d = Drive::new(Vec::new(), 100.0, None).unwrap();
        assert!(run_drive(&d, &s, &straight(4), Parallelism::Sequential).unwrap().is_empty());
    }

    #[test]
    fn trajectory_csv_has_header_and_rows() {
        let r = straight(4);
        let traj = run_labels(&[1.0, 3.0], &[Some(seg(2)), None], &r);
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "t,x,y,seg_raw,seg_corrected,flag\n1,37.5,0,2,2,0\n3,37.5,0,,2,1\n");
    }
}
