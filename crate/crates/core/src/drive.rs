//! Recorded drives, the 2 s window grid over them, and dataset splits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::route::RouteModel;
use crate::types::{window_len, ImuSample, Position, RawWindow, SegmentId, WINDOW_SECONDS};

/// Ground-truth fix (GNSS stand-in), typically at 1 Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl Fix {
    pub fn position(&self) -> Position {
        Position::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drive {
    samples: Vec<ImuSample>,
    rate_hz: f64,
    ground_truth: Option<Vec<Fix>>,
}

/// A window together with its start time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedWindow {
    pub t_start: f64,
    pub window: RawWindow,
}

impl TimedWindow {
    pub fn t_mid(&self) -> f64 {
        self.t_start + 0.5 * WINDOW_SECONDS
    }
}

/// Relative tolerance on sample spacing.
const JITTER_TOLERANCE: f64 = 0.01;

impl Drive {
    pub fn new(samples: Vec<ImuSample>, rate_hz: f64, ground_truth: Option<Vec<Fix>>) -> Result<Self> {
        window_len(rate_hz)?;
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteSample { index: i });
        }
        let dt = 1.0 / rate_hz;
        for (i, pair) in samples.windows(2).enumerate() {
            let step = pair[1].t - pair[0].t;
            if step < 0.0 {
                return Err(Error::InvalidInput(format!("time decreases at sample {}", i + 1)));
            }
            if (step - dt).abs() > JITTER_TOLERANCE * dt {
                return Err(Error::InvalidInput(format!(
                    "sample spacing {step} s at sample {} deviates from 1/{rate_hz} s by more than 1%",
                    i + 1
                )));
            }
        }
        if let Some(gt) = &ground_truth {
            if gt.windows(2).any(|w| w[1].t < w[0].t) {
                return Err(Error::InvalidInput("ground-truth times must be non-decreasing".into()));
            }
        }
        Ok(Self { samples, rate_hz, ground_truth })
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn ground_truth(&self) -> Option<&[Fix]> {
        self.ground_truth.as_deref()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.rate_hz
    }

    /// Ground truth linearly interpolated at `t`, clamped to the recorded span.
    pub fn position_at(&self, t: f64) -> Option<Position> {
        let gt = self.ground_truth.as_deref()?;
        let first = gt.first()?;
        if t <= first.t {
            return Some(first.position());
        }
        let hi = gt.partition_point(|f| f.t <= t);
        if hi >= gt.len() {
            return Some(gt.last()?.position());
        }
        let (a, b) = (gt[hi - 1], gt[hi]);
        let span = b.t - a.t;
        if span <= 0.0 {
            return Some(a.position());
        }
        Some(a.position().lerp(&b.position(), (t - a.t) / span))
    }

    /// Consecutive non-overlapping 2 s windows; a trailing partial window is dropped.
    pub fn windows(&self) -> Vec<TimedWindow> {
        let Ok(len) = window_len(self.rate_hz) else {
            return Vec::new();
        };
        self.samples
            .chunks_exact(len)
            .map(|chunk| TimedWindow {
                t_start: chunk[0].t,
                window: RawWindow::new(self.rate_hz, chunk.iter().map(ImuSample::row).collect())
                    .expect("chunk length matches the window length"),
            })
            .collect()
    }

    /// Ground-truth segment label for every window, taken at the window's midpoint time.
    pub fn window_labels(&self, route: &RouteModel, corridor: f64) -> Result<Vec<SegmentId>> {
        self.windows()
            .iter()
            .map(|w| {
                let p = self.position_at(w.t_mid()).ok_or_else(|| {
                    Error::InvalidInput("drive has no ground truth to label windows with".into())
                })?;
                route.label_within(&p, corridor)
            })
            .collect()
    }
}

/// Free-function form of [`Drive::windows`].
pub fn window_stream(drive: &Drive) -> Vec<TimedWindow> {
    drive.windows()
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub route: RouteModel,
    pub train: Vec<Drive>,
    pub val: Vec<Drive>,
    pub test: Vec<Drive>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Drive] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Every drive's ground truth must stay within `corridor` of the route.
    pub fn validate(&self, corridor: f64) -> Result<()> {
        for split in Split::ALL {
            for (i, d) in self.split(split).iter().enumerate() {
                for fix in d.ground_truth().unwrap_or_default() {
                    let proj = self.route.project(&fix.position());
                    if proj.distance > corridor {
                        return Err(Error::InvalidInput(format!(
                            "{} drive {i}: fix at t={} is {:.2} m off the route",
                            split.name(),
                            fix.t,
                            proj.distance
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn still_drive(seconds: f64, rate: f64) -> Drive {
        let n = (seconds * rate).round() as usize;
        let samples = (0..n)
            .map(|k| ImuSample { t: k as f64 / rate, accel: [0.0, 0.0, 9.8], gyro: [0.0; 3] })
            .collect();
        Drive::new(samples, rate, None).unwrap()
    }

    #[test]
    fn ten_seconds_gives_five_windows() {
        let w = still_drive(10.0, 200.0).windows();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|w| w.window.rows().len() == 400));
    }

    #[test]
    fn remainder_is_dropped() {
        let d = still_drive(9.5, 200.0);
        let w = d.windows();
        assert_eq!(w.len(), 4);
        assert_eq!(d.samples().len() - 4 * 400, 300);
    }

    #[test]
    fn empty_drive_has_no_windows() {
        assert!(still_drive(0.0, 200.0).windows().is_empty());
        assert!(still_drive(1.9, 200.0).windows().is_empty());
    }

    #[test]
    fn windows_tile_without_gaps() {
        let d = still_drive(13.7, 100.0);
        let w = d.windows();
        for (k, win) in w.iter().enumerate() {
            assert!((win.t_start - 2.0 * k as f64).abs() < 1e-9);
        }
        assert_eq!(w.len(), (13.7f64 / 2.0).floor() as usize);
    }

    #[test]
    fn jitter_and_non_finite_rejected() {
        let mut s: Vec<ImuSample> =
            (0..10).map(|k| ImuSample { t: k as f64 / 100.0, accel: [0.0; 3], gyro: [0.0; 3] }).collect();
        s[5].t += 0.002;
        assert!(Drive::new(s.clone(), 100.0, None).is_err());
        s[5].t -= 0.002;
        s[7].gyro[1] = f64::INFINITY;
        assert!(matches!(Drive::new(s, 100.0, None), Err(Error::NonFiniteSample { index: 7 })));
    }

    #[test]
    fn ground_truth_interpolates_linearly() {
        let gt = vec![Fix { t: 0.0, x: 0.0, y: 0.0 }, Fix { t: 1.0, x: 10.0, y: 0.0 }, Fix { t: 2.0, x: 10.0, y: 4.0 }];
        let samples = (0..400).map(|k| ImuSample { t: k as f64 / 200.0, accel: [0.0; 3], gyro: [0.0; 3] }).collect();
        let d = Drive::new(samples, 200.0, Some(gt)).unwrap();
        assert_eq!(d.position_at(0.5).unwrap(), Position::new(5.0, 0.0));
        assert_eq!(d.position_at(1.5).unwrap(), Position::new(10.0, 2.0));
        assert_eq!(d.position_at(-3.0).unwrap(), Position::new(0.0, 0.0));
        assert_eq!(d.position_at(9.0).unwrap(), Position::new(10.0, 4.0));
    }
}
