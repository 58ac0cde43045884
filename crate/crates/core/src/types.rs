//! Primitive domain types shared by every stage of the pipeline.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard gravity, m/s^2.
pub const GRAVITY: f64 = 9.80665;

/// Window length in seconds.
pub const WINDOW_SECONDS: f64 = 2.0;

/// Common rate every window is resampled to.
pub const PROCESSED_RATE_HZ: f64 = 20.0;

/// Rows in a processed window (2 s at 20 Hz).
pub const PROCESSED_LEN: usize = 40;

/// Columns of every IMU matrix: ax, ay, az, gx, gy, gz.
pub const CHANNELS: usize = 6;

pub const AX: usize = 0;
pub const AY: usize = 1;
pub const AZ: usize = 2;
pub const GX: usize = 3;
pub const GY: usize = 4;
pub const GZ: usize = 5;

/// One 6-axis IMU reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    /// Seconds.
    pub t: f64,
    /// Specific force, m/s^2.
    pub accel: [f64; 3],
    /// Angular rate, rad/s.
    pub gyro: [f64; 3],
}

impl ImuSample {
    pub fn row(&self) -> [f64; CHANNELS] {
        [self.accel[0], self.accel[1], self.accel[2], self.gyro[0], self.gyro[1], self.gyro[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.t.is_finite() && self.accel.iter().chain(&self.gyro).all(|v| v.is_finite())
    }
}

/// Two seconds of raw IMU data at the native rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    rate_hz: f64,
    rows: Vec<[f64; CHANNELS]>,
}

impl RawWindow {
    pub fn new(rate_hz: f64, rows: Vec<[f64; CHANNELS]>) -> Result<Self> {
        let expected = window_len(rate_hz)?;
        if rows.len() != expected {
            return Err(Error::Shape {
                expected: format!("{expected}x6 window at {rate_hz} Hz"),
                actual: format!("{}x6", rows.len()),
            });
        }
        Ok(Self { rate_hz, rows })
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn rows(&self) -> &[[f64; CHANNELS]] {
        &self.rows
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[c]).collect()
    }
}

/// Number of samples in a 2 s window at `rate_hz`.
pub fn window_len(rate_hz: f64) -> Result<usize> {
    if !(rate_hz.is_finite() && rate_hz >= PROCESSED_RATE_HZ) {
        return Err(Error::InvalidInput(format!("sample rate {rate_hz} Hz is below 20 Hz")));
    }
    let n = WINDOW_SECONDS * rate_hz;
    if (n - n.round()).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "sample rate {rate_hz} Hz does not give an integer number of samples per 2 s window"
        )));
    }
    Ok(n.round() as usize)
}

/// A preprocessed window: 40 rows at 20 Hz, gravity-aligned, gravity removed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessedWindow(pub [[f64; CHANNELS]; PROCESSED_LEN]);

impl ProcessedWindow {
    pub fn zeros() -> Self {
        Self([[0.0; CHANNELS]; PROCESSED_LEN])
    }

    pub fn from_rows(rows: &[[f64; CHANNELS]]) -> Result<Self> {
        if rows.len() != PROCESSED_LEN {
            return Err(Error::Shape {
                expected: "40x6".into(),
                actual: format!("{}x6", rows.len()),
            });
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("processed window contains non-finite values".into()));
        }
        let mut data = [[0.0; CHANNELS]; PROCESSED_LEN];
        data.copy_from_slice(rows);
        Ok(Self(data))
    }

    pub fn rows(&self) -> &[[f64; CHANNELS]; PROCESSED_LEN] {
        &self.0
    }

    pub fn column(&self, c: usize) -> [f64; PROCESSED_LEN] {
        std::array::from_fn(|k| self.0[k][c])
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|v| *v *= alpha);
        out
    }
}

/// A route segment, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentId(u32);

impl SegmentId {
    pub fn new(value: u32, n_segments: usize) -> Result<Self> {
        if value == 0 || value as usize > n_segments {
            return Err(Error::InvalidInput(format!("segment {value} is outside [1, {n_segments}]")));
        }
        Ok(Self(value))
    }

    /// Construct without a range check. Callers guarantee `value >= 1`.
    pub(crate) fn new_unchecked(value: u32) -> Self {
        debug_assert!(value >= 1);
        Self(value)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Zero-based index, for array lookups.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        Self(index as u32 + 1)
    }
}

impl fmt::Display for SegmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A point in the local planar east-north frame, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Position, w: f64) -> Position {
        Position::new(self.x + (other.x - self.x) * w, self.y + (other.y - self.y) * w)
    }
}
