//! Window preprocessing: anti-alias low-pass, resampling to 20 Hz, and
//! roll/pitch alignment with gravity removal.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::types::{ProcessedWindow, RawWindow, CHANNELS, GRAVITY, PROCESSED_LEN, PROCESSED_RATE_HZ};

pub const FILTER_ORDER: usize = 4;
pub const CUTOFF_HZ: f64 = 10.0;

/// Accepted band for the mean specific-force magnitude, as a fraction of g.
pub const GRAVITY_BAND: (f64, f64) = (0.5, 1.5);

/// One second-order section, `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II states that hold a constant input `x0` at steady state.
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let y0 = self.dc_gain() * x0;
        let s2 = self.b[2] * x0 - self.a[1] * y0;
        let s1 = self.b[1] * x0 - self.a[0] * y0 + s2;
        [s1, s2]
    }

    /// One transposed direct form II step.
    pub fn step(&self, state: &mut [f64; 2], x: f64) -> f64 {
        let y = self.b[0] * x + state[0];
        state[0] = self.b[1] * x - self.a[0] * y + state[1];
        state[1] = self.b[2] * x - self.a[1] * y;
        y
    }

    fn run(&self, signal: &mut [f64]) {
        let Some(&x0) = signal.first() else { return };
        let mut state = self.steady_state(x0);
        for v in signal.iter_mut() {
            *v = self.step(&mut state, *v);
        }
    }

    fn response(&self, omega: f64) -> (f64, f64) {
        // H(e^{jw}) = (b0 + b1 z^-1 + b2 z^-2) / (1 + a1 z^-1 + a2 z^-2)
        let (c1, s1) = (omega.cos(), -omega.sin());
        let (c2, s2) = ((2.0 * omega).cos(), -(2.0 * omega).sin());
        let num = (self.b[0] + self.b[1] * c1 + self.b[2] * c2, self.b[1] * s1 + self.b[2] * s2);
        let den = (1.0 + self.a[0] * c1 + self.a[1] * c2, self.a[0] * s1 + self.a[1] * s2);
        let d2 = den.0 * den.0 + den.1 * den.1;
        ((num.0 * den.0 + num.1 * den.1) / d2, (num.1 * den.0 - num.0 * den.1) / d2)
    }
}

/// Digital Butterworth low-pass as a cascade of second-order sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub order: usize,
    pub cutoff_hz: f64,
    pub sample_rate_hz: f64,
    pub sections: Vec<Biquad>,
}

impl FilterSpec {
    /// Bilinear-transform design with the cutoff pre-warped. `order` must be even.
    pub fn butterworth(order: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        if order == 0 || !order.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!("filter order {order} must be even and positive")));
        }
        if !(cutoff_hz > 0.0 && sample_rate_hz.is_finite() && 2.0 * cutoff_hz < sample_rate_hz) {
            return Err(Error::Nyquist { cutoff_hz, sample_rate_hz });
        }
        let k = (std::f64::consts::PI * cutoff_hz / sample_rate_hz).tan();
        let k2 = k * k;
        let sections = (0..order / 2)
            .map(|i| {
                let theta = std::f64::consts::PI * (2 * i + 1) as f64 / (2 * order) as f64;
                let alpha = 2.0 * theta.sin();
                let norm = 1.0 + alpha * k + k2;
                let b0 = k2 / norm;
                Biquad {
                    b: [b0, 2.0 * b0, b0],
                    a: [2.0 * (k2 - 1.0) / norm, (1.0 - alpha * k + k2) / norm],
                }
            })
            .collect();
        Ok(Self { order, cutoff_hz, sample_rate_hz, sections })
    }

    /// The preprocessing filter for a given native rate.
    pub fn for_rate(sample_rate_hz: f64) -> Result<Self> {
        Self::butterworth(FILTER_ORDER, CUTOFF_HZ, sample_rate_hz)
    }

    pub fn dc_gain(&self) -> f64 {
        self.sections.iter().map(Biquad::dc_gain).product()
    }

    /// |H| at `freq_hz`, evaluated from the coefficients.
    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        let omega = 2.0 * std::f64::consts::PI * freq_hz / self.sample_rate_hz;
        self.sections
            .iter()
            .map(|s| {
                let (re, im) = s.response(omega);
                re.hypot(im)
            })
            .product()
    }

    /// Filter in place; state is initialised as if the first sample had been held forever.
    pub fn apply(&self, signal: &mut [f64]) {
        for s in &self.sections {
            s.run(signal);
        }
    }
}

/// Filter each column of a series independently.
pub fn lowpass(rows: &[[f64; CHANNELS]], spec: &FilterSpec) -> Result<Vec<[f64; CHANNELS]>> {
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("signal contains non-finite values".into()));
    }
    let mut out = rows.to_vec();
    let mut col = vec![0.0; rows.len()];
    for c in 0..CHANNELS {
        col.iter_mut().zip(rows).for_each(|(v, r)| *v = r[c]);
        spec.apply(&mut col);
        out.iter_mut().zip(&col).for_each(|(r, v)| r[c] = *v);
    }
    Ok(out)
}

/// Linear interpolation of a 2 s series at `rate_hz` onto `t_k = k / 20`, `k = 0..40`.
pub fn resample_20hz(signal: &[f64], rate_hz: f64) -> Result<[f64; PROCESSED_LEN]> {
    let needed = (2.0 * rate_hz).round() as usize;
    if !(rate_hz >= PROCESSED_RATE_HZ) || signal.len() < needed {
        return Err(Error::InvalidInput(format!(
            "resampling needs 2 s of data: {} samples at {rate_hz} Hz",
            signal.len()
        )));
    }
    let ratio = rate_hz / PROCESSED_RATE_HZ;
    Ok(std::array::from_fn(|k| {
        let pos = k as f64 * ratio;
        let i0 = pos.floor() as usize;
        let frac = pos - i0 as f64;
        if frac == 0.0 || i0 + 1 >= signal.len() {
            signal[i0.min(signal.len() - 1)]
        } else {
            signal[i0] + (signal[i0 + 1] - signal[i0]) * frac
        }
    }))
}

/// Minimal rotation taking unit vector `u` onto +z.
pub fn rotation_to_vertical(u: &Vector3<f64>) -> Matrix3<f64> {
    let z = Vector3::z();
    let c = u.dot(&z);
    if c < -1.0 + 1e-12 {
        // Upside down: half turn about x.
        return Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
    }
    let v = u.cross(&z);
    let vx = Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0);
    Matrix3::identity() + vx + vx * vx / (1.0 + c)
}

/// Rotate accel and gyro so the window-mean specific force points along +z,
/// then subtract g from the vertical accel. Yaw is left unresolved.
pub fn gravity_align(rows: &[[f64; CHANNELS]; PROCESSED_LEN]) -> Result<[[f64; CHANNELS]; PROCESSED_LEN]> {
    let mut mean = Vector3::zeros();
    for r in rows {
        mean += Vector3::new(r[0], r[1], r[2]);
    }
    mean /= PROCESSED_LEN as f64;
    let magnitude = mean.norm();
    if !(magnitude >= GRAVITY_BAND.0 * GRAVITY && magnitude <= GRAVITY_BAND.1 * GRAVITY) {
        return Err(Error::HighDynamics { magnitude });
    }
    let rot = rotation_to_vertical(&(mean / magnitude));
    Ok(std::array::from_fn(|k| {
        let r = &rows[k];
        let a = rot * Vector3::new(r[0], r[1], r[2]);
        let g = rot * Vector3::new(r[3], r[4], r[5]);
        [a.x, a.y, a.z - GRAVITY, g.x, g.y, g.z]
    }))
}

/// Low-pass, resample to 20 Hz, align with gravity.
pub fn preprocess(raw: &RawWindow) -> Result<ProcessedWindow> {
    let spec = FilterSpec::for_rate(raw.rate_hz())?;
    preprocess_with(raw, &spec)
}

pub fn preprocess_with(raw: &RawWindow, spec: &FilterSpec) -> Result<ProcessedWindow> {
    let filtered = lowpass(raw.rows(), spec)?;
    let mut resampled = [[0.0; CHANNELS]; PROCESSED_LEN];
    let mut col = vec![0.0; filtered.len()];
    for c in 0..CHANNELS {
        col.iter_mut().zip(&filtered).for_each(|(v, r)| *v = r[c]);
        let out = resample_20hz(&col, raw.rate_hz())?;
        for (row, v) in resampled.iter_mut().zip(out) {
            row[c] = v;
        }
    }
    Ok(ProcessedWindow(gravity_align(&resampled)?))
}

/// Preprocess many windows, keeping input order. Each result is independent.
pub fn preprocess_batch(windows: &[RawWindow], par: Parallelism) -> Vec<Result<ProcessedWindow>> {
    par.map(windows, preprocess)
}
