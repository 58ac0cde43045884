//! Handcrafted features for the forest segmentor.
//!
//! From the six processed base channels we derive 42 more time channels
//! (derivatives, integrals, quotients, integral quotients, second derivatives)
//! and six Fourier amplitude channels. Time channel order is base `0..6`,
//! derivative `6..12`, integral `12..18`, quotient `18..30`, integral
//! quotient `30..42`, second derivative `42..48`. The fixed layout is:
//!
//! | block | count |
//! |-------|-------|
//! | 12 statistics x 48 time channels | 576 |
//! | mean absolute deviation of the 24 quotient channels | 24 |
//! | 11 statistics x 6 Fourier channels (no spectral entropy) | 66 |
//! | signal magnitude area of 8 channel triplets | 8 |
//! | Pearson correlation of 24 channel couplets | 24 |
//! | AR(2) coefficients of the 6 base channels | 12 |
//!
//! for [`FEATURE_COUNT`] = 710 values. [`layout`] names every index.

use std::cell::RefCell;
use std::io::{Read, Write};
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::Parallelism;
use crate::types::{ProcessedWindow, CHANNELS, PROCESSED_LEN, PROCESSED_RATE_HZ};

pub const FEATURE_COUNT: usize = 710;

/// Denominator guard for quotients and the max/min ratio.
pub const EPSILON: f64 = 1e-6;

pub const TIME_CHANNELS: usize = 48;
pub const FOURIER_CHANNELS: usize = 6;
pub const FOURIER_BINS: usize = PROCESSED_LEN / 2 + 1;

const BASE_NAMES: [&str; CHANNELS] = ["ax", "ay", "az", "gx", "gy", "gz"];

/// Quotient pairs as (numerator, denominator) base-channel indices.
const QUOTIENTS: [(usize, usize); 12] = [
    (3, 4), (4, 3), (5, 3), (3, 5), (4, 5), (5, 4),
    (0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1),
];

/// Correlation couplets within one 6-channel group (base, derivative, integral).
const COUPLETS: [(usize, usize); 6] = [(3, 4), (3, 5), (4, 5), (0, 1), (0, 2), (1, 2)];

/// Correlation couplets among the Fourier channels.
const FOURIER_COUPLETS: [(usize, usize); 6] = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];

pub const STAT_NAMES: [&str; 12] = [
    "mean", "std", "min", "max", "median", "mad", "m2", "skew", "kurt", "iqr", "spec_entropy", "maxmin",
];

const SPEC_ENTROPY: usize = 10;

/// The 48 derived time channels plus 6 Fourier amplitude channels of one window.
#[derive(Debug, Clone)]
pub struct ChannelSet {
    pub time: Vec<[f64; PROCESSED_LEN]>,
    pub fourier: Vec<[f64; FOURIER_BINS]>,
}

/// A fixed-length feature vector in [`layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_COUNT {
            return Err(Error::Shape {
                expected: format!("{FEATURE_COUNT} features"),
                actual: values.len().to_string(),
            });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

fn time_channel_names() -> Vec<String> {
    let mut names: Vec<String> = BASE_NAMES.iter().map(|s| s.to_string()).collect();
    names.extend(BASE_NAMES.iter().map(|s| format!("d_{s}")));
    names.extend(BASE_NAMES.iter().map(|s| format!("i_{s}")));
    names.extend(QUOTIENTS.iter().map(|&(a, b)| format!("{}/{}", BASE_NAMES[a], BASE_NAMES[b])));
    names.extend(QUOTIENTS.iter().map(|&(a, b)| format!("i_{}/i_{}", BASE_NAMES[a], BASE_NAMES[b])));
    names.extend(BASE_NAMES.iter().map(|s| format!("dd_{s}")));
    names
}

fn fourier_channel_names() -> Vec<String> {
    BASE_NAMES.iter().map(|s| format!("F_{s}")).collect()
}

/// Name of every feature index.
pub fn layout() -> &'static [String] {
    static LAYOUT: OnceLock<Vec<String>> = OnceLock::new();
    LAYOUT.get_or_init(|| {
        let time = time_channel_names();
        let fourier = fourier_channel_names();
        let mut names = Vec::with_capacity(FEATURE_COUNT);
        for ch in &time {
            names.extend(STAT_NAMES.iter().map(|s| format!("{ch}.{s}")));
        }
        for ch in &time[18..42] {
            names.push(format!("{ch}.meanabsdev"));
        }
        for ch in &fourier {
            for (i, s) in STAT_NAMES.iter().enumerate() {
                if i != SPEC_ENTROPY {
                    names.push(format!("{ch}.{s}"));
                }
            }
        }
        for group in SMA_TRIPLETS {
            let n = |i: usize| match group {
                Group::Time(off) => &time[off + i],
                Group::Fourier(off) => &fourier[off + i],
            };
            names.push(format!("sma({},{},{})", n(0), n(1), n(2)));
        }
        for off in [0, 6, 12] {
            for &(a, b) in &COUPLETS {
                names.push(format!("corr({},{})", time[off + a], time[off + b]));
            }
        }
        for &(a, b) in &FOURIER_COUPLETS {
            names.push(format!("corr({},{})", fourier[a], fourier[b]));
        }
        for ch in BASE_NAMES {
            names.push(format!("ar1({ch})"));
            names.push(format!("ar2({ch})"));
        }
        debug_assert_eq!(names.len(), FEATURE_COUNT);
        names
    })
}

/// Hex SHA-256 of the layout, stored with trained models.
pub fn layout_hash() -> String {
    let mut h = Sha256::new();
    for name in layout() {
        h.update(name.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write the layout as CSV `index,name`.
pub fn write_layout_csv<W: Write>(writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["index", "name"]).map_err(csv_err)?;
    for (i, name) in layout().iter().enumerate() {
        w.write_record([i.to_string(), name.clone()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<layout>", e))?;
    Ok(())
}

/// Read a layout CSV back into names, checking the index column.
pub fn read_layout_csv<R: Read>(reader: R) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut names = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let idx: usize = rec.get(0).unwrap_or("").parse().map_err(|e| Error::parse("<layout>", e))?;
        if idx != i {
            return Err(Error::parse("<layout>", format!("index {idx} out of order at row {i}")));
        }
        names.push(rec.get(1).unwrap_or("").to_string());
    }
    Ok(names)
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse("<csv>", e)
}

/// Start of a 3-channel group in the time or Fourier channel list.
#[derive(Clone, Copy)]
enum Group {
    Time(usize),
    Fourier(usize),
}

/// Gyro, accel, accel derivative, gyro derivative, accel integral, gyro integral,
/// Fourier gyro, Fourier accel.
const SMA_TRIPLETS: [Group; 8] = [
    Group::Time(3),
    Group::Time(0),
    Group::Time(6),
    Group::Time(9),
    Group::Time(12),
    Group::Time(15),
    Group::Fourier(3),
    Group::Fourier(0),
];

/// Forward difference scaled to per-second, last value repeated.
pub fn derivative(x: &[f64; PROCESSED_LEN]) -> [f64; PROCESSED_LEN] {
    let mut d = [0.0; PROCESSED_LEN];
    for k in 0..PROCESSED_LEN - 1 {
        d[k] = (x[k + 1] - x[k]) * PROCESSED_RATE_HZ;
    }
    d[PROCESSED_LEN - 1] = d[PROCESSED_LEN - 2];
    d
}

/// Cumulative trapezoid starting at zero.
pub fn integral(x: &[f64; PROCESSED_LEN]) -> [f64; PROCESSED_LEN] {
    let dt = 1.0 / PROCESSED_RATE_HZ;
    let mut out = [0.0; PROCESSED_LEN];
    for k in 1..PROCESSED_LEN {
        out[k] = out[k - 1] + 0.5 * (x[k - 1] + x[k]) * dt;
    }
    out
}

/// `a / b` with `|b|` floored at [`EPSILON`], keeping the sign of `b` (zero counts as positive).
pub fn guarded_quotient(a: f64, b: f64) -> f64 {
    let sign = if b < 0.0 { -1.0 } else { 1.0 };
    a / (sign * b.abs().max(EPSILON))
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

/// One-sided DFT magnitudes (rectangular window, DC included): `n / 2 + 1` bins.
pub fn amplitude_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft_plan(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Normalised Shannon entropy of the one-sided periodogram, in [0, 1].
pub fn spectral_entropy(x: &[f64]) -> f64 {
    let power: Vec<f64> = amplitude_spectrum(x).iter().map(|a| a * a).collect();
    let bins = power.len();
    let total: f64 = power.iter().sum();
    if bins < 2 || !(total > 0.0) || !total.is_finite() {
        return 0.0;
    }
    let h: f64 = power
        .iter()
        .map(|&p| p / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    h / (bins as f64).ln()
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted_copy(x: &[f64]) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

/// Variance too small relative to the mean to carry shape information.
fn degenerate_variance(m2: f64, mean: f64) -> bool {
    !(m2 > 1e-24 * mean * mean) || m2 == 0.0
}

/// The twelve per-channel statistics, in [`STAT_NAMES`] order.
///
/// Moments use population (1/n) normalisation; kurtosis is `m4 / m2^2`
/// (not excess). Skewness and kurtosis are 0 for a constant channel.
pub fn stat_features(x: &[f64]) -> [f64; 12] {
    let n = x.len().max(1) as f64;
    let mu = mean(x);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mu;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let (skew, kurt) = if degenerate_variance(m2, mu) { (0.0, 0.0) } else { (m3 / m2.powf(1.5), m4 / (m2 * m2)) };

    let sorted = sorted_copy(x);
    let min = sorted.first().copied().unwrap_or(0.0);
    let max = sorted.last().copied().unwrap_or(0.0);
    let median = quantile_sorted(&sorted, 0.5);
    let abs_dev = sorted_copy(&x.iter().map(|v| (v - median).abs()).collect::<Vec<_>>());
    let mad = quantile_sorted(&abs_dev, 0.5);
    let second_moment = x.iter().map(|v| v * v).sum::<f64>() / n;
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let (abs_min, abs_max) = x
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    let maxmin = if x.is_empty() { 0.0 } else { abs_max / abs_min.max(EPSILON) };

    [
        mu,
        m2.sqrt(),
        min,
        max,
        median,
        mad,
        second_moment,
        skew,
        kurt,
        iqr,
        spectral_entropy(x),
        maxmin,
    ]
}

pub fn mean_absolute_deviation(x: &[f64]) -> f64 {
    let mu = mean(x);
    x.iter().map(|v| (v - mu).abs()).sum::<f64>() / x.len().max(1) as f64
}

/// Mean over samples of `|x| + |y| + |z|`.
pub fn signal_magnitude_area(x: &[f64], y: &[f64], z: &[f64]) -> f64 {
    let n = x.len().min(y.len()).min(z.len());
    (0..n).map(|k| x[k].abs() + y[k].abs() + z[k].abs()).sum::<f64>() / n.max(1) as f64
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let (mx, my) = (mean(&x[..n]), mean(&y[..n]));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let (dx, dy) = (x[k] - mx, y[k] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    let nf = n as f64;
    if degenerate_variance(sxx / nf, mx) || degenerate_variance(syy / nf, my) {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Least-squares AR(2) fit without intercept: `x[k] ~ p1 x[k-1] + p2 x[k-2]`.
pub fn ar2_coefficients(x: &[f64]) -> [f64; 2] {
    if x.len() < 3 {
        return [0.0, 0.0];
    }
    let (mut s11, mut s22, mut s12, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for k in 2..x.len() {
        let (x0, x1, x2) = (x[k], x[k - 1], x[k - 2]);
        s11 += x1 * x1;
        s22 += x2 * x2;
        s12 += x1 * x2;
        r1 += x0 * x1;
        r2 += x0 * x2;
    }
    let det = s11 * s22 - s12 * s12;
    if s11 > 0.0 && s22 > 0.0 && det > 1e-12 * s11 * s22 {
        [(r1 * s22 - r2 * s12) / det, (r2 * s11 - r1 * s12) / det]
    } else if s11 > 0.0 {
        [r1 / s11, 0.0]
    } else {
        [0.0, 0.0]
    }
}

pub fn derive_channels(w: &ProcessedWindow) -> ChannelSet {
    let base: Vec<[f64; PROCESSED_LEN]> = (0..CHANNELS).map(|c| w.column(c)).collect();
    let deriv: Vec<_> = base.iter().map(derivative).collect();
    let integ: Vec<_> = base.iter().map(integral).collect();
    let quotient = |src: &[[f64; PROCESSED_LEN]]| -> Vec<[f64; PROCESSED_LEN]> {
        QUOTIENTS
            .iter()
            .map(|&(a, b)| std::array::from_fn(|k| guarded_quotient(src[a][k], src[b][k])))
            .collect()
    };
    let mut time = Vec::with_capacity(TIME_CHANNELS);
    time.extend_from_slice(&base);
    time.extend_from_slice(&deriv);
    time.extend_from_slice(&integ);
    time.extend(quotient(&base));
    time.extend(quotient(&integ));
    time.extend(deriv.iter().map(derivative));
    let fourier = base
        .iter()
        .map(|ch| {
            let amp = amplitude_spectrum(ch);
            std::array::from_fn(|k| amp[k])
        })
        .collect();
    ChannelSet { time, fourier }
}

pub fn extract(w: &ProcessedWindow) -> FeatureVector {
    let ch = derive_channels(w);
    let mut out = Vec::with_capacity(FEATURE_COUNT);
    for c in &ch.time {
        out.extend_from_slice(&stat_features(c));
    }
    for c in &ch.time[18..42] {
        out.push(mean_absolute_deviation(c));
    }
    for c in &ch.fourier {
        let s = stat_features(c);
        out.extend(s.iter().enumerate().filter(|(i, _)| *i != SPEC_ENTROPY).map(|(_, v)| *v));
    }
    for group in SMA_TRIPLETS {
        let v = match group {
            Group::Time(off) => signal_magnitude_area(&ch.time[off], &ch.time[off + 1], &ch.time[off + 2]),
            Group::Fourier(off) => {
                signal_magnitude_area(&ch.fourier[off], &ch.fourier[off + 1], &ch.fourier[off + 2])
            }
        };
        out.push(v);
    }
    for off in [0, 6, 12] {
        for &(a, b) in &COUPLETS {
            out.push(pearson(&ch.time[off + a], &ch.time[off + b]));
        }
    }
    for &(a, b) in &FOURIER_COUPLETS {
        out.push(pearson(&ch.fourier[a], &ch.fourier[b]));
    }
    for c in &ch.time[..CHANNELS] {
        out.extend_from_slice(&ar2_coefficients(c));
    }
    debug_assert_eq!(out.len(), FEATURE_COUNT);
    FeatureVector(out)
}

pub fn extract_batch(windows: &[ProcessedWindow], par: Parallelism) -> Vec<FeatureVector> {
    par.map(windows, extract)
}
