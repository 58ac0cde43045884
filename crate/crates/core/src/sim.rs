//! Deterministic synthetic drives over a route with per-segment road signatures.
//!
//! Road input is defined over arc length, so a texture at spatial frequency `n`
//! (cycles/m) appears at `v * n` Hz. Vertical input passes through a
//! quarter-car style transmissibility before reaching the body.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::drive::{Dataset, Drive, Fix, Split};
use crate::error::{Error, Result};
use crate::par::{derive_index_seed, derive_seed, Parallelism};
use crate::preprocess::Biquad;
use crate::route::RouteModel;
use crate::types::{ImuSample, Position, GRAVITY};

pub const MANIFEST_VERSION: u32 = 1;

/// Reference spatial frequency for roughness levels, cycles/m.
const ROUGHNESS_N0: f64 = 0.1;
const ROUGHNESS_BANDS: usize = 16;
const ROUGHNESS_RANGE: (f64, f64) = (0.05, 2.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    Straight { length_m: f64 },
    /// Positive angle turns left.
    Arc { radius_m: f64, angle_deg: f64 },
}

impl Primitive {
    fn length(&self) -> f64 {
        match *self {
            Primitive::Straight { length_m } => length_m,
            Primitive::Arc { radius_m, angle_deg } => radius_m * angle_deg.to_radians().abs(),
        }
    }

    fn curvature(&self) -> f64 {
        match *self {
            Primitive::Straight { .. } => 0.0,
            Primitive::Arc { radius_m, angle_deg } => angle_deg.signum() / radius_m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RouteSpec {
    pub primitives: Vec<Primitive>,
    pub start: Position,
    pub heading_deg: f64,
    /// Polyline spacing along arcs, m.
    pub spacing_m: f64,
}

impl Default for RouteSpec {
    fn default() -> Self {
        Self::car()
    }
}

impl RouteSpec {
    fn with_total(mut primitives: Vec<Primitive>, total_m: f64) -> Self {
        let used: f64 = primitives.iter().map(Primitive::length).sum();
        primitives.push(Primitive::Straight { length_m: total_m - used });
        Self { primitives, start: Position::new(0.0, 0.0), heading_deg: 0.0, spacing_m: 1.0 }
    }

    /// Mixed urban-style route of 5919 m.
    pub fn car() -> Self {
        Self::with_total(
            vec![
                Primitive::Straight { length_m: 800.0 },
                Primitive::Arc { radius_m: 150.0, angle_deg: 90.0 },
                Primitive::Straight { length_m: 1200.0 },
                Primitive::Arc { radius_m: 200.0, angle_deg: -60.0 },
                Primitive::Straight { length_m: 900.0 },
                Primitive::Arc { radius_m: 100.0, angle_deg: 90.0 },
                Primitive::Straight { length_m: 1000.0 },
                Primitive::Arc { radius_m: 300.0, angle_deg: -45.0 },
            ],
            5919.0,
        )
    }

    /// Shorter 2000 m route.
    pub fn short() -> Self {
        Self::with_total(
            vec![
                Primitive::Straight { length_m: 600.0 },
                Primitive::Arc { radius_m: 120.0, angle_deg: 90.0 },
                Primitive::Straight { length_m: 500.0 },
                Primitive::Arc { radius_m: 150.0, angle_deg: -60.0 },
            ],
            2000.0,
        )
    }

    pub fn straight(length_m: f64) -> Self {
        Self::with_total(Vec::new(), length_m)
    }

    pub fn length(&self) -> f64 {
        self.primitives.iter().map(Primitive::length).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SignatureConfig {
    pub texture_peaks: usize,
    /// Spatial frequency range, cycles/m.
    pub texture_freq: (f64, f64),
    /// Vertical input amplitude range, m/s^2.
    pub texture_amp: (f64, f64),
    /// Displacement PSD level at 0.1 cycles/m, m^3.
    pub roughness_gd: (f64, f64),
    pub bumps_per_km: f64,
    pub bump_amp: (f64, f64),
    pub bump_duration_s: f64,
    /// Largest roll/pitch rate per unit of vertical body acceleration, (rad/s)/(m/s^2).
    pub roll_coupling: f64,
    pub pitch_coupling: f64,
}

impl Default for SignatureConfig {
    fn default() -> Self {
        Self {
            texture_peaks: 2,
            texture_freq: (0.15, 1.0),
            texture_amp: (0.3, 1.5),
            roughness_gd: (4e-6, 64e-6),
            bumps_per_km: 1.0,
            bump_amp: (1.0, 3.0),
            bump_duration_s: 0.15,
            roll_coupling: 0.05,
            pitch_coupling: 0.05,
        }
    }
}

impl SignatureConfig {
    /// No road input at all.
    pub fn silent() -> Self {
        Self {
            texture_peaks: 0,
            texture_amp: (0.0, 0.0),
            roughness_gd: (0.0, 0.0),
            bumps_per_km: 0.0,
            roll_coupling: 0.0,
            pitch_coupling: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeedConfig {
    pub mean_mps: f64,
    pub std_mps: f64,
    /// Distance between target-speed redraws, m.
    pub change_every_m: f64,
    pub stop_probability: f64,
    pub stop_duration_s: f64,
    pub accel_limit: f64,
    /// Rest before moving off; zero starts at the first target speed.
    pub initial_rest_s: f64,
}

impl Default for SpeedConfig {
    fn default() -> Self {
        Self {
            mean_mps: 12.0,
            std_mps: 2.0,
            change_every_m: 300.0,
            stop_probability: 0.1,
            stop_duration_s: 10.0,
            accel_limit: 1.5,
            initial_rest_s: 2.0,
        }
    }
}

impl SpeedConfig {
    pub fn constant(mean_mps: f64) -> Self {
        Self { mean_mps, std_mps: 0.0, stop_probability: 0.0, initial_rest_s: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// White noise densities, units/sqrt(Hz); per-sample std is density * sqrt(rate).
    pub accel_density: f64,
    pub gyro_density: f64,
    /// Per-drive constant bias magnitudes in a random direction.
    pub accel_bias: f64,
    pub gyro_bias: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { accel_density: 0.003, gyro_density: 0.0005, accel_bias: 0.1, gyro_bias: 0.01 }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { accel_density: 0.0, gyro_density: 0.0, accel_bias: 0.0, gyro_bias: 0.0 }
    }
}

/// Largest absolute mount roll and pitch, drawn uniformly per drive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MountConfig {
    pub roll_deg: f64,
    pub pitch_deg: f64,
}

impl Default for MountConfig {
    fn default() -> Self {
        Self { roll_deg: 10.0, pitch_deg: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleConfig {
    pub natural_freq_hz: f64,
    pub damping: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self { natural_freq_hz: 1.5, damping: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub route: RouteSpec,
    /// Number of signature regions (and the route's default segment count).
    pub n_segments: usize,
    pub signature: SignatureConfig,
    pub speed: SpeedConfig,
    pub noise: NoiseConfig,
    pub mount: MountConfig,
    pub vehicle: VehicleConfig,
    pub rate_hz: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::car()
    }
}

impl SimConfig {
    /// 5919 m, 40 segments, 200 Hz, consumer-grade sensor noise.
    pub fn car() -> Self {
        Self {
            route: RouteSpec::car(),
            n_segments: 40,
            signature: SignatureConfig::default(),
            speed: SpeedConfig::default(),
            noise: NoiseConfig::default(),
            mount: MountConfig::default(),
            vehicle: VehicleConfig::default(),
            rate_hz: 200.0,
            seed: 0,
        }
    }

    /// 2000 m, 20 segments with strong textures, steady speed, consumer-grade noise.
    pub fn separable() -> Self {
        Self {
            route: RouteSpec::short(),
            n_segments: 20,
            signature: SignatureConfig {
                texture_peaks: 3,
                texture_freq: (0.1, 0.9),
                texture_amp: (0.5, 4.0),
                roughness_gd: (1e-6, 32e-6),
                bumps_per_km: 0.0,
                roll_coupling: 0.2,
                pitch_coupling: 0.2,
                ..SignatureConfig::default()
            },
            speed: SpeedConfig {
                mean_mps: 10.0,
                std_mps: 0.7,
                change_every_m: 250.0,
                stop_probability: 0.0,
                ..SpeedConfig::default()
            },
            noise: NoiseConfig::default(),
            mount: MountConfig::default(),
            vehicle: VehicleConfig::default(),
            rate_hz: 100.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.speed.mean_mps > 0.0) {
            return bad("mean speed must be positive");
        }
        if !(self.rate_hz >= 40.0) {
            return bad("simulation rate must be at least 40 Hz");
        }
        if self.n_segments == 0 {
            return bad("n_segments must be at least 1");
        }
        if !(self.speed.accel_limit > 0.0) || self.speed.std_mps < 0.0 || !(0.0..=1.0).contains(&self.speed.stop_probability)
        {
            return bad("speed profile parameters out of range");
        }
        let s = &self.signature;
        for (lo, hi) in [s.texture_freq, s.texture_amp, s.roughness_gd, s.bump_amp] {
            if !(lo >= 0.0 && hi >= lo) {
                return bad("signature ranges must satisfy 0 <= lo <= hi");
            }
        }
        if !(self.vehicle.natural_freq_hz > 0.0 && self.vehicle.natural_freq_hz < self.rate_hz / 2.0)
            || !(self.vehicle.damping > 0.0)
        {
            return bad("vehicle response parameters out of range");
        }
        for p in &self.route.primitives {
            let ok = match *p {
                Primitive::Straight { length_m } => length_m >= 0.0,
                Primitive::Arc { radius_m, angle_deg } => radius_m > 0.0 && angle_deg.is_finite(),
            };
            if !ok {
                return Err(Error::DegenerateRoute(format!("invalid route primitive {p:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TexturePeak {
    pub freq: f64,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub position_m: f64,
    pub amplitude: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSignature {
    pub roughness_psd_level: f64,
    pub texture_peaks: Vec<TexturePeak>,
    pub bump_events: Vec<Bump>,
    pub roll_coupling: f64,
    pub pitch_coupling: f64,
    /// Roughness components as (spatial frequency, displacement amplitude, phase).
    pub roughness: Vec<(f64, f64, f64)>,
}

impl SegmentSignature {
    /// Vertical road input at arc length `s` and speed `v`, before the vehicle response.
    fn input(&self, s: f64, v: f64) -> f64 {
        let texture: f64 = self.texture_peaks.iter().map(|p| p.amplitude * (2.0 * PI * p.freq * s + p.phase).sin()).sum();
        let rough: f64 = self
            .roughness
            .iter()
            .map(|&(n, h, phi)| {
                let w = 2.0 * PI * n * v;
                -w * w * h * (2.0 * PI * n * s + phi).sin()
            })
            .sum();
        texture + rough
    }
}

/// Route, signatures and the curvature profile used to drive the vehicle model.
#[derive(Debug, Clone)]
pub struct SimRoute {
    pub route: RouteModel,
    pub signatures: Vec<SegmentSignature>,
    /// `(start arc, end arc, curvature)` per primitive.
    pub curvature: Vec<(f64, f64, f64)>,
}

impl SimRoute {
    pub fn curvature_at(&self, s: f64) -> f64 {
        let i = self.curvature.partition_point(|c| c.1 <= s).min(self.curvature.len().saturating_sub(1));
        self.curvature.get(i).map_or(0.0, |c| c.2)
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo > 0.0 && hi > lo {
        (rng.random_range(lo.ln()..hi.ln())).exp()
    } else {
        uniform(rng, (lo, hi))
    }
}

fn polyline(spec: &RouteSpec) -> (Vec<Position>, Vec<(f64, f64, f64)>) {
    let mut pts = vec![spec.start];
    let mut heading = spec.heading_deg.to_radians();
    let mut arc = 0.0;
    let mut profile = Vec::new();
    let mut cur = spec.start;
    for p in &spec.primitives {
        let len = p.length();
        if len <= 0.0 {
            continue;
        }
        match *p {
            Primitive::Straight { length_m } => {
                cur = Position::new(cur.x + length_m * heading.cos(), cur.y + length_m * heading.sin());
                pts.push(cur);
            }
            Primitive::Arc { radius_m, angle_deg } => {
                let total = angle_deg.to_radians();
                let steps = ((len / spec.spacing_m.max(1e-3)).ceil() as usize).max(1);
                let sign = total.signum();
                // Centre of the turn, to the left for positive angles.
                let (cx, cy) = (cur.x - sign * radius_m * heading.sin(), cur.y + sign * radius_m * heading.cos());
                for k in 1..=steps {
                    let h = heading + total * k as f64 / steps as f64;
                    pts.push(Position::new(cx + sign * radius_m * h.sin(), cy - sign * radius_m * h.cos()));
                }
                heading += total;
                cur = *pts.last().unwrap();
            }
        }
        profile.push((arc, arc + len, p.curvature()));
        arc += len;
    }
    (pts, profile)
}

fn draw_signature(cfg: &SignatureConfig, bounds: (f64, f64), rng: &mut ChaCha8Rng) -> SegmentSignature {
    let texture_peaks = (0..cfg.texture_peaks)
        .map(|_| TexturePeak {
            freq: log_uniform(rng, cfg.texture_freq),
            amplitude: uniform(rng, cfg.texture_amp),
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let roughness_gd = log_uniform(rng, cfg.roughness_gd);
    let (n_lo, n_hi) = ROUGHNESS_RANGE;
    let ratio = (n_hi / n_lo).powf(1.0 / ROUGHNESS_BANDS as f64);
    let roughness = (0..ROUGHNESS_BANDS)
        .map(|k| {
            let lo = n_lo * ratio.powi(k as i32);
            let (hi, n) = (lo * ratio, lo * ratio.sqrt());
            let gd = roughness_gd * (n / ROUGHNESS_N0).powi(-2);
            (n, (2.0 * gd * (hi - lo)).sqrt(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let expected = cfg.bumps_per_km * (bounds.1 - bounds.0) / 1000.0;
    let count = expected.floor() as usize + usize::from(rng.random::<f64>() < expected.fract());
    let mut bump_events: Vec<Bump> = (0..count)
        .map(|_| Bump {
            position_m: rng.random_range(bounds.0..bounds.1),
            amplitude: uniform(rng, cfg.bump_amp),
            duration_s: cfg.bump_duration_s,
        })
        .collect();
    bump_events.sort_by(|a, b| a.position_m.total_cmp(&b.position_m));
    SegmentSignature {
        roughness_psd_level: roughness_gd,
        texture_peaks,
        bump_events,
        roll_coupling: uniform(rng, (-cfg.roll_coupling, cfg.roll_coupling)),
        pitch_coupling: uniform(rng, (-cfg.pitch_coupling, cfg.pitch_coupling)),
        roughness,
    }
}

pub fn synth_route(cfg: &SimConfig) -> Result<SimRoute> {
    cfg.validate()?;
    let (pts, curvature) = polyline(&cfg.route);
    let route = RouteModel::build(pts, cfg.n_segments)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "signatures"));
    let b = route.boundaries();
    let signatures = (0..cfg.n_segments).map(|i| draw_signature(&cfg.signature, (b[i], b[i + 1]), &mut rng)).collect();
    Ok(SimRoute { route, signatures, curvature })
}

/// Base-excitation transmissibility `(2 z w s + w^2) / (s^2 + 2 z w s + w^2)`, bilinear with prewarp at `w`.
pub fn quarter_car(v: &VehicleConfig, rate_hz: f64) -> Biquad {
    let w = 2.0 * PI * v.natural_freq_hz;
    let k = w / (w / (2.0 * rate_hz)).tan();
    let (b1, b0) = (2.0 * v.damping * w, w * w);
    let d0 = k * k + b1 * k + b0;
    Biquad {
        b: [(b1 * k + b0) / d0, 2.0 * b0 / d0, (b0 - b1 * k) / d0],
        a: [(2.0 * b0 - 2.0 * k * k) / d0, (k * k - b1 * k + b0) / d0],
    }
}

/// Per-drive draws: mount and biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriveDraws {
    pub mount_roll: f64,
    pub mount_pitch: f64,
    pub accel_bias: [f64; 3],
    pub gyro_bias: [f64; 3],
}

fn random_direction(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if v.norm() > 1e-9 {
            return v.normalize();
        }
    }
}

/// Sensor-to-vehicle rotation for a mount roll and pitch.
pub fn mount_rotation(roll: f64, pitch: f64) -> Matrix3<f64> {
    (Rotation3::from_axis_angle(&Vector3::y_axis(), pitch) * Rotation3::from_axis_angle(&Vector3::x_axis(), roll))
        .into_inner()
}

struct SpeedState {
    v: f64,
    target: f64,
    next_change: f64,
    stopping: bool,
    stopped_for: f64,
}

pub fn synth_drive(sim: &SimRoute, cfg: &SimConfig, drive_seed: u64) -> Result<Drive> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(drive_seed);
    let draws = DriveDraws {
        mount_roll: uniform(&mut rng, (-cfg.mount.roll_deg, cfg.mount.roll_deg)).to_radians(),
        mount_pitch: uniform(&mut rng, (-cfg.mount.pitch_deg, cfg.mount.pitch_deg)).to_radians(),
        accel_bias: (random_direction(&mut rng) * cfg.noise.accel_bias).into(),
        gyro_bias: (random_direction(&mut rng) * cfg.noise.gyro_bias).into(),
    };
    let ct = mount_rotation(draws.mount_roll, draws.mount_pitch).transpose();
    let rate = cfg.rate_hz;
    let dt = 1.0 / rate;
    let accel_noise = Normal::new(0.0, cfg.noise.accel_density * rate.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let gyro_noise = Normal::new(0.0, cfg.noise.gyro_density * rate.sqrt()).map_err(|e| Error::Config(e.to_string()))?;
    let sp = &cfg.speed;
    let draw_target = |rng: &mut ChaCha8Rng| {
        if sp.std_mps > 0.0 {
            let v: f64 = rng.sample::<f64, _>(StandardNormal) * sp.std_mps + sp.mean_mps;
            v.clamp(0.3 * sp.mean_mps, 1.7 * sp.mean_mps)
        } else {
            sp.mean_mps
        }
    };
    let first = draw_target(&mut rng);
    let mut speed = SpeedState {
        v: if sp.initial_rest_s > 0.0 { 0.0 } else { first },
        target: first,
        next_change: sp.change_every_m,
        stopping: false,
        stopped_for: 0.0,
    };
    let qc = quarter_car(&cfg.vehicle, rate);
    let mut qc_state = [0.0; 2];
    let length = sim.route.length();
    let max_t = sp.initial_rest_s + 20.0 * length / sp.mean_mps + 1e4;

    let mut samples = Vec::new();
    let mut fixes = Vec::new();
    let mut active_bumps: Vec<(f64, Bump)> = Vec::new();
    let mut s = 0.0f64;
    let mut a_long = 0.0;
    let per_second = rate.round() as usize;
    let mut k = 0usize;
    loop {
        let t = k as f64 * dt;
        if t > max_t {
            return Err(Error::Config("speed profile never reaches the end of the route".into()));
        }
        let seg = sim.route.segment_at_arc(s.min(length)).index();
        let sig = &sim.signatures[seg];
        let mut input = sig.input(s, speed.v);
        active_bumps.retain(|(t0, b)| t - t0 < b.duration_s);
        for (t0, b) in &active_bumps {
            input += b.amplitude * (PI * (t - t0) / b.duration_s).sin();
        }
        let vertical = qc.step(&mut qc_state, input);
        let kappa = sim.curvature_at(s);
        let f_v = Vector3::new(a_long, speed.v * speed.v * kappa, GRAVITY + vertical);
        let w_v = Vector3::new(sig.roll_coupling * vertical, sig.pitch_coupling * vertical, speed.v * kappa);
        let mut f_s = ct * f_v;
        let mut w_s = ct * w_v;
        for i in 0..3 {
            f_s[i] += draws.accel_bias[i] + accel_noise.sample(&mut rng);
            w_s[i] += draws.gyro_bias[i] + gyro_noise.sample(&mut rng);
        }
        samples.push(ImuSample { t, accel: f_s.into(), gyro: w_s.into() });
        if k.is_multiple_of(per_second) {
            let p = sim.route.point_at(s);
            fixes.push(Fix { t, x: p.x, y: p.y });
        }

        // Advance the vehicle to the next sample.
        let v_old = speed.v;
        if t + dt <= sp.initial_rest_s {
            speed.v = 0.0;
        } else if speed.stopping {
            if speed.v > 0.0 {
                speed.v = (speed.v - sp.accel_limit * dt).max(0.0);
            } else {
                speed.stopped_for += dt;
                if speed.stopped_for >= sp.stop_duration_s {
                    speed.stopping = false;
                    speed.stopped_for = 0.0;
                }
            }
        } else {
            let dv = (speed.target - speed.v).clamp(-sp.accel_limit * dt, sp.accel_limit * dt);
            speed.v += dv;
        }
        a_long = (speed.v - v_old) / dt;
        let s_new = s + 0.5 * (v_old + speed.v) * dt;
        if s_new >= length {
            if !k.is_multiple_of(per_second) {
                let p = sim.route.point_at(s);
                fixes.push(Fix { t, x: p.x, y: p.y });
            }
            break;
        }
        for b in &sig.bump_events {
            if s < b.position_m && s_new >= b.position_m {
                active_bumps.push((t + dt, b.clone()));
            }
        }
        // Bumps of the next segment may be crossed in this step too.
        if seg + 1 < sim.signatures.len() {
            for b in &sim.signatures[seg + 1].bump_events {
                if s < b.position_m && s_new >= b.position_m {
                    active_bumps.push((t + dt, b.clone()));
                }
            }
        }
        s = s_new;
        if s >= speed.next_change {
            speed.next_change += sp.change_every_m;
            speed.target = draw_target(&mut rng);
            if rng.random::<f64>() < sp.stop_probability {
                speed.stopping = true;
            }
        }
        k += 1;
    }
    Drive::new(samples, rate, Some(fixes))
}

/// Seeds of every drive, by split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveSeeds {
    pub train: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl DriveSeeds {
    pub fn new(root: u64, n_train: usize, n_val: usize, n_test: usize) -> Self {
        let make = |split: Split, n: usize| {
            let base = derive_seed(root, &format!("drives-{}", split.name()));
            (0..n as u64).map(|i| derive_index_seed(base, i)).collect()
        };
        Self { train: make(Split::Train, n_train), val: make(Split::Val, n_val), test: make(Split::Test, n_test) }
    }

    pub fn split(&self, split: Split) -> &[u64] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Everything needed to regenerate a simulated dataset exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: SimConfig,
    pub seeds: DriveSeeds,
}

#[derive(Debug, Clone)]
pub struct SimDataset {
    pub dataset: Dataset,
    pub sim: SimRoute,
    pub manifest: DatasetManifest,
}

pub fn synth_dataset(cfg: &SimConfig, n_train: usize, n_val: usize, n_test: usize, par: Parallelism) -> Result<SimDataset> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Config("every split needs at least one drive".into()));
    }
    let sim = synth_route(cfg)?;
    let seeds = DriveSeeds::new(cfg.seed, n_train, n_val, n_test);
    let gen = |split: Split| -> Result<Vec<Drive>> {
        par.map(seeds.split(split), |&seed| synth_drive(&sim, cfg, seed)).into_iter().collect()
    };
    let dataset = Dataset { route: sim.route.clone(), train: gen(Split::Train)?, val: gen(Split::Val)?, test: gen(Split::Test)? };
    Ok(SimDataset { dataset, sim, manifest: DatasetManifest { version: MANIFEST_VERSION, config: cfg.clone(), seeds } })
}
