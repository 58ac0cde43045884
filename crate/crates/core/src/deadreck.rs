//! Strap-down dead-reckoning baseline.

use std::io::Write;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::drive::Drive;
use crate::error::{Error, Result};
use crate::positioning::write_trajectory_rows;
use crate::route::RouteModel;
use crate::types::{ImuSample, Position, GRAVITY};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    /// Body to local (east, north, up).
    pub attitude: UnitQuaternion<f64>,
    pub velocity: Vector3<f64>,
    pub position: Vector3<f64>,
}

impl NavState {
    pub fn at_rest(attitude: UnitQuaternion<f64>, origin: Position) -> Self {
        Self { attitude, velocity: Vector3::zeros(), position: Vector3::new(origin.x, origin.y, 0.0) }
    }

    /// Rest at the route start. Roll and pitch come from the mean specific force over
    /// the first `level_seconds`; heading is the direction of the first route edge.
    pub fn aligned(drive: &Drive, route: &RouteModel, level_seconds: f64) -> Self {
        let n = ((level_seconds * drive.rate_hz()) as usize).clamp(1, drive.samples().len().max(1));
        let mut f = Vector3::zeros();
        for s in drive.samples().iter().take(n) {
            f += Vector3::from(s.accel);
        }
        let (roll, pitch) = if f.norm() > 0.0 {
            (f.y.atan2(f.z), (-f.x).atan2(f.y.hypot(f.z)))
        } else {
            (0.0, 0.0)
        };
        let yaw = route.heading_at(0.0);
        Self::at_rest(UnitQuaternion::from_euler_angles(roll, pitch, yaw), route.point_at(0.0))
    }
}

fn rotate_step(q: &UnitQuaternion<f64>, gyro: &[f64; 3], dt: f64) -> UnitQuaternion<f64> {
    let w = Quaternion::new(0.0, gyro[0], gyro[1], gyro[2]);
    let raw = q.quaternion() + q.quaternion() * w * (0.5 * dt);
    UnitQuaternion::from_quaternion(raw)
}

fn local_accel(q: &UnitQuaternion<f64>, s: &ImuSample) -> Vector3<f64> {
    q * Vector3::from(s.accel) - Vector3::new(0.0, 0.0, GRAVITY)
}

/// Integrate the whole drive, calling `visit(k, state)` after every sample `k`.
pub fn integrate(drive: &Drive, init: NavState, mut visit: impl FnMut(usize, &NavState)) -> Result<NavState> {
    let samples = drive.samples();
    let mut state = init;
    let Some(first) = samples.first() else {
        return Ok(state);
    };
    let check = |k: usize, s: &ImuSample| if s.is_finite() { Ok(()) } else { Err(Error::NonFiniteSample { index: k }) };
    check(0, first)?;
    let mut acc = local_accel(&state.attitude, first);
    visit(0, &state);
    for k in 1..samples.len() {
        let (prev, cur) = (&samples[k - 1], &samples[k]);
        check(k, cur)?;
        let dt = cur.t - prev.t;
        state.attitude = rotate_step(&state.attitude, &prev.gyro, dt);
        let next_acc = local_accel(&state.attitude, cur);
        let next_vel = state.velocity + (acc + next_acc) * (0.5 * dt);
        state.position += (state.velocity + next_vel) * (0.5 * dt);
        state.velocity = next_vel;
        acc = next_acc;
        visit(k, &state);
    }
    Ok(state)
}

/// Dead-reckoned planar positions at 1 Hz (every whole second from the first sample).
pub fn dead_reckon(drive: &Drive, init: NavState) -> Result<Vec<(f64, Position)>> {
    let t0 = drive.samples().first().map_or(0.0, |s| s.t);
    let per_second = drive.rate_hz().round() as usize;
    let mut out = Vec::new();
    integrate(drive, init, |k, s| {
        if k % per_second.max(1) == 0 {
            out.push((t0 + (k / per_second.max(1)) as f64, Position::new(s.position.x, s.position.y)));
        }
    })?;
    Ok(out)
}

/// Trajectory CSV in the positioning format with empty segment columns.
pub fn write_trajectory_csv<W: Write>(points: &[(f64, Position)], writer: W) -> Result<()> {
    let rows = points.iter().map(|(t, p)| {
        [t.to_string(), p.x.to_string(), p.y.to_string(), String::new(), String::new(), "0".to_string()]
    });
    write_trajectory_rows(writer, rows)
}
