//! Route geometry: an arc-length parameterised polyline cut into N segments
//! of equal length.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Position, SegmentId};

/// Default maximum distance between a labelled position and the route.
pub const DEFAULT_CORRIDOR_M: f64 = 20.0;

/// Shortest allowed segment.
pub const MIN_SEGMENT_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteModel {
    polyline: Vec<Position>,
    /// Cumulative arc length at each polyline vertex.
    vertex_arc: Vec<f64>,
    length_m: f64,
    num_segments: usize,
    boundaries: Vec<f64>,
    midpoints: Vec<Position>,
}

/// Nearest point on the route to a query position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub arc_length: f64,
    pub distance: f64,
    pub point: Position,
}

impl RouteModel {
    /// Cut `polyline` into `n` equal-arc-length segments.
    pub fn build(polyline: Vec<Position>, n: usize) -> Result<Self> {
        if polyline.len() < 2 {
            return Err(Error::DegenerateRoute("polyline needs at least two points".into()));
        }
        if polyline.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::DegenerateRoute("polyline has non-finite coordinates".into()));
        }
        if n == 0 {
            return Err(Error::InvalidInput("segment count must be at least 1".into()));
        }
        let mut vertex_arc = Vec::with_capacity(polyline.len());
        let mut acc = 0.0;
        vertex_arc.push(0.0);
        for pair in polyline.windows(2) {
            acc += pair[0].distance(&pair[1]);
            vertex_arc.push(acc);
        }
        let length_m = acc;
        if length_m <= 0.0 {
            return Err(Error::DegenerateRoute("polyline has zero length".into()));
        }
        let max_segments = (length_m / MIN_SEGMENT_M).floor() as usize;
        if n > max_segments {
            return Err(Error::InvalidInput(format!(
                "{n} segments on a {length_m:.3} m route would be shorter than {MIN_SEGMENT_M} m"
            )));
        }
        let seg = length_m / n as f64;
        let mut boundaries: Vec<f64> = (0..=n).map(|k| k as f64 * seg).collect();
        boundaries[n] = length_m;

        let mut route = Self {
            polyline,
            vertex_arc,
            length_m,
            num_segments: n,
            boundaries,
            midpoints: Vec::new(),
        };
        route.midpoints = (0..n).map(|k| route.point_at((k as f64 + 0.5) * seg)).collect();
        Ok(route)
    }

    /// Same polyline, different segment count.
    pub fn resegment(&self, n: usize) -> Result<Self> {
        Self::build(self.polyline.clone(), n)
    }

    pub fn polyline(&self) -> &[Position] {
        &self.polyline
    }

    pub fn length(&self) -> f64 {
        self.length_m
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn segment_length(&self) -> f64 {
        self.length_m / self.num_segments as f64
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn midpoints(&self) -> &[Position] {
        &self.midpoints
    }

    pub fn midpoint(&self, s: SegmentId) -> Position {
        self.midpoints[s.index().min(self.num_segments - 1)]
    }

    /// Point on the polyline at arc length `s`, clamped to `[0, L]`.
    pub fn point_at(&self, s: f64) -> Position {
        let s = s.clamp(0.0, self.length_m);
        // First vertex whose arc length exceeds s.
        let hi = self.vertex_arc.partition_point(|&a| a <= s);
        if hi == 0 {
            return self.polyline[0];
        }
        if hi >= self.polyline.len() {
            return *self.polyline.last().unwrap();
        }
        let lo = hi - 1;
        let span = self.vertex_arc[hi] - self.vertex_arc[lo];
        if span <= 0.0 {
            return self.polyline[lo];
        }
        let w = (s - self.vertex_arc[lo]) / span;
        self.polyline[lo].lerp(&self.polyline[hi], w)
    }

    /// Heading of travel at arc length `s`, radians counter-clockwise from +x.
    pub fn heading_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.length_m);
        let hi = self.vertex_arc.partition_point(|&a| a <= s).clamp(1, self.polyline.len() - 1);
        // Skip zero-length edges.
        let (mut a, mut b) = (hi - 1, hi);
        while self.polyline[a] == self.polyline[b] && b + 1 < self.polyline.len() {
            a += 1;
            b += 1;
        }
        let (p, q) = (self.polyline[a], self.polyline[b]);
        (q.y - p.y).atan2(q.x - p.x)
    }

    /// Segment containing arc length `s` under the half-open rule; `s = L` maps to N.
    pub fn segment_at_arc(&self, s: f64) -> SegmentId {
        let s = s.clamp(0.0, self.length_m);
        let k = self.boundaries[..self.num_segments].partition_point(|&b| b <= s);
        SegmentId::new_unchecked(k.clamp(1, self.num_segments) as u32)
    }

    /// Nearest point on the polyline. Ties go to the smaller arc length.
    pub fn project(&self, p: &Position) -> Projection {
        let mut best = Projection { arc_length: 0.0, distance: f64::INFINITY, point: self.polyline[0] };
        for (i, pair) in self.polyline.windows(2).enumerate() {
            let (a, b) = (pair[0], pair[1]);
            let (dx, dy) = (b.x - a.x, b.y - a.y);
            let len2 = dx * dx + dy * dy;
            let w = if len2 > 0.0 {
                (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = a.lerp(&b, w);
            let d = q.distance(p);
            if d < best.distance {
                best = Projection {
                    arc_length: self.vertex_arc[i] + w * len2.sqrt(),
                    distance: d,
                    point: q,
                };
            }
        }
        best
    }

    /// Ground-truth segment label for a position within the default corridor.
    pub fn label(&self, p: &Position) -> Result<SegmentId> {
        self.label_within(p, DEFAULT_CORRIDOR_M)
    }

    pub fn label_within(&self, p: &Position, corridor: f64) -> Result<SegmentId> {
        let proj = self.project(p);
        if proj.distance > corridor {
            return Err(Error::OutsideCorridor { distance: proj.distance, corridor });
        }
        Ok(self.segment_at_arc(proj.arc_length))
    }
}
