//! Offline track processing: segmentation into straights and curves,
//! pure-pursuit waypoint generation, curvature-limited speed envelopes, and
//! online horizon queries against the stored plan.
//!
//! The generated plan is a dense, uniformly spaced resampling of the path a
//! pure-pursuit follower actually drives, so downstream horizon queries are
//! index arithmetic rather than geometric searches.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::geometry::normalize_angle;
use crate::vehicle::{step_nonlinear, ActionBounds, ControlInput, VehicleParams, VehicleState};
use crate::{Error, Result};

/// Curvature floor: below this a point counts as straight for the envelope,
/// avoiding division blow-up.
pub const CURVATURE_FLOOR: f64 = 1e-4;

/// Arc spacing of stored waypoints, meters.
pub const PLAN_SPACING: f64 = 0.5;

/// Closed or open circuit described by its centerline.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "TrackRecord", into = "TrackRecord")]
pub struct Track {
    pub centerline: Vec<Vector2<f64>>,
    pub half_width: f64,
    pub closed: bool,
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    half_width: f64,
    closed: bool,
    centerline: Vec<[f64; 2]>,
}

impl TryFrom<TrackRecord> for Track {
    type Error = Error;

    fn try_from(rec: TrackRecord) -> Result<Self> {
        let track = Track {
            centerline: rec
                .centerline
                .iter()
                .map(|&[x, y]| Vector2::new(x, y))
                .collect(),
            half_width: rec.half_width,
            closed: rec.closed,
        };
        track.validate()?;
        Ok(track)
    }
}

impl From<Track> for TrackRecord {
    fn from(track: Track) -> Self {
        TrackRecord {
            half_width: track.half_width,
            closed: track.closed,
            centerline: track.centerline.iter().map(|p| [p.x, p.y]).collect(),
        }
    }
}

impl Track {
    pub fn validate(&self) -> Result<()> {
        if self.centerline.len() < 3 {
            return Err(Error::InvalidArgument(format!(
                "track needs at least 3 centerline points, got {}",
                self.centerline.len()
            )));
        }
        if !(self.half_width > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "half width must be positive, got {}",
                self.half_width
            )));
        }
        let n = self.centerline.len();
        let pairs = if self.closed { n } else { n - 1 };
        for i in 0..pairs {
            let a = self.centerline[i];
            let b = self.centerline[(i + 1) % n];
            if (b - a).norm() < 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "centerline points {i} and {} coincide (do not repeat the first point on closed tracks)",
                    (i + 1) % n
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("track serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Polyline length of the centerline, including the seam on closed tracks.
    pub fn total_length(&self) -> f64 {
        let n = self.centerline.len();
        let pairs = if self.closed { n } else { n - 1 };
        (0..pairs)
            .map(|i| (self.centerline[(i + 1) % n] - self.centerline[i]).norm())
            .sum()
    }
}

/// Two straights joined by two semicircular ends, centered on the origin.
/// `point_spacing` controls centerline sampling density.
pub fn stadium_track(
    straight_length: f64,
    radius: f64,
    half_width: f64,
    point_spacing: f64,
) -> Track {
    let mut centerline = Vec::new();
    let half = straight_length / 2.0;
    let n_straight = (straight_length / point_spacing).ceil() as usize;
    let n_arc = (std::f64::consts::PI * radius / point_spacing).ceil() as usize;

    for i in 0..n_straight {
        let x = -half + straight_length * i as f64 / n_straight as f64;
        centerline.push(Vector2::new(x, -radius));
    }
    for i in 0..n_arc {
        let a = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / n_arc as f64;
        centerline.push(Vector2::new(half + radius * a.cos(), radius * a.sin()));
    }
    for i in 0..n_straight {
        let x = half - straight_length * i as f64 / n_straight as f64;
        centerline.push(Vector2::new(x, radius));
    }
    for i in 0..n_arc {
        let a = std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / n_arc as f64;
        centerline.push(Vector2::new(-half + radius * a.cos(), radius * a.sin()));
    }
    Track {
        centerline,
        half_width,
        closed: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Straight,
    Curve,
}

/// Half-open index range `[start, end)` into the centerline.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrackSegment {
    pub start: usize,
    pub end: usize,
    pub kind: SegmentKind,
    pub mean_curvature: f64,
}

/// Signed curvature of the circumcircle through three points; 0 for
/// (near-)collinear triples. Positive turns left.
pub fn three_point_curvature(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    let ab = b - a;
    let bc = c - b;
    let ac = c - a;
    let denom = ab.norm() * bc.norm() * ac.norm();
    if denom < 1e-12 {
        return 0.0;
    }
    let cross = ab.x * ac.y - ab.y * ac.x;
    2.0 * cross / denom
}

fn pointwise_curvature(track: &Track) -> Vec<f64> {
    let n = track.centerline.len();
    (0..n)
        .map(|i| {
            let (prev, next) = if track.closed {
                ((i + n - 1) % n, (i + 1) % n)
            } else if i == 0 {
                (0, 1)
            } else if i == n - 1 {
                (n - 2, n - 1)
            } else {
                (i - 1, i + 1)
            };
            if prev == i || next == i {
                0.0
            } else {
                three_point_curvature(
                    track.centerline[prev],
                    track.centerline[i],
                    track.centerline[next],
                )
            }
        })
        .collect()
}

/// Partition the centerline into straight and curve runs by comparing
/// three-point curvature against `curvature_threshold`. Runs shorter than
/// 3 points are absorbed into their predecessor to suppress speckle at
/// segment boundaries.
pub fn segment_track(track: &Track, curvature_threshold: f64) -> Result<Vec<TrackSegment>> {
    track.validate()?;
    if !(curvature_threshold > 0.0) {
        return Err(Error::InvalidArgument(
            "curvature threshold must be positive".into(),
        ));
    }
    let kappa = pointwise_curvature(track);
    let kinds: Vec<SegmentKind> = kappa
        .iter()
        .map(|k| {
            if k.abs() < curvature_threshold {
                SegmentKind::Straight
            } else {
                SegmentKind::Curve
            }
        })
        .collect();

    let mut runs: Vec<(usize, usize, SegmentKind)> = Vec::new();
    let mut start = 0;
    for i in 1..=kinds.len() {
        if i == kinds.len() || kinds[i] != kinds[start] {
            runs.push((start, i, kinds[start]));
            start = i;
        }
    }
    // Despeckle: merge short runs leftward (or rightward for the first).
    let mut merged: Vec<(usize, usize, SegmentKind)> = Vec::new();
    for run in runs {
        let len = run.1 - run.0;
        match merged.last_mut() {
            Some(prev) if len < 3 => prev.1 = run.1,
            Some(prev) if prev.2 == run.2 => prev.1 = run.1,
            _ => {
                if let Some(prev) = merged.last_mut() {
                    if prev.1 - prev.0 < 3 {
                        // First run was speckle; give it to this run.
                        let s = prev.0;
                        merged.pop();
                        merged.push((s, run.1, run.2));
                        continue;
                    }
                }
                merged.push(run);
            }
        }
    }

    Ok(merged
        .into_iter()
        .map(|(s, e, kind)| {
            let mean = kappa[s..e].iter().map(|k| k.abs()).sum::<f64>() / (e - s) as f64;
            TrackSegment {
                start: s,
                end: e,
                kind,
                mean_curvature: mean,
            }
        })
        .collect())
}

/// Curvature-limited speed: `min(v_max, sqrt(a_lat_max / max(|k|, floor)))`.
pub fn speed_envelope(curvature: f64, a_lat_max: f64, v_max: f64) -> f64 {
    let k = curvature.abs().max(CURVATURE_FLOOR);
    v_max.min((a_lat_max / k).sqrt())
}

/// Dense waypoint/speed table at uniform [`PLAN_SPACING`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferencePlan {
    pub waypoints: Vec<VehicleState>,
    pub speeds: Vec<f64>,
    pub spacing: f64,
    pub closed: bool,
    pub v_max: f64,
}

impl ReferencePlan {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.is_empty() || self.waypoints.len() != self.speeds.len() {
            return Err(Error::InvalidArgument(format!(
                "plan has {} waypoints but {} speeds",
                self.waypoints.len(),
                self.speeds.len()
            )));
        }
        if self.speeds.iter().any(|v| *v < 0.0 || *v > self.v_max) {
            return Err(Error::InvalidArgument(
                "plan speeds must lie in [0, v_max]".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: ReferencePlan = toml::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("plan serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn total_length(&self) -> f64 {
        self.spacing * self.waypoints.len() as f64
    }

    /// Index of the waypoint nearest to `pos`; ties break low.
    pub fn nearest_index(&self, pos: Vector2<f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, w) in self.waypoints.iter().enumerate() {
            let d = (w.position() - pos).norm_squared();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Arc-length coordinate of the nearest waypoint.
    pub fn nearest_arc(&self, pos: Vector2<f64>) -> f64 {
        self.nearest_index(pos) as f64 * self.spacing
    }

    /// Interpolated pose and envelope speed at an arc-length coordinate.
    /// Wraps on closed plans, clamps on open ones.
    pub fn sample_at_arc(&self, arc: f64) -> (VehicleState, f64) {
        let n = self.waypoints.len();
        let total = self.total_length();
        let s = if self.closed {
            arc.rem_euclid(total)
        } else {
            arc.clamp(0.0, (n - 1) as f64 * self.spacing)
        };
        let idx = (s / self.spacing).floor() as usize;
        let frac = s / self.spacing - idx as f64;
        let i0 = idx.min(n - 1);
        let i1 = if self.closed { (i0 + 1) % n } else { (i0 + 1).min(n - 1) };
        let w0 = self.waypoints[i0];
        let w1 = self.waypoints[i1];
        let pos = w0.position() + (w1.position() - w0.position()) * frac;
        let dth = normalize_angle(w1.theta - w0.theta);
        let theta = normalize_angle(w0.theta + dth * frac);
        let speed = self.speeds[i0] + (self.speeds[i1] - self.speeds[i0]) * frac;
        (VehicleState::new(pos.x, pos.y, theta), speed)
    }
}

/// One horizon step of the reference: pose plus (shifted) target speed.
#[derive(Clone, Copy, Debug)]
pub struct SlicePoint {
    pub state: VehicleState,
    pub speed: f64,
}

/// Horizon slice returned by [`query_reference`]; `points[h]` is the target
/// for step `t + h`.
#[derive(Clone, Debug)]
pub struct ReferenceSlice {
    pub points: Vec<SlicePoint>,
    pub dt: f64,
    pub gamma: f64,
}

/// Anchor at the nearest waypoint, then advance along the plan at the
/// shifted envelope speed. Speeds are `envelope + gamma` clipped to
/// `[0, v_max]`, and the advance uses the shifted speed so waypoints and
/// speeds stay consistent.
pub fn query_reference(
    plan: &ReferencePlan,
    pose: &VehicleState,
    gamma: f64,
    horizon: usize,
    dt: f64,
) -> ReferenceSlice {
    let mut arc = plan.nearest_arc(pose.position());
    let mut points = Vec::with_capacity(horizon + 1);
    for _ in 0..=horizon {
        let (state, envelope) = plan.sample_at_arc(arc);
        let speed = (envelope + gamma).clamp(0.0, plan.v_max);
        points.push(SlicePoint { state, speed });
        arc += speed * dt;
    }
    ReferenceSlice { points, dt, gamma }
}

struct Polyline {
    points: Vec<Vector2<f64>>,
    cumulative: Vec<f64>,
    total: f64,
    closed: bool,
}

impl Polyline {
    fn new(track: &Track) -> Self {
        let mut points = track.centerline.clone();
        if track.closed {
            points.push(track.centerline[0]);
        }
        let mut cumulative = vec![0.0];
        for w in points.windows(2) {
            let last = *cumulative.last().unwrap();
            cumulative.push(last + (w[1] - w[0]).norm());
        }
        let total = *cumulative.last().unwrap();
        Self {
            points,
            cumulative,
            total,
            closed: track.closed,
        }
    }

    fn point_at_arc(&self, arc: f64) -> Vector2<f64> {
        let s = if self.closed {
            arc.rem_euclid(self.total)
        } else {
            arc.clamp(0.0, self.total)
        };
        let seg = match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap())
        {
            Ok(i) => i.min(self.points.len() - 2),
            Err(i) => (i - 1).min(self.points.len() - 2),
        };
        let span = self.cumulative[seg + 1] - self.cumulative[seg];
        let frac = if span > 0.0 {
            (s - self.cumulative[seg]) / span
        } else {
            0.0
        };
        self.points[seg] + (self.points[seg + 1] - self.points[seg]) * frac
    }

    /// Arc coordinate and distance of the closest point on the polyline.
    fn project(&self, pos: Vector2<f64>) -> (f64, f64) {
        let mut best_arc = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.points.len() - 1 {
            let a = self.points[i];
            let b = self.points[i + 1];
            let ab = b - a;
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 {
                ((pos - a).dot(&ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let p = a + ab * t;
            let d = (pos - p).norm();
            if d < best_d {
                best_d = d;
                best_arc = self.cumulative[i] + ab.norm() * t;
            }
        }
        (best_arc, best_d)
    }
}

/// Simulate a pure-pursuit follower along the centerline and resample its
/// trace at uniform [`PLAN_SPACING`], attaching envelope speeds from the
/// resampled path's own curvature.
pub fn generate_reference(
    track: &Track,
    params: &VehicleParams,
    bounds: &ActionBounds,
    lookahead: f64,
    a_lat_max: f64,
) -> Result<ReferencePlan> {
    track.validate()?;
    bounds.validate()?;
    if !(lookahead > 0.0) || !(a_lat_max > 0.0) {
        return Err(Error::InvalidArgument(
            "lookahead and a_lat_max must be positive".into(),
        ));
    }
    let line = Polyline::new(track);
    let v_max = bounds.u_max.v;
    // Trace speed shapes nothing but step density; keep it modest so the
    // trace samples finer than the resampling grid.
    let v_trace = v_max.min(3.0).max(0.5);
    let psi_cap = bounds.u_max.psi.min(0.45);

    let start = track.centerline[0];
    let start_heading = {
        let d = track.centerline[1] - track.centerline[0];
        d.y.atan2(d.x)
    };
    let mut state = VehicleState::new(start.x, start.y, start_heading);
    let mut trace = vec![state.position()];
    let mut arc_hint = 0.0;
    let mut traveled = 0.0;

    let goal = if track.closed {
        line.total
    } else {
        line.total - lookahead.min(line.total * 0.1)
    };
    let max_steps = ((line.total / (v_trace * params.dt)) * 5.0) as usize + 100;

    for _ in 0..max_steps {
        let (arc, offset) = line.project(state.position());
        if offset > track.half_width {
            return Err(Error::GenerationFailure(format!(
                "pure pursuit diverged {offset:.2} m from the centerline (limit {})",
                track.half_width
            )));
        }
        // Projection can momentarily wrap backward near the seam of a
        // closed track; track monotone progress via the hint.
        let advance = if track.closed {
            (arc - arc_hint).rem_euclid(line.total)
        } else {
            (arc - arc_hint).max(0.0)
        };
        if advance < line.total / 2.0 {
            traveled += advance;
            arc_hint = arc;
        }
        if traveled >= goal {
            break;
        }

        let target = line.point_at_arc(arc_hint + lookahead);
        let to_target = target - state.position();
        let heading_err = normalize_angle(to_target.y.atan2(to_target.x) - state.theta);
        let ld = to_target.norm().max(0.5 * lookahead);
        let psi = (2.0 * params.wheelbase * heading_err.sin() / ld)
            .atan()
            .clamp(-psi_cap, psi_cap);
        state = step_nonlinear(&state, &ControlInput::new(v_trace, psi), params)?;
        trace.push(state.position());
    }
    if traveled < goal {
        return Err(Error::GenerationFailure(format!(
            "pure pursuit covered {traveled:.1} of {goal:.1} m before the step limit"
        )));
    }

    // Resample the trace at uniform arc spacing.
    let mut cumulative = vec![0.0];
    for w in trace.windows(2) {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + (w[1] - w[0]).norm());
    }
    let total = *cumulative.last().unwrap();
    let count = (total / PLAN_SPACING).floor() as usize;
    if count < 3 {
        return Err(Error::GenerationFailure(
            "trace too short to resample".into(),
        ));
    }
    let mut positions = Vec::with_capacity(count);
    let mut seg = 0;
    for k in 0..count {
        let s = k as f64 * PLAN_SPACING;
        while seg + 1 < cumulative.len() - 1 && cumulative[seg + 1] < s {
            seg += 1;
        }
        let span = cumulative[seg + 1] - cumulative[seg];
        let frac = if span > 0.0 { (s - cumulative[seg]) / span } else { 0.0 };
        positions.push(trace[seg] + (trace[seg + 1] - trace[seg]) * frac);
    }

    let n = positions.len();
    let neighbor = |i: usize, step: i64| -> usize {
        if track.closed {
            ((i as i64 + step).rem_euclid(n as i64)) as usize
        } else {
            (i as i64 + step).clamp(0, n as i64 - 1) as usize
        }
    };
    let mut waypoints = Vec::with_capacity(n);
    let mut speeds = Vec::with_capacity(n);
    for i in 0..n {
        let prev = positions[neighbor(i, -1)];
        let next = positions[neighbor(i, 1)];
        let d = next - if i == 0 && !track.closed { positions[0] } else { prev };
        let theta = d.y.atan2(d.x);
        waypoints.push(VehicleState::new(positions[i].x, positions[i].y, theta));
        let kappa = three_point_curvature(prev, positions[i], next);
        speeds.push(speed_envelope(kappa, a_lat_max, v_max));
    }

    let plan = ReferencePlan {
        waypoints,
        speeds,
        spacing: PLAN_SPACING,
        closed: track.closed,
        v_max,
    };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> VehicleParams {
        VehicleParams {
            wheelbase: 2.0,
            dt: 0.05,
            length: 4.5,
            width: 2.0,
        }
    }

    fn bounds() -> ActionBounds {
        ActionBounds {
            u_min: ControlInput::new(0.0, -0.45),
            u_max: ControlInput::new(12.0, 0.45),
            a_min: ControlInput::new(-1.0, -0.2),
            a_max: ControlInput::new(1.0, 0.2),
        }
    }

    fn straight_track() -> Track {
        Track {
            centerline: (0..60).map(|i| Vector2::new(i as f64 * 2.0, 0.0)).collect(),
            half_width: 5.0,
            closed: false,
        }
    }

    fn circle_track(radius: f64) -> Track {
        let n = 256;
        Track {
            centerline: (0..n)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / n as f64;
                    Vector2::new(radius * a.cos(), radius * a.sin())
                })
                .collect(),
            half_width: 5.0,
            closed: true,
        }
    }

    #[test]
    fn straight_line_is_one_straight_segment() {
        let segs = segment_track(&straight_track(), 0.01).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].kind, SegmentKind::Straight);
        assert_eq!((segs[0].start, segs[0].end), (0, 60));
    }

    #[test]
    fn circle_is_one_curve_segment_with_matching_curvature() {
        let segs = segment_track(&circle_track(20.0), 0.01).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].kind, SegmentKind::Curve);
        assert!((segs[0].mean_curvature - 0.05).abs() < 5e-4);
    }

    #[test]
    fn stadium_alternates_four_segments() {
        let track = stadium_track(120.0, 25.0, 6.0, 2.0);
        let segs = segment_track(&track, 0.02).unwrap();
        assert_eq!(segs.len(), 4, "{segs:?}");
        for (i, seg) in segs.iter().enumerate() {
            let expect = if i % 2 == 0 {
                SegmentKind::Straight
            } else {
                SegmentKind::Curve
            };
            assert_eq!(seg.kind, expect, "segment {i}");
        }
        let ranges: Vec<usize> = segs.iter().flat_map(|s| [s.start, s.end]).collect();
        for w in ranges.windows(2).skip(1).step_by(2) {
            assert_eq!(w[0], w[1], "segments must partition the centerline");
        }
    }

    #[test]
    fn envelope_matches_the_lateral_acceleration_formula() {
        assert_eq!(speed_envelope(0.0, 5.0, 20.0), 20.0);
        assert!((speed_envelope(0.02, 5.0, 20.0) - 250.0_f64.sqrt()).abs() < 1e-12);
        let mut prev = f64::INFINITY;
        for k in 0..100 {
            let v = speed_envelope(0.001 * k as f64, 5.0, 20.0);
            assert!(v <= prev && v <= 20.0);
            prev = v;
        }
    }

    #[test]
    fn straight_track_reference_lies_on_the_line() {
        let plan = generate_reference(&straight_track(), &params(), &bounds(), 5.0, 5.0).unwrap();
        for w in &plan.waypoints {
            assert!(w.y.abs() < 1e-6, "off-line waypoint y = {}", w.y);
            assert!(w.theta.abs() < 1e-3);
        }
        for v in &plan.speeds {
            assert!((v - 12.0).abs() < 1e-9, "straight speed {v}");
        }
    }

    #[test]
    fn circle_reference_stays_near_the_circle() {
        let radius = 20.0;
        let plan = generate_reference(&circle_track(radius), &params(), &bounds(), 2.0, 5.0).unwrap();
        for w in &plan.waypoints {
            let r = w.position().norm();
            assert!((r - radius).abs() < 0.05 * radius, "radial error {}", r - radius);
        }
        // Envelope on R = 20 at a_lat 5: sqrt(100) = 10 m/s.
        let mid = plan.speeds[plan.speeds.len() / 2];
        assert!((mid - 10.0).abs() < 0.5, "curve speed {mid}");
    }

    #[test]
    fn stadium_reference_slows_on_the_arcs() {
        let track = stadium_track(120.0, 25.0, 6.0, 1.0);
        let plan = generate_reference(&track, &params(), &bounds(), 4.0, 5.0).unwrap();
        let v_straight = plan
            .waypoints
            .iter()
            .zip(&plan.speeds)
            .filter(|(w, _)| w.position().x.abs() < 30.0 && w.position().y < 0.0)
            .map(|(_, v)| *v)
            .fold(0.0, f64::max);
        let v_curve = plan
            .waypoints
            .iter()
            .zip(&plan.speeds)
            .filter(|(w, _)| w.position().x > 70.0)
            .map(|(_, v)| *v)
            .fold(f64::INFINITY, f64::min);
        assert!(
            v_curve < v_straight - 1.0,
            "curve {v_curve} straight {v_straight}"
        );
    }

    #[test]
    fn closed_plan_has_no_seam_discontinuity() {
        let track = stadium_track(80.0, 20.0, 6.0, 1.0);
        let plan = generate_reference(&track, &params(), &bounds(), 4.0, 5.0).unwrap();
        let n = plan.waypoints.len();
        for i in 0..n {
            let gap =
                (plan.waypoints[(i + 1) % n].position() - plan.waypoints[i].position()).norm();
            assert!(gap <= 2.0 * plan.spacing, "gap {gap} at {i}");
        }
        let seam =
            (plan.waypoints[0].position() - plan.waypoints[n - 1].position()).norm();
        assert!(seam <= 2.0 * plan.spacing);
    }

    #[test]
    fn query_anchors_at_the_nearest_waypoint() {
        let plan = generate_reference(&straight_track(), &params(), &bounds(), 5.0, 5.0).unwrap();
        let j = 40;
        let pose = plan.waypoints[j];
        let slice = query_reference(&plan, &pose, 0.0, 10, 0.1);
        assert_eq!(slice.points.len(), 11);
        let first = slice.points[0];
        assert!((first.state.x - pose.x).abs() < 1e-9);
        assert!((first.speed - plan.speeds[j]).abs() < 1e-9);
    }

    #[test]
    fn gamma_shifts_and_clips_speeds() {
        let plan = generate_reference(&straight_track(), &params(), &bounds(), 5.0, 5.0).unwrap();
        let pose = plan.waypoints[10];
        // Straight speeds sit at v_max; +2 clips.
        let up = query_reference(&plan, &pose, 2.0, 5, 0.1);
        for p in &up.points {
            assert_eq!(p.speed, 12.0);
        }
        let down = query_reference(&plan, &pose, -2.0, 5, 0.1);
        for p in &down.points {
            assert!((p.speed - 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let track = stadium_track(80.0, 20.0, 6.0, 1.0);
        let a = generate_reference(&track, &params(), &bounds(), 4.0, 5.0).unwrap();
        let b = generate_reference(&track, &params(), &bounds(), 4.0, 5.0).unwrap();
        assert_eq!(toml::to_string(&a).unwrap(), toml::to_string(&b).unwrap());
    }

    #[test]
    fn track_io_round_trips_and_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.toml");
        let track = stadium_track(40.0, 10.0, 5.0, 2.0);
        track.save(&path).unwrap();
        let back = Track::load(&path).unwrap();
        assert_eq!(back.centerline.len(), track.centerline.len());
        assert_eq!(back.closed, true);

        std::fs::write(&path, "half_width = -3\nclosed = false\ncenterline = []").unwrap();
        assert!(Track::load(&path).is_err());
        std::fs::write(&path, "not toml at all [").unwrap();
        assert!(Track::load(&path).is_err());
    }

    #[test]
    fn degenerate_tracks_are_rejected() {
        let two_points = Track {
            centerline: vec![Vector2::new(0.0, 0.0), Vector2::new(1.0, 0.0)],
            half_width: 4.0,
            closed: false,
        };
        assert!(two_points.validate().is_err());
        let dup = Track {
            centerline: vec![
                Vector2::new(0.0, 0.0),
                Vector2::new(0.0, 0.0),
                Vector2::new(1.0, 0.0),
            ],
            half_width: 4.0,
            closed: false,
        };
        assert!(dup.validate().is_err());
    }
}
