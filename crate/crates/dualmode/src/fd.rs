//! Fast-driving planner: sample M laterally offset candidate paths, track
//! each with a convex MPC over the linearized kinematics, filter by
//! point-obstacle clearance over the horizon, and pick the cheapest
//! survivor by exhaustive enumeration of the one-hot selection variables.
//!
//! Since exactly one selection variable is active, the search tree over
//! assignments has M leaves and the enumeration below visits all of them.

use std::collections::HashMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::normalize_angle;
use crate::qp::{self, QpProblem, QpSettings, QpSolution};
use crate::reference::{query_reference, ReferencePlan, ReferenceSlice, Track};
use crate::vehicle::{linearize, ActionBounds, ControlInput, VehicleParams, VehicleState};
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FdConfig {
    /// Candidate count; the first `m` grid offsets are used.
    pub m: usize,
    /// Horizon steps.
    pub h: usize,
    /// Path-adherence slack, meters. Reported, not enforced, so the
    /// tracking QP stays feasible from any start.
    pub epsilon: f64,
    /// Required point clearance, meters.
    pub d_safe: f64,
    /// Lateral offsets sampled around the reference, meters.
    pub offset_grid: Vec<f64>,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            m: 5,
            h: 10,
            epsilon: 0.3,
            d_safe: 4.0,
            offset_grid: vec![0.0, -2.25, 2.25, -4.5, 4.5],
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.h < 1 {
            return Err(Error::InvalidArgument(
                "fd planner needs m >= 1 and h >= 1".into(),
            ));
        }
        if self.m > self.offset_grid.len() {
            return Err(Error::InvalidArgument(format!(
                "m = {} exceeds the offset grid size {}",
                self.m,
                self.offset_grid.len()
            )));
        }
        if !(self.epsilon > 0.0) || !(self.d_safe > 0.0) {
            return Err(Error::InvalidArgument(
                "epsilon and d_safe must be positive".into(),
            ));
        }
        if self.offset_grid.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidArgument("offset grid must be finite".into()));
        }
        Ok(())
    }
}

/// One laterally offset copy of the reference slice.
#[derive(Clone, Debug)]
pub struct CandidatePath {
    pub id: usize,
    /// H+1 waypoints with re-tangented headings.
    pub waypoints: Vec<VehicleState>,
    /// Target speed per step, already command-shifted.
    pub speeds: Vec<f64>,
    pub lateral_offset: f64,
}

/// Planner output shared by both modes.
#[derive(Clone, Debug)]
pub struct PlanResult {
    /// H+1 states starting at the query state.
    pub states: Vec<VehicleState>,
    /// H inputs; `inputs[h]` drives `states[h]` to `states[h+1]`.
    pub inputs: Vec<ControlInput>,
    /// Winning candidate id (fast mode) or `None` when infeasible.
    pub selected: Option<usize>,
    pub feasible: bool,
    /// Tracking cost against the reference slice.
    pub deviation_cost: f64,
    /// Mode-specific optimality residual: QP primal residual here,
    /// certified safety-margin violation in the shape-aware planner.
    pub residual: f64,
    /// Consistency of the returned rollout with its own linear model.
    pub dynamics_residual: f64,
    pub iterations: usize,
    pub solve_seconds: f64,
}

/// Point obstacle with an observed velocity, extrapolated at constant
/// velocity over the horizon.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrackedObstacle {
    pub position: Vector2<f64>,
    pub velocity: Vector2<f64>,
}

/// `result[i][h]` is obstacle `i` at step `t + h`, h = 0..=horizon.
pub fn predict_points(
    obstacles: &[TrackedObstacle],
    horizon: usize,
    dt: f64,
) -> Vec<Vec<Vector2<f64>>> {
    obstacles
        .iter()
        .map(|o| {
            (0..=horizon)
                .map(|h| o.position + o.velocity * (h as f64 * dt))
                .collect()
        })
        .collect()
}

/// Offset the reference slice laterally by the first `m` grid entries,
/// clamped to the track half-width. Offset 0 is always present; candidates
/// are ordered center-out so lower ids are more central.
pub fn sample_paths(
    slice: &ReferenceSlice,
    track: &Track,
    config: &FdConfig,
) -> Vec<CandidatePath> {
    let hw = track.half_width;
    let mut offsets: Vec<f64> = config
        .offset_grid
        .iter()
        .take(config.m)
        .map(|o| o.clamp(-hw, hw))
        .collect();
    if !offsets.iter().any(|o| o.abs() < 1e-9) {
        if offsets.len() == config.m {
            offsets.pop();
        }
        offsets.push(0.0);
    }
    offsets.sort_by(|a, b| {
        a.abs()
            .partial_cmp(&b.abs())
            .unwrap()
            .then(a.partial_cmp(b).unwrap())
    });
    offsets.dedup_by(|a, b| (*a - *b).abs() < 1e-9);

    offsets
        .into_iter()
        .enumerate()
        .map(|(id, offset)| {
            let positions: Vec<Vector2<f64>> = slice
                .points
                .iter()
                .map(|p| {
                    let n = Vector2::new(-p.state.theta.sin(), p.state.theta.cos());
                    p.state.position() + n * offset
                })
                .collect();
            let n = positions.len();
            let waypoints = if offset.abs() < 1e-9 {
                slice.points.iter().map(|p| p.state).collect()
            } else {
                (0..n)
                    .map(|k| {
                        let a = positions[k.saturating_sub(1)];
                        let b = positions[(k + 1).min(n - 1)];
                        let d = b - a;
                        let theta = if d.norm() > 1e-9 {
                            d.y.atan2(d.x)
                        } else {
                            slice.points[k].state.theta
                        };
                        VehicleState::new(positions[k].x, positions[k].y, theta)
                    })
                    .collect()
            };
            CandidatePath {
                id,
                waypoints,
                speeds: slice.points.iter().map(|p| p.speed).collect(),
                lateral_offset: offset,
            }
        })
        .collect()
}

/// Tracking rollout for one candidate, plus solver diagnostics.
#[derive(Clone, Debug)]
pub struct TrackedCandidate {
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
    pub qp: QpSolution,
    pub max_path_deviation: f64,
    pub dynamics_residual: f64,
}

/// Minimize `sum_h ||s_h - w_h||^2 + (v_h - v_target_h)^2` over the input
/// sequence, subject to input box and per-step rate bounds, with dynamics
/// linearized along the candidate. Single shooting: states are affine in
/// the stacked inputs. Inputs are re-projected onto the bounds after the
/// solve and the returned states are the exact linear rollout of the
/// projected inputs.
pub fn track_candidate(
    path: &CandidatePath,
    s_t: &VehicleState,
    u_prev: Option<ControlInput>,
    bounds: &ActionBounds,
    params: &VehicleParams,
    warm: Option<&QpSolution>,
) -> Result<TrackedCandidate> {
    let h_len = path.waypoints.len().saturating_sub(1);
    if h_len == 0 || path.speeds.len() != path.waypoints.len() {
        return Err(Error::InvalidArgument(
            "candidate needs H+1 waypoints with matching speeds".into(),
        ));
    }
    bounds.validate()?;
    let nu = 2 * h_len;

    // Keep every heading on the branch of the current state so the affine
    // model never sees a 2 pi seam.
    let mut theta_targets = Vec::with_capacity(h_len + 1);
    let mut branch = s_t.theta;
    for w in &path.waypoints {
        branch += normalize_angle(w.theta - branch);
        theta_targets.push(branch);
    }

    // Expansion controls: candidate speed plus the steering that yields the
    // candidate heading change at that speed.
    let mut lin = Vec::with_capacity(h_len);
    for h in 0..h_len {
        let v_bar = path.speeds[h].clamp(bounds.u_min.v, bounds.u_max.v);
        let dtheta = theta_targets[h + 1] - theta_targets[h];
        let psi_bar = if v_bar.abs() > 0.05 {
            (dtheta * params.wheelbase / (v_bar * params.dt))
                .atan()
                .clamp(bounds.u_min.psi, bounds.u_max.psi)
        } else {
            0.0
        };
        let expansion = VehicleState {
            x: path.waypoints[h].x,
            y: path.waypoints[h].y,
            theta: theta_targets[h],
        };
        lin.push(linearize(
            &expansion,
            &ControlInput::new(v_bar, psi_bar),
            params,
        )?);
    }

    // Affine maps s_h = F_h z + g_h over the stacked inputs z.
    let mut f_maps: Vec<Matrix3xX<f64>> = Vec::with_capacity(h_len + 1);
    let mut g_maps = Vec::with_capacity(h_len + 1);
    f_maps.push(Matrix3xX::zeros(nu));
    g_maps.push(s_t.as_vector());
    for h in 0..h_len {
        let mut f_next = &lin[h].a * &f_maps[h];
        f_next
            .view_mut((0, 2 * h), (3, 2))
            .copy_from(&lin[h].b);
        f_maps.push(f_next);
        g_maps.push(lin[h].a * g_maps[h] + lin[h].c);
    }

    let mut p = DMatrix::<f64>::zeros(nu, nu);
    let mut q = DVector::<f64>::zeros(nu);
    for h in 1..=h_len {
        let target = Vector3::new(
            path.waypoints[h].x,
            path.waypoints[h].y,
            theta_targets[h],
        );
        p += 2.0 * f_maps[h].transpose() * &f_maps[h];
        q += 2.0 * f_maps[h].transpose() * (g_maps[h] - target);
    }
    for h in 0..h_len {
        let iv = 2 * h;
        p[(iv, iv)] += 2.0;
        q[iv] += -2.0 * path.speeds[h];
    }
    for i in 0..nu {
        p[(i, i)] += 2e-6;
    }

    let n_rate = if u_prev.is_some() { h_len } else { h_len - 1 };
    let rows = nu + 2 * n_rate;
    let mut a = DMatrix::<f64>::zeros(rows, nu);
    let mut l = DVector::<f64>::zeros(rows);
    let mut u = DVector::<f64>::zeros(rows);
    for h in 0..h_len {
        for (j, (lo, hi)) in [
            (bounds.u_min.v, bounds.u_max.v),
            (bounds.u_min.psi, bounds.u_max.psi),
        ]
        .iter()
        .enumerate()
        {
            a[(2 * h + j, 2 * h + j)] = 1.0;
            l[2 * h + j] = *lo;
            u[2 * h + j] = *hi;
        }
    }
    let mut row = nu;
    let mut add_rate = |row: &mut usize,
                        a: &mut DMatrix<f64>,
                        l: &mut DVector<f64>,
                        u: &mut DVector<f64>,
                        h: usize,
                        prev: Option<ControlInput>| {
        for (j, (lo, hi)) in [
            (bounds.a_min.v, bounds.a_max.v),
            (bounds.a_min.psi, bounds.a_max.psi),
        ]
        .iter()
        .enumerate()
        {
            a[(*row, 2 * h + j)] = 1.0;
            let base = match prev {
                Some(p) => {
                    if j == 0 {
                        p.v
                    } else {
                        p.psi
                    }
                }
                None => {
                    a[(*row, 2 * (h - 1) + j)] = -1.0;
                    0.0
                }
            };
            l[*row] = lo + base;
            u[*row] = hi + base;
            *row += 1;
        }
    };
    if let Some(prev) = u_prev {
        add_rate(&mut row, &mut a, &mut l, &mut u, 0, Some(prev));
    }
    for h in 1..h_len {
        add_rate(&mut row, &mut a, &mut l, &mut u, h, None);
    }
    debug_assert_eq!(row, rows);

    let problem = QpProblem { p, q, a, l, u };
    let solution = qp::solve(&problem, warm, &QpSettings::default())?;
    if !solution.converged {
        return Err(Error::NumericFailure(format!(
            "tracking QP stalled at primal residual {:.3e}",
            solution.primal_residual
        )));
    }

    // Exact projection: box clip, then sequential rate clip anchored at the
    // executed input, then a fresh linear rollout of the projected inputs.
    let mut inputs = Vec::with_capacity(h_len);
    let mut prev = u_prev;
    for h in 0..h_len {
        let mut v = solution.x[2 * h].clamp(bounds.u_min.v, bounds.u_max.v);
        let mut psi = solution.x[2 * h + 1].clamp(bounds.u_min.psi, bounds.u_max.psi);
        if let Some(p) = prev {
            let (v_lo, v_hi) = clip_window(
                p.v + bounds.a_min.v,
                p.v + bounds.a_max.v,
                bounds.u_min.v,
                bounds.u_max.v,
            );
            let (psi_lo, psi_hi) = clip_window(
                p.psi + bounds.a_min.psi,
                p.psi + bounds.a_max.psi,
                bounds.u_min.psi,
                bounds.u_max.psi,
            );
            v = v.clamp(v_lo, v_hi);
            psi = psi.clamp(psi_lo, psi_hi);
        }
        let next = ControlInput::new(v, psi);
        inputs.push(next);
        prev = Some(next);
    }

    let mut raw = Vec::with_capacity(h_len + 1);
    raw.push(s_t.as_vector());
    for h in 0..h_len {
        let s_next = lin[h].step(raw[h], inputs[h].as_vector());
        raw.push(s_next);
    }
    let mut dynamics_residual: f64 = 0.0;
    for h in 0..h_len {
        let check = lin[h].a * raw[h] + lin[h].b * inputs[h].as_vector() + lin[h].c;
        dynamics_residual = dynamics_residual.max((raw[h + 1] - check).abs().max());
    }
    let mut max_path_deviation: f64 = 0.0;
    for h in 1..=h_len {
        let d = (raw[h].xy() - path.waypoints[h].position()).norm();
        max_path_deviation = max_path_deviation.max(d);
    }

    Ok(TrackedCandidate {
        states: raw.into_iter().map(VehicleState::from_vector).collect(),
        inputs,
        qp: solution,
        max_path_deviation,
        dynamics_residual,
    })
}

fn clip_window(lo: f64, hi: f64, box_lo: f64, box_hi: f64) -> (f64, f64) {
    let a = lo.max(box_lo);
    let b = hi.min(box_hi);
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// True iff every rollout state keeps at least `d_safe` to every predicted
/// obstacle point over the shared horizon. Inclusive at the boundary.
pub fn clearance(
    states: &[VehicleState],
    predictions: &[Vec<Vector2<f64>>],
    d_safe: f64,
) -> bool {
    for pred in predictions {
        let steps = states.len().min(pred.len());
        for h in 0..steps {
            if (states[h].position() - pred[h]).norm() < d_safe {
                return false;
            }
        }
    }
    true
}

/// Exhaustive enumeration over the one-hot selection assignment: keep
/// candidates passing clearance, return the one with the smallest tracking
/// cost against the reference slice. Ties break toward smaller |offset|,
/// then lower id. An empty feasible set comes back `feasible = false` with
/// the most central rollout attached, and the caller escalates.
pub fn tree_search_select(
    tracked: &[(CandidatePath, TrackedCandidate)],
    predictions: &[Vec<Vector2<f64>>],
    slice: &ReferenceSlice,
    d_safe: f64,
) -> Result<PlanResult> {
    if tracked.is_empty() {
        return Err(Error::InvalidArgument("no candidates to select from".into()));
    }
    let cost = |tc: &TrackedCandidate| -> f64 {
        tc.states
            .iter()
            .zip(&slice.points)
            .skip(1)
            .map(|(s, p)| {
                let dp = s.position() - p.state.position();
                let dth = normalize_angle(s.theta - p.state.theta);
                dp.norm_squared() + dth * dth
            })
            .sum()
    };

    let mut best: Option<(usize, f64)> = None;
    for (i, (path, tc)) in tracked.iter().enumerate() {
        if !clearance(&tc.states, predictions, d_safe) {
            continue;
        }
        let c = cost(tc);
        best = match best {
            None => Some((i, c)),
            Some((bi, bc)) => {
                let tie = (c - bc).abs() <= 1e-9 * (1.0 + bc.abs());
                let better = if tie {
                    let (po, bo) = (path.lateral_offset.abs(), tracked[bi].0.lateral_offset.abs());
                    po < bo || (po == bo && path.id < tracked[bi].0.id)
                } else {
                    c < bc
                };
                if better {
                    Some((i, c))
                } else {
                    Some((bi, bc))
                }
            }
        };
    }

    let build = |i: usize, selected: Option<usize>, feasible: bool, cost_val: f64| PlanResult {
        states: tracked[i].1.states.clone(),
        inputs: tracked[i].1.inputs.clone(),
        selected,
        feasible,
        deviation_cost: cost_val,
        residual: tracked[i].1.qp.primal_residual,
        dynamics_residual: tracked[i].1.dynamics_residual,
        iterations: tracked[i].1.qp.iterations,
        solve_seconds: 0.0,
    };
    Ok(match best {
        Some((i, c)) => build(i, Some(tracked[i].0.id), true, c),
        None => {
            let center = tracked
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    a.0.lateral_offset
                        .abs()
                        .partial_cmp(&b.0.lateral_offset.abs())
                        .unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            let c = cost(&tracked[center].1);
            build(center, None, false, c)
        }
    })
}

/// Fast-driving planner front end. Holds per-candidate warm starts; all
/// other state arrives with each call.
pub struct FdPlanner {
    pub config: FdConfig,
    pub params: VehicleParams,
    pub bounds: ActionBounds,
    warm: HashMap<usize, QpSolution>,
}

impl FdPlanner {
    pub fn new(config: FdConfig, params: VehicleParams, bounds: ActionBounds) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        bounds.validate()?;
        Ok(Self {
            config,
            params,
            bounds,
            warm: HashMap::new(),
        })
    }

    /// Drop warm starts, e.g. after a mode switch or scenario reset.
    pub fn reset(&mut self) {
        self.warm.clear();
    }

    /// One planning cycle: query the reference with the commanded speed
    /// shift, sample candidates, track them (in parallel; candidates are
    /// independent), then select. `u_prev` is the input currently being
    /// executed and anchors the first rate constraint.
    pub fn plan(
        &mut self,
        state: &VehicleState,
        u_prev: Option<ControlInput>,
        reference: &ReferencePlan,
        track: &Track,
        gamma: f64,
        obstacles: &[TrackedObstacle],
    ) -> Result<PlanResult> {
        let start = Instant::now();
        let slice = query_reference(reference, state, gamma, self.config.h, self.params.dt);
        let candidates = sample_paths(&slice, track, &self.config);
        let jobs: Vec<(CandidatePath, Option<QpSolution>)> = candidates
            .into_iter()
            .map(|c| {
                let warm = self.warm.get(&c.id).cloned();
                (c, warm)
            })
            .collect();
        let tracked: Result<Vec<(CandidatePath, TrackedCandidate)>> = jobs
            .into_par_iter()
            .map(|(c, warm)| {
                track_candidate(&c, state, u_prev, &self.bounds, &self.params, warm.as_ref())
                    .map(|tc| (c, tc))
            })
            .collect();
        let tracked = tracked?;
        for (c, tc) in &tracked {
            self.warm.insert(c.id, tc.qp.clone());
        }
        let predictions = predict_points(obstacles, self.config.h, self.params.dt);
        let mut result = tree_search_select(&tracked, &predictions, &slice, self.config.d_safe)?;
        result.solve_seconds = start.elapsed().as_secs_f64();
        Ok(result)
    }
}
