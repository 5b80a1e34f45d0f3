//! Shape-aware planner: full-geometry clearance constraints expressed
//! through the dual collision certificate, optimized by alternating
//! minimization between the motion block and the dual block.
//!
//! Block layout per planning cycle: the dynamics stay linearized around the
//! cycle's starting rollout, while the certificate rows relinearize around
//! each new iterate together with the refreshed duals. With the dual block
//! solved to its max-margin optimum, the previous motion remains feasible
//! for the next motion subproblem at no larger objective, so the subproblem
//! objective is non-increasing across iterations.

use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fd::PlanResult;
use crate::geometry::{
    max_margin_duals, min_distance, normalize_angle, transform_to_world, ConvexPolytope,
    DualVariables, RigidPose2,
};
use crate::qp::{self, QpProblem, QpSettings, QpSolution};
use crate::reference::{query_reference, ReferencePlan, ReferenceSlice};
use crate::vehicle::{
    linearize, step_nonlinear, ActionBounds, ControlInput, LinearizedDynamics, VehicleParams,
    VehicleState,
};
use crate::{Error, Result};

/// L1 penalty on certificate and trust-region slack. Must exceed the
/// largest active-constraint multiplier the scenes can produce, or the
/// solver will rationally trade clearance for tracking; passing maneuvers
/// reach multipliers in the low thousands. Anything much larger stretches
/// the cost data so far that relative solver tolerances lose meaning.
pub const SLACK_WEIGHT: f64 = 1e4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaConfig {
    /// Horizon steps.
    pub h: usize,
    /// Required full-shape clearance, meters.
    pub d_safe: f64,
    /// Alternating-minimization sweeps per cycle; the loop exits early once
    /// the residual is under tolerance.
    pub am_iterations: usize,
    /// Feasibility threshold on the certified clearance shortfall.
    pub residual_tol: f64,
    /// Hard bound on heading deviation from the linearization reference,
    /// radians. Shrinks when a sweep fails to improve the exact objective.
    pub trust_region: f64,
    /// Hard bound on per-step speed deviation from the reference inputs,
    /// m/s. Shrinks together with `trust_region`.
    pub trust_speed: f64,
    /// Hard bound on per-step steering deviation from the reference
    /// inputs, radians. Shrinks together with `trust_region`.
    pub trust_steer: f64,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            h: 10,
            d_safe: 0.3,
            am_iterations: 6,
            residual_tol: 1e-3,
            trust_region: 0.2,
            trust_speed: 2.0,
            trust_steer: 0.15,
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h < 1 {
            return Err(Error::InvalidArgument("sa planner needs h >= 1".into()));
        }
        if !(2..=12).contains(&self.am_iterations) {
            return Err(Error::InvalidArgument(format!(
                "am_iterations must lie in [2, 12], got {}",
                self.am_iterations
            )));
        }
        if !(self.d_safe > 0.0) || !(self.residual_tol > 0.0) {
            return Err(Error::InvalidArgument(
                "d_safe and residual_tol must be positive".into(),
            ));
        }
        if !(self.trust_region > 0.0) || !(self.trust_speed > 0.0) || !(self.trust_steer > 0.0) {
            return Err(Error::InvalidArgument(
                "trust radii must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// World-frame obstacle polytopes per horizon step, `polytopes[h]` for
/// `h = 0..=H`.
#[derive(Clone, Debug)]
pub struct ObstaclePrediction {
    pub polytopes: Vec<ConvexPolytope>,
}

/// Observed obstacle: its current world-frame polytope and velocity.
#[derive(Clone, Debug)]
pub struct ShapedObstacle {
    pub polytope: ConvexPolytope,
    pub velocity: Vector2<f64>,
}

/// Constant-velocity translation of each obstacle polytope over the
/// horizon; rotation is held fixed.
pub fn predict_polytopes(
    obstacles: &[ShapedObstacle],
    horizon: usize,
    dt: f64,
) -> Vec<ObstaclePrediction> {
    obstacles
        .iter()
        .map(|o| ObstaclePrediction {
            polytopes: (0..=horizon)
                .map(|h| {
                    let shift = o.velocity * (h as f64 * dt);
                    transform_to_world(&o.polytope, &RigidPose2::new(shift.x, shift.y, 0.0))
                })
                .collect(),
        })
        .collect()
}

/// Motion block of the decision variables: H+1 states, H inputs.
#[derive(Clone, Debug)]
pub struct Motion {
    pub states: Vec<VehicleState>,
    pub inputs: Vec<ControlInput>,
}

/// Full alternating-minimization iterate, carried between frames for warm
/// starts.
#[derive(Clone, Debug)]
pub struct SaState {
    pub motion: Motion,
    /// `duals[i][h]` certifies obstacle `i` at step `h`.
    pub duals: Vec<Vec<DualVariables>>,
    /// Alternating sweeps actually used.
    pub iterations: usize,
    /// Worst certified clearance shortfall over the planned horizon.
    pub residual: f64,
    /// Motion subproblem objective per sweep, for convergence inspection.
    pub objectives: Vec<f64>,
    /// Final subproblem iterate, seeding the next cycle's first solve.
    /// Ignored whenever the problem dimensions change between cycles.
    pub qp: Option<QpSolution>,
}

fn unwrap_headings(states: &[VehicleState], base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(states.len());
    let mut branch = base;
    for s in states {
        branch += normalize_angle(s.theta - branch);
        out.push(branch);
    }
    out
}

/// Single-shooting model for one planning cycle: dynamics linearized along
/// a fixed reference motion, states affine in the stacked inputs. Built
/// once per cycle so successive motion subproblems share the same feasible
/// set over `u`.
pub struct MotionModel {
    s0: Vector3<f64>,
    lin: Vec<LinearizedDynamics>,
    f: Vec<Matrix3xX<f64>>,
    g: Vec<Vector3<f64>>,
    h_len: usize,
    params: VehicleParams,
}

impl MotionModel {
    pub fn around(
        s_t: &VehicleState,
        motion: &Motion,
        params: &VehicleParams,
        bounds: &ActionBounds,
    ) -> Result<Self> {
        let h_len = motion.inputs.len();
        if h_len == 0 || motion.states.len() != h_len + 1 {
            return Err(Error::InvalidArgument(format!(
                "motion has {} states for {} inputs",
                motion.states.len(),
                h_len
            )));
        }
        let branch = unwrap_headings(&motion.states, s_t.theta);
        let mut lin = Vec::with_capacity(h_len);
        for h in 0..h_len {
            let expansion = VehicleState {
                x: motion.states[h].x,
                y: motion.states[h].y,
                theta: branch[h],
            };
            let u_ref = ControlInput::new(
                motion.inputs[h].v.clamp(bounds.u_min.v, bounds.u_max.v),
                motion.inputs[h].psi.clamp(bounds.u_min.psi, bounds.u_max.psi),
            );
            lin.push(linearize(&expansion, &u_ref, params)?);
        }
        let nu = 2 * h_len;
        let mut f: Vec<Matrix3xX<f64>> = Vec::with_capacity(h_len + 1);
        let mut g = Vec::with_capacity(h_len + 1);
        f.push(Matrix3xX::zeros(nu));
        g.push(s_t.as_vector());
        for h in 0..h_len {
            let mut f_next = &lin[h].a * &f[h];
            f_next.view_mut((0, 2 * h), (3, 2)).copy_from(&lin[h].b);
            f.push(f_next);
            g.push(lin[h].a * g[h] + lin[h].c);
        }
        Ok(Self {
            s0: s_t.as_vector(),
            lin,
            f,
            g,
            h_len,
            params: *params,
        })
    }

    pub fn horizon(&self) -> usize {
        self.h_len
    }
}

/// Motion subproblem solution with its exact objective at the returned
/// (projected) inputs.
#[derive(Clone, Debug)]
pub struct MotionSolve {
    pub motion: Motion,
    /// Tracking cost plus slack penalty, evaluated at the returned motion.
    pub objective: f64,
    pub tracking_cost: f64,
    pub max_slack: f64,
    pub qp: QpSolution,
    pub dynamics_residual: f64,
    /// False when the incumbent outscored the solver's step and was kept.
    pub accepted_step: bool,
}

struct MarginRow {
    /// Obstacle-normal combination `D^T lambda` in world frame.
    w: Vector2<f64>,
    /// Heading sensitivity `L_body |D^T lambda|`.
    l_eff: f64,
    /// Reference heading where the duals were computed.
    theta_ref: f64,
    /// `d_safe + lambda^T b + mu^T h`.
    rhs: f64,
    /// Flat slack index for this (i, h) pair.
    slack: usize,
    /// Horizon step of the constrained state.
    h: usize,
}

/// Surplus of the certificate row at pose `(p, theta)`: the modeled
/// clearance `w.p - lambda^T b - mu^T h - L_body |w| |theta - theta_ref|`
/// minus `d_safe`. The heading term is a global support-function Lipschitz
/// correction, so the model is a true clearance lower bound at any heading,
/// not only near the reference.
fn row_surplus(row: &MarginRow, p: Vector2<f64>, theta: f64) -> f64 {
    row.w.dot(&p) - row.rhs - row.l_eff * (theta - row.theta_ref).abs()
}

struct ObjectiveParts {
    tracking: f64,
    slack_sum: f64,
    trust_sum: f64,
    max_slack: f64,
}

impl ObjectiveParts {
    fn penalized(&self) -> f64 {
        self.tracking + SLACK_WEIGHT * (self.slack_sum + self.trust_sum)
    }
}

/// Exact penalized objective of a motion: tracking cost against the slice
/// plus the minimal feasible margin and trust slacks at its poses.
fn exact_objective(
    raw: &[Vector3<f64>],
    inputs: &[ControlInput],
    rows: &[MarginRow],
    n_margin_slack: usize,
    slice: &ReferenceSlice,
    theta_targets: &[f64],
    theta_ref: &[f64],
    trust_region: f64,
) -> ObjectiveParts {
    let h_len = inputs.len();
    let mut tracking = 0.0;
    for h in 1..=h_len {
        let dp = raw[h].xy() - Vector2::new(slice.points[h].state.x, slice.points[h].state.y);
        let dth = raw[h][2] - theta_targets[h];
        tracking += dp.norm_squared() + dth * dth;
    }
    for h in 0..h_len {
        let dv = inputs[h].v - slice.points[h].speed;
        tracking += dv * dv;
    }
    let mut slack_sum = 0.0;
    let mut max_slack: f64 = 0.0;
    let mut needed = vec![0.0_f64; n_margin_slack];
    for mr in rows {
        let xi = (-row_surplus(mr, raw[mr.h].xy(), raw[mr.h][2])).max(0.0);
        needed[mr.slack] = needed[mr.slack].max(xi);
    }
    for xi in needed {
        slack_sum += xi;
        max_slack = max_slack.max(xi);
    }
    let mut trust_sum = 0.0;
    for h in 1..=h_len {
        let tau = ((raw[h][2] - theta_ref[h]).abs() - trust_region).max(0.0);
        trust_sum += tau;
        max_slack = max_slack.max(tau);
    }
    ObjectiveParts {
        tracking,
        slack_sum,
        trust_sum,
        max_slack,
    }
}

/// One convex motion solve with duals and certificate linearization fixed.
/// Minimizes the tracking cost against the (already speed-shifted)
/// reference slice, subject to input box and rate bounds, hard trust
/// windows around the reference inputs and heading (scaled by
/// `trust_scale`), and one certificate row per obstacle and step with L1
/// slack.
///
/// `margin_ref` must be the exact rollout of its own inputs. The solver's
/// step is accepted only when it scores better than `margin_ref` under
/// the current certificate rows; that keeps the objective sequence
/// non-increasing even at finite solver tolerance, and lets the caller
/// shrink the trust windows after a rejected step.
#[allow(clippy::too_many_arguments)]
pub fn solve_motion_subproblem(
    model: &MotionModel,
    duals: &[Vec<DualVariables>],
    margin_ref: &Motion,
    slice: &ReferenceSlice,
    predictions: &[ObstaclePrediction],
    ego_body: &ConvexPolytope,
    config: &SaConfig,
    trust_scale: f64,
    bounds: &ActionBounds,
    u_prev: Option<ControlInput>,
    warm: Option<&QpSolution>,
) -> Result<MotionSolve> {
    let h_len = model.h_len;
    let n_obs = predictions.len();
    if duals.len() != n_obs {
        return Err(Error::InvalidArgument(format!(
            "{} dual groups for {} obstacles",
            duals.len(),
            n_obs
        )));
    }
    if slice.points.len() != h_len + 1 {
        return Err(Error::InvalidArgument(
            "reference slice length does not match the model horizon".into(),
        ));
    }
    bounds.validate()?;

    // Variables: inputs, margin slack, and one heading deviation
    // `e_h >= |theta_h - theta_ref_h|` per step so the margin rows stay
    // well separated from each other.
    let nu = 2 * h_len;
    let n_margin_slack = n_obs * h_len;
    let e_base = nu + n_margin_slack;
    let n = e_base + h_len;
    let d_theta = trust_scale * config.trust_region;
    let d_v = trust_scale * config.trust_speed;
    let d_psi = trust_scale * config.trust_steer;
    let l_body = ego_body
        .vertices()
        .iter()
        .map(|v| v.norm())
        .fold(0.0, f64::max);
    let theta_ref = unwrap_headings(
        &margin_ref.states,
        VehicleState::from_vector(model.s0).theta,
    );

    // Certificate rows, one pair per obstacle and step h = 1..=H.
    let mut rows = Vec::with_capacity(n_margin_slack);
    for (i, pred) in predictions.iter().enumerate() {
        for h in 1..=h_len {
            let d = &duals[i][h];
            let poly = &pred.polytopes[h];
            if d.lambda.len() != poly.num_facets() || d.mu.len() != ego_body.num_facets() {
                return Err(Error::InvalidArgument(format!(
                    "dual dimensions for obstacle {i} step {h} do not match the polytopes"
                )));
            }
            let mut w = Vector2::zeros();
            let mut lam_b = 0.0;
            for r in 0..poly.num_facets() {
                w += d.lambda[r] * poly.normal(r);
                lam_b += d.lambda[r] * poly.offset(r);
            }
            let mut mu_h = 0.0;
            for r in 0..ego_body.num_facets() {
                mu_h += d.mu[r] * ego_body.offset(r);
            }
            rows.push(MarginRow {
                w,
                l_eff: l_body * w.norm(),
                theta_ref: theta_ref[h],
                rhs: config.d_safe + lam_b + mu_h,
                slack: i * h_len + (h - 1),
                h,
            });
        }
    }

    let n_rate = if u_prev.is_some() { h_len } else { h_len - 1 };
    let m_rows = nu + 2 * n_rate + 3 * h_len + rows.len() + n_margin_slack;
    let mut a = DMatrix::<f64>::zeros(m_rows, n);
    let mut l = DVector::<f64>::from_element(m_rows, f64::NEG_INFINITY);
    let mut u = DVector::<f64>::from_element(m_rows, f64::INFINITY);
    let mut row = 0;

    // Box rows intersected with the input trust windows around the
    // reference inputs. The windows are what keeps the linearization
    // honest; heading alone cannot, since the model's position and heading
    // errors are bilinear in the speed and steering deviations.
    for h in 0..h_len {
        let u_ref = ControlInput::new(
            margin_ref.inputs[h].v.clamp(bounds.u_min.v, bounds.u_max.v),
            margin_ref.inputs[h].psi.clamp(bounds.u_min.psi, bounds.u_max.psi),
        );
        for (j, (lo, hi)) in [
            (
                bounds.u_min.v.max(u_ref.v - d_v),
                bounds.u_max.v.min(u_ref.v + d_v),
            ),
            (
                bounds.u_min.psi.max(u_ref.psi - d_psi),
                bounds.u_max.psi.min(u_ref.psi + d_psi),
            ),
        ]
        .iter()
        .enumerate()
        {
            a[(row, 2 * h + j)] = 1.0;
            l[row] = *lo;
            u[row] = *hi;
            row += 1;
        }
    }
    let rate_pairs: Vec<(usize, Option<ControlInput>)> = match u_prev {
        Some(p) => std::iter::once((0, Some(p)))
            .chain((1..h_len).map(|h| (h, None)))
            .collect(),
        None => (1..h_len).map(|h| (h, None)).collect(),
    };
    for (h, prev) in rate_pairs {
        for (j, (lo, hi)) in [
            (bounds.a_min.v, bounds.a_max.v),
            (bounds.a_min.psi, bounds.a_max.psi),
        ]
        .iter()
        .enumerate()
        {
            a[(row, 2 * h + j)] = 1.0;
            let base = match prev {
                Some(p) => {
                    if j == 0 {
                        p.v
                    } else {
                        p.psi
                    }
                }
                None => {
                    a[(row, 2 * (h - 1) + j)] = -1.0;
                    0.0
                }
            };
            l[row] = lo + base;
            u[row] = hi + base;
            row += 1;
        }
    }
    // Heading deviation: e_h >= +-(theta_h - theta_ref_h). The reg term
    // in P presses e down onto the larger branch, so e_h equals the
    // absolute deviation at any optimum.
    for h in 1..=h_len {
        let e = e_base + (h - 1);
        for i in 0..nu {
            a[(row, i)] = -model.f[h][(2, i)];
            a[(row + 1, i)] = model.f[h][(2, i)];
        }
        a[(row, e)] = 1.0;
        l[row] = model.g[h][2] - theta_ref[h];
        a[(row + 1, e)] = 1.0;
        l[row + 1] = theta_ref[h] - model.g[h][2];
        row += 2;
    }
    // Hard trust region: e_h <= radius. A soft variant cannot restrain the
    // solver here, because the linear model can claim clearance gains far
    // above any slack price that keeps the cost data well scaled.
    for h in 1..=h_len {
        a[(row, e_base + (h - 1))] = 1.0;
        u[row] = d_theta;
        row += 1;
    }
    // Certificate rows: w.p - l_eff e_h + xi >= rhs.
    for mr in &rows {
        let fh = &model.f[mr.h];
        let gh = &model.g[mr.h];
        for i in 0..nu {
            a[(row, i)] = mr.w.x * fh[(0, i)] + mr.w.y * fh[(1, i)];
        }
        a[(row, e_base + (mr.h - 1))] = -mr.l_eff;
        a[(row, nu + mr.slack)] = 1.0;
        l[row] = mr.rhs - (mr.w.x * gh[0] + mr.w.y * gh[1]);
        row += 1;
    }
    for s in 0..n_margin_slack {
        a[(row, nu + s)] = 1.0;
        l[row] = 0.0;
        row += 1;
    }
    debug_assert_eq!(row, m_rows);

    // Tracking cost, same shape as the fast planner's.
    let mut p_mat = DMatrix::<f64>::zeros(n, n);
    let mut q = DVector::<f64>::zeros(n);
    let theta_targets = unwrap_headings(
        &slice.points.iter().map(|p| p.state).collect::<Vec<_>>(),
        VehicleState::from_vector(model.s0).theta,
    );
    for h in 1..=h_len {
        let target = Vector3::new(
            slice.points[h].state.x,
            slice.points[h].state.y,
            theta_targets[h],
        );
        let ph = 2.0 * model.f[h].transpose() * &model.f[h];
        p_mat.view_mut((0, 0), (nu, nu)).zip_apply(&ph, |d, s| *d += s);
        let qh = 2.0 * model.f[h].transpose() * (model.g[h] - target);
        q.rows_mut(0, nu).zip_apply(&qh, |d, s| *d += s);
    }
    for h in 0..h_len {
        p_mat[(2 * h, 2 * h)] += 2.0;
        q[2 * h] += -2.0 * slice.points[h].speed;
    }
    for s in 0..n_margin_slack {
        q[nu + s] += SLACK_WEIGHT;
    }
    for i in 0..n {
        p_mat[(i, i)] += 2e-6;
    }

    let problem = QpProblem {
        p: p_mat,
        q,
        a,
        l,
        u,
    };
    // The slack penalty spreads the cost data over several orders of
    // magnitude; a relative tolerance keeps termination meaningful there.
    // Moderate accuracy and a hard iteration cap suffice: the step is
    // re-scored on the exact rollout and guarded by the incumbent
    // comparison, and feasibility is certified by the exact dual refresh,
    // never by the model. A sloppy step is merely rejected.
    let settings = QpSettings {
        eps_abs: 1e-4,
        eps_rel: 1e-6,
        max_iterations: 3000,
        ..QpSettings::default()
    };
    let solution = qp::solve(&problem, warm, &settings)?;

    // Project inputs onto the exact box and rate bounds, then re-roll.
    let solved: Vec<ControlInput> = (0..h_len)
        .map(|h| ControlInput::new(solution.x[2 * h], solution.x[2 * h + 1]))
        .collect();
    let inputs = project_inputs(&solved, bounds, u_prev);
    // Re-roll through the exact dynamics with a continuous heading, so the
    // returned states are what the projected inputs actually produce and
    // the dual refresh certifies the executable motion, not the linear
    // model's prediction of it.
    let roll = |inputs: &[ControlInput]| {
        let mut raw = Vec::with_capacity(h_len + 1);
        raw.push(model.s0);
        for (h, u) in inputs.iter().enumerate() {
            let s: Vector3<f64> = raw[h];
            let dt = model.params.dt;
            raw.push(Vector3::new(
                s[0] + u.v * s[2].cos() * dt,
                s[1] + u.v * s[2].sin() * dt,
                s[2] + u.v * u.psi.tan() / model.params.wheelbase * dt,
            ));
        }
        raw
    };
    // Largest gap between the linear model the subproblem optimized and
    // the exact rollout it is held to.
    let linearization_gap = |raw: &[Vector3<f64>], inputs: &[ControlInput]| {
        let mut gap: f64 = 0.0;
        for h in 0..h_len {
            let check =
                model.lin[h].a * raw[h] + model.lin[h].b * inputs[h].as_vector() + model.lin[h].c;
            gap = gap.max((raw[h + 1] - check).abs().max());
        }
        gap
    };
    let raw = roll(&inputs);
    let mut dynamics_residual = linearization_gap(&raw, &inputs);

    // Exact objective at the projected motion with minimal feasible slacks.
    let mut parts = exact_objective(
        &raw,
        &inputs,
        &rows,
        n_margin_slack,
        slice,
        &theta_targets,
        &theta_ref,
        d_theta,
    );
    let mut states = raw;
    let mut inputs = inputs;
    let mut accepted_step = true;
    {
        let inc_raw: Vec<Vector3<f64>> = margin_ref
            .states
            .iter()
            .enumerate()
            .map(|(h, s)| Vector3::new(s.x, s.y, theta_ref[h]))
            .collect();
        let inc = exact_objective(
            &inc_raw,
            &margin_ref.inputs,
            &rows,
            n_margin_slack,
            slice,
            &theta_targets,
            &theta_ref,
            d_theta,
        );
        let believed_slack: f64 = (0..n_margin_slack).map(|s| solution.x[nu + s]).sum();
        eprintln!(
            "  incumbent tracking {:.3} slack {:.5} vs qp tracking {:.3} slack {:.5} trust {:.5} believed {:.5}",
            inc.tracking, inc.slack_sum, parts.tracking, parts.slack_sum, parts.trust_sum,
            believed_slack
        );
        if inc.penalized() < parts.penalized() {
            parts = inc;
            inputs = margin_ref.inputs.clone();
            dynamics_residual = linearization_gap(&inc_raw, &inputs);
            states = inc_raw;
            accepted_step = false;
        }
    }

    Ok(MotionSolve {
        motion: Motion {
            states: states.into_iter().map(VehicleState::from_vector).collect(),
            inputs,
        },
        objective: parts.penalized(),
        tracking_cost: parts.tracking,
        max_slack: parts.max_slack,
        qp: solution,
        dynamics_residual,
        accepted_step,
    })
}

fn window(lo: f64, hi: f64, box_lo: f64, box_hi: f64) -> (f64, f64) {
    let a = lo.max(box_lo);
    let b = hi.min(box_hi);
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Clamp an input sequence onto the box bounds and the rate chain rooted
/// at the previously executed input. The result is always admissible, so
/// every motion rolled from it can serve as an incumbent.
fn project_inputs(
    inputs: &[ControlInput],
    bounds: &ActionBounds,
    u_prev: Option<ControlInput>,
) -> Vec<ControlInput> {
    let mut out = Vec::with_capacity(inputs.len());
    let mut prev = u_prev;
    for u in inputs {
        let mut v = u.v.clamp(bounds.u_min.v, bounds.u_max.v);
        let mut psi = u.psi.clamp(bounds.u_min.psi, bounds.u_max.psi);
        if let Some(p) = prev {
            let vw = window(
                p.v + bounds.a_min.v,
                p.v + bounds.a_max.v,
                bounds.u_min.v,
                bounds.u_max.v,
            );
            let pw = window(
                p.psi + bounds.a_min.psi,
                p.psi + bounds.a_max.psi,
                bounds.u_min.psi,
                bounds.u_max.psi,
            );
            v = v.clamp(vw.0, vw.1);
            psi = psi.clamp(pw.0, pw.1);
        }
        let next = ControlInput::new(v, psi);
        out.push(next);
        prev = Some(next);
    }
    out
}

/// Dual block: per (obstacle, step), the max-margin certificate at the
/// fixed motion. Decomposes into independent pairs; obstacles run in
/// parallel with deterministic assembly.
#[derive(Clone, Debug)]
pub struct DualSolve {
    pub duals: Vec<Vec<DualVariables>>,
    /// True signed clearance per (i, h); negative inside.
    pub margins: Vec<Vec<f64>>,
    /// Set when any pair fell back to its previous certificate.
    pub degraded: bool,
}

pub fn solve_dual_subproblem(
    motion: &Motion,
    predictions: &[ObstaclePrediction],
    ego_body: &ConvexPolytope,
    previous: Option<&[Vec<DualVariables>]>,
) -> DualSolve {
    let poses: Vec<RigidPose2> = motion
        .states
        .iter()
        .map(|s| RigidPose2::new(s.x, s.y, s.theta))
        .collect();
    let per_obstacle: Vec<(Vec<DualVariables>, Vec<f64>, bool)> = predictions
        .par_iter()
        .enumerate()
        .map(|(i, pred)| {
            let mut duals = Vec::with_capacity(poses.len());
            let mut margins = Vec::with_capacity(poses.len());
            let mut degraded = false;
            for (h, pose) in poses.iter().enumerate() {
                let poly = &pred.polytopes[h.min(pred.polytopes.len() - 1)];
                match max_margin_duals(ego_body, pose, poly) {
                    Ok((d, margin)) => {
                        duals.push(d);
                        margins.push(margin);
                    }
                    Err(_) => {
                        degraded = true;
                        let fallback = previous
                            .and_then(|p| p.get(i))
                            .and_then(|row| row.get(h))
                            .cloned()
                            .unwrap_or_else(|| {
                                DualVariables::zeros(poly.num_facets(), ego_body.num_facets())
                            });
                        duals.push(fallback);
                        margins.push(min_distance(
                            &transform_to_world(ego_body, pose),
                            poly,
                        ));
                    }
                }
            }
            (duals, margins, degraded)
        })
        .collect();

    let degraded = per_obstacle.iter().any(|(_, _, d)| *d);
    DualSolve {
        duals: per_obstacle.iter().map(|(d, _, _)| d.clone()).collect(),
        margins: per_obstacle.into_iter().map(|(_, m, _)| m).collect(),
        degraded,
    }
}

fn residual_from_margins(margins: &[Vec<f64>], d_safe: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for row in margins {
        for (h, m) in row.iter().enumerate() {
            if h == 0 {
                continue;
            }
            worst = worst.max(d_safe - m);
        }
    }
    worst.max(0.0)
}

/// Build a reference-tracking motion for cold starts: slice poses with
/// box-clamped envelope speeds and the steering that follows the slice
/// heading profile.
pub fn reference_motion(
    slice: &ReferenceSlice,
    s_t: &VehicleState,
    bounds: &ActionBounds,
    params: &VehicleParams,
) -> Motion {
    let h_len = slice.points.len() - 1;
    let theta = unwrap_headings(
        &slice.points.iter().map(|p| p.state).collect::<Vec<_>>(),
        s_t.theta,
    );
    let mut inputs = Vec::with_capacity(h_len);
    for h in 0..h_len {
        let v = slice.points[h].speed.clamp(bounds.u_min.v, bounds.u_max.v);
        let dtheta = theta[h + 1] - theta[h];
        let psi = if v.abs() > 0.05 {
            (dtheta * params.wheelbase / (v * params.dt))
                .atan()
                .clamp(bounds.u_min.psi, bounds.u_max.psi)
        } else {
            0.0
        };
        inputs.push(ControlInput::new(v, psi));
    }
    let mut states = vec![*s_t];
    states.extend(slice.points.iter().skip(1).map(|p| p.state));
    Motion { states, inputs }
}

/// Alternating minimization: from a warm or cold initial iterate, repeat
/// (motion solve, dual refresh) until the certified residual is under
/// tolerance or the sweep budget runs out. The final dual refresh always
/// follows the final motion, so the reported residual certifies the
/// returned plan.
#[allow(clippy::too_many_arguments)]
pub fn am_solve(
    s_t: &VehicleState,
    predictions: &[ObstaclePrediction],
    slice: &ReferenceSlice,
    ego_body: &ConvexPolytope,
    bounds: &ActionBounds,
    params: &VehicleParams,
    config: &SaConfig,
    warm: Option<&SaState>,
    u_prev: Option<ControlInput>,
) -> Result<(PlanResult, SaState)> {
    let start = Instant::now();
    config.validate()?;
    params.validate()?;
    if slice.points.len() != config.h + 1 {
        return Err(Error::InvalidArgument(format!(
            "slice has {} points for h = {}",
            slice.points.len(),
            config.h
        )));
    }
    for (i, pred) in predictions.iter().enumerate() {
        if pred.polytopes.len() != config.h + 1 {
            return Err(Error::InvalidArgument(format!(
                "obstacle {i} prediction covers {} steps, expected {}",
                pred.polytopes.len(),
                config.h + 1
            )));
        }
    }

    let warm_motion_ok = warm
        .map(|w| w.motion.inputs.len() == config.h && w.motion.states.len() == config.h + 1)
        .unwrap_or(false);
    // Warm or cold, the initial motion is an admissible input sequence
    // re-rolled from the current state. That keeps every sweep's reference
    // inside the box and rate bounds (so the hard trust windows never cut
    // away the whole feasible set) and makes the initial motion a valid
    // incumbent from the first sweep on.
    let initial_motion = {
        let candidate = if warm_motion_ok {
            warm.unwrap().motion.inputs.clone()
        } else {
            reference_motion(slice, s_t, bounds, params).inputs
        };
        let inputs = project_inputs(&candidate, bounds, u_prev);
        let mut states = Vec::with_capacity(inputs.len() + 1);
        states.push(*s_t);
        for u in &inputs {
            states.push(step_nonlinear(states.last().unwrap(), u, params)?);
        }
        Motion { states, inputs }
    };
    let mut duals: Vec<Vec<DualVariables>> = (0..predictions.len())
        .map(|i| {
            (0..=config.h)
                .map(|h| {
                    let want_l = predictions[i].polytopes[h].num_facets();
                    let want_m = ego_body.num_facets();
                    warm.and_then(|w| w.duals.get(i))
                        .and_then(|row| row.get(h))
                        .filter(|d| d.lambda.len() == want_l && d.mu.len() == want_m)
                        .cloned()
                        .unwrap_or_else(|| DualVariables::zeros(want_l, want_m))
                })
                .collect()
        })
        .collect();

    let mut margin_ref = initial_motion;
    let mut qp_warm: Option<QpSolution> = warm.and_then(|w| w.qp.clone());
    let mut objectives = Vec::with_capacity(config.am_iterations);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut last: Option<(MotionSolve, DualSolve)> = None;
    // Trust scale adapts across sweeps: a rejected step leaves the motion
    // (and so the linearization) unchanged, making the next sweep a retry
    // of the same subproblem at half the window widths.
    let mut trust_scale: f64 = 1.0;

    for sweep in 1..=config.am_iterations {
        // Relinearize around the current motion. The refreshed duals can
        // only raise the incumbent's certified margins, so the objective
        // sequence stays non-increasing across the rebuild.
        let t0 = Instant::now();
        let model = MotionModel::around(s_t, &margin_ref, params, bounds)?;
        let t_model = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let ms = solve_motion_subproblem(
            &model,
            &duals,
            &margin_ref,
            slice,
            predictions,
            ego_body,
            config,
            trust_scale,
            bounds,
            u_prev,
            qp_warm.as_ref(),
        )?;
        let t_motion = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        trust_scale = if ms.accepted_step {
            (trust_scale * 1.5).min(1.0)
        } else {
            trust_scale * 0.5
        };
        if ms
            .motion
            .states
            .iter()
            .any(|s| !(s.x.is_finite() && s.y.is_finite() && s.theta.is_finite()))
        {
            return Err(Error::NumericFailure(format!(
                "non-finite motion iterate at sweep {sweep}; last residual {residual:.3e}"
            )));
        }
        let ds = solve_dual_subproblem(&ms.motion, predictions, ego_body, Some(&duals));
        let t_dual = t0.elapsed().as_secs_f64();
        duals = ds.duals.clone();
        residual = residual_from_margins(&ds.margins, config.d_safe);
        eprintln!(
            "sweep {sweep}: obj {:.3} tracking {:.3} max_slack {:.5} residual {:.5} qp_iters {} qp_prim {:.2e} qp_dual {:.2e} t_model {:.4} t_motion {:.4} t_dual {:.4}",
            ms.objective, ms.tracking_cost, ms.max_slack, residual,
            ms.qp.iterations, ms.qp.primal_residual, ms.qp.dual_residual,
            t_model, t_motion, t_dual
        );
        objectives.push(ms.objective);
        margin_ref = ms.motion.clone();
        qp_warm = Some(ms.qp.clone());
        iterations = sweep;
        last = Some((ms, ds));
        if residual <= config.residual_tol {
            break;
        }
    }

    let (ms, _ds) = last.expect("am_iterations >= 2 guarantees at least one sweep");
    let feasible = residual <= config.residual_tol;
    let plan = PlanResult {
        states: ms.motion.states.clone(),
        inputs: ms.motion.inputs.clone(),
        selected: None,
        feasible,
        deviation_cost: ms.tracking_cost,
        residual,
        dynamics_residual: ms.dynamics_residual,
        iterations,
        solve_seconds: start.elapsed().as_secs_f64(),
    };
    let state = SaState {
        motion: ms.motion,
        duals,
        iterations,
        residual,
        objectives,
        qp: Some(ms.qp),
    };
    Ok((plan, state))
}

/// Shape-aware planner front end. Holds the previous cycle's iterate and
/// shifts it one step forward as the warm start for the next cycle.
pub struct SaPlanner {
    pub config: SaConfig,
    pub params: VehicleParams,
    pub bounds: ActionBounds,
    pub ego_body: ConvexPolytope,
    warm: Option<SaState>,
}

impl SaPlanner {
    pub fn new(
        config: SaConfig,
        params: VehicleParams,
        bounds: ActionBounds,
        ego_body: ConvexPolytope,
    ) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        bounds.validate()?;
        Ok(Self {
            config,
            params,
            bounds,
            ego_body,
            warm: None,
        })
    }

    /// Ego body from the vehicle footprint, centered on the state point.
    pub fn from_vehicle(
        config: SaConfig,
        params: VehicleParams,
        bounds: ActionBounds,
    ) -> Result<Self> {
        let body = crate::geometry::rectangle_polytope(params.length, params.width)?;
        Self::new(config, params, bounds, body)
    }

    pub fn reset(&mut self) {
        self.warm = None;
    }

    pub fn plan(
        &mut self,
        state: &VehicleState,
        u_prev: Option<ControlInput>,
        reference: &ReferencePlan,
        gamma: f64,
        obstacles: &[ShapedObstacle],
    ) -> Result<PlanResult> {
        let slice = query_reference(reference, state, gamma, self.config.h, self.params.dt);
        let predictions = predict_polytopes(obstacles, self.config.h, self.params.dt);
        let shifted = self.warm.take().map(|w| shift_state(w, state));
        let (plan, next) = am_solve(
            state,
            &predictions,
            &slice,
            &self.ego_body,
            &self.bounds,
            &self.params,
            &self.config,
            shifted.as_ref(),
            u_prev,
        )?;
        self.warm = Some(next);
        Ok(plan)
    }
}

/// Advance a stored iterate by one control period: drop the first step,
/// repeat the last, and re-anchor the initial state.
fn shift_state(mut w: SaState, s_t: &VehicleState) -> SaState {
    if w.motion.states.len() >= 2 {
        w.motion.states.remove(0);
        let last = *w.motion.states.last().unwrap();
        w.motion.states.push(last);
        w.motion.states[0] = *s_t;
    }
    if w.motion.inputs.len() >= 2 {
        w.motion.inputs.remove(0);
        let last = *w.motion.inputs.last().unwrap();
        w.motion.inputs.push(last);
    }
    for row in w.duals.iter_mut() {
        if row.len() >= 2 {
            row.remove(0);
            let last = row.last().unwrap().clone();
            row.push(last);
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rectangle_polytope;
    use crate::vehicle::step_nonlinear;

    fn params() -> VehicleParams {
        VehicleParams {
            wheelbase: 2.0,
            dt: 0.1,
            length: 4.0,
            width: 2.0,
        }
    }

    fn bounds() -> ActionBounds {
        ActionBounds {
            u_min: ControlInput::new(0.0, -0.45),
            u_max: ControlInput::new(12.0, 0.45),
            a_min: ControlInput::new(-0.8, -0.15),
            a_max: ControlInput::new(0.8, 0.15),
        }
    }

    fn straight_plan(speed: f64) -> ReferencePlan {
        let n = 400;
        ReferencePlan {
            waypoints: (0..n)
                .map(|i| VehicleState::new(i as f64 * 0.5, 0.0, 0.0))
                .collect(),
            speeds: vec![speed; n],
            spacing: 0.5,
            closed: false,
            v_max: 12.0,
        }
    }

    fn ego() -> ConvexPolytope {
        rectangle_polytope(4.0, 2.0).unwrap()
    }

    fn box_at(x: f64, y: f64, length: f64, width: f64) -> ConvexPolytope {
        transform_to_world(
            &rectangle_polytope(length, width).unwrap(),
            &RigidPose2::new(x, y, 0.0),
        )
    }

    fn corridor_scene() -> (VehicleState, Vec<ShapedObstacle>, ReferencePlan) {
        // Three parked rivals staggered along the lane edges; the first one
        // clips the lane enough to force a move within the horizon.
        let obstacles = vec![
            ShapedObstacle {
                polytope: box_at(16.0, -1.6, 4.0, 2.0),
                velocity: Vector2::zeros(),
            },
            ShapedObstacle {
                polytope: box_at(26.0, 1.8, 4.0, 2.0),
                velocity: Vector2::zeros(),
            },
            ShapedObstacle {
                polytope: box_at(36.0, -1.8, 4.0, 2.0),
                velocity: Vector2::zeros(),
            },
        ];
        (
            VehicleState::new(10.0, 0.0, 0.0),
            obstacles,
            straight_plan(7.0),
        )
    }

    fn slice_for(plan: &ReferencePlan, pose: &VehicleState, cfg: &SaConfig) -> ReferenceSlice {
        query_reference(plan, pose, 0.0, cfg.h, params().dt)
    }

    #[test]
    fn prediction_translates_polytopes() {
        let obs = ShapedObstacle {
            polytope: box_at(5.0, 1.0, 2.0, 1.0),
            velocity: Vector2::new(2.0, -1.0),
        };
        let preds = predict_polytopes(&[obs.clone()], 4, 0.5);
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].polytopes.len(), 5);
        for h in 0..=4 {
            let shift = obs.velocity * (h as f64 * 0.5);
            for (v, v0) in preds[0].polytopes[h]
                .vertices()
                .iter()
                .zip(obs.polytope.vertices())
            {
                assert!((v - (v0 + shift)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_scene_tracks_the_reference_in_one_sweep() {
        let plan = straight_plan(7.0);
        let pose = VehicleState::new(10.0, 0.0, 0.0);
        let cfg = SaConfig::default();
        let slice = slice_for(&plan, &pose, &cfg);
        let (result, state) = am_solve(
            &pose,
            &[],
            &slice,
            &ego(),
            &bounds(),
            &params(),
            &cfg,
            None,
            None,
        )
        .unwrap();
        assert!(result.feasible);
        assert_eq!(result.iterations, 1);
        assert_eq!(result.residual, 0.0);
        assert!(result.deviation_cost < 1e-6, "cost {}", result.deviation_cost);
        assert!(state.duals.is_empty());
        for u in &result.inputs {
            assert!((u.v - 7.0).abs() < 1e-4);
            assert!(u.psi.abs() < 1e-5);
        }
    }

    #[test]
    fn gamma_shift_moves_planned_speeds() {
        let plan = straight_plan(7.0);
        let pose = VehicleState::new(10.0, 0.0, 0.0);
        let cfg = SaConfig::default();
        let slice = query_reference(&plan, &pose, -2.0, cfg.h, params().dt);
        let (result, _) = am_solve(
            &pose,
            &[],
            &slice,
            &ego(),
            &bounds(),
            &params(),
            &cfg,
            None,
            None,
        )
        .unwrap();
        for u in &result.inputs {
            assert!((u.v - 5.0).abs() < 1e-4, "speed {}", u.v);
        }
    }

    #[test]
    fn blocking_obstacle_forces_a_certified_swerve() {
        let (pose, obstacles, plan) = corridor_scene();
        let cfg = SaConfig {
            d_safe: 0.3,
            ..SaConfig::default()
        };
        let slice = slice_for(&plan, &pose, &cfg);
        let predictions = predict_polytopes(&obstacles, cfg.h, params().dt);
        let (result, state) = am_solve(
            &pose,
            &predictions,
            &slice,
            &ego(),
            &bounds(),
            &params(),
            &cfg,
            None,
            None,
        )
        .unwrap();
        assert!(result.feasible, "residual {}", result.residual);
        assert!(result.residual <= 1e-3);
        // The plan must leave the lane: first obstacle sits in-lane.
        let max_y = result.states.iter().map(|s| s.y.abs()).fold(0.0, f64::max);
        assert!(max_y > 0.5, "no swerve, max |y| = {max_y}");
        // Certified clearance at the linearization points, rechecked with
        // exact geometry.
        for (h, s) in result.states.iter().enumerate().skip(1) {
            let ego_world = transform_to_world(&ego(), &RigidPose2::new(s.x, s.y, s.theta));
            for pred in &predictions {
                let d = min_distance(&ego_world, &pred.polytopes[h]);
                assert!(d >= cfg.d_safe - 1e-2, "step {h}: distance {d}");
            }
        }
        // Duals stay inside the certificate cone.
        for row in &state.duals {
            for d in row {
                assert!(d.lambda.iter().all(|v| *v >= -1e-10));
                assert!(d.mu.iter().all(|v| *v >= -1e-10));
            }
        }
    }

    #[test]
    fn nonlinear_rollout_of_the_plan_keeps_clearance() {
        // Cold solves fix the dynamics around the straight reference, so a
        // swerving plan drifts under the exact model. A second cycle warm
        // started from the first, as the receding-horizon loop always runs,
        // relinearizes around the swerve; its plan must hold up under the
        // nonlinear rollout.
        let (pose, obstacles, plan) = corridor_scene();
        let cfg = SaConfig {
            am_iterations: 5,
            ..SaConfig::default()
        };
        let slice = slice_for(&plan, &pose, &cfg);
        let predictions = predict_polytopes(&obstacles, cfg.h, params().dt);
        let run = |warm: Option<&SaState>| {
            am_solve(
                &pose,
                &predictions,
                &slice,
                &ego(),
                &bounds(),
                &params(),
                &cfg,
                warm,
                None,
            )
            .unwrap()
        };
        let (_, first) = run(None);
        let (result, _) = run(Some(&first));
        assert!(result.feasible);
        let mut s = pose;
        for (h, u) in result.inputs.iter().enumerate() {
            s = step_nonlinear(&s, u, &params()).unwrap();
            let ego_world = transform_to_world(&ego(), &RigidPose2::new(s.x, s.y, s.theta));
            for pred in &predictions {
                let d = min_distance(&ego_world, &pred.polytopes[h + 1]);
                assert!(d >= cfg.d_safe - 1e-2, "step {}: distance {d}", h + 1);
            }
        }
    }

    #[test]
    fn motion_objective_is_monotone_across_sweeps() {
        let (pose, obstacles, plan) = corridor_scene();
        let cfg = SaConfig {
            am_iterations: 6,
            residual_tol: 1e-12,
            ..SaConfig::default()
        };
        let slice = slice_for(&plan, &pose, &cfg);
        let predictions = predict_polytopes(&obstacles, cfg.h, params().dt);
        let (_, state) = am_solve(
            &pose,
            &predictions,
            &slice,
            &ego(),
            &bounds(),
            &params(),
            &cfg,
            None,
            None,
        )
        .unwrap();
        assert!(state.objectives.len() >= 3);
        for w in state.objectives.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-6 * (1.0 + w[0].abs()),
                "objective rose: {:?}",
                state.objectives
            );
        }
    }

    #[test]
    fn warm_start_needs_no_more_sweeps_than_cold() {
        let (pose, obstacles, plan) = corridor_scene();
        let cfg = SaConfig::default();
        let slice = slice_for(&plan, &pose, &cfg);
        let predictions = predict_polytopes(&obstacles, cfg.h, params().dt);
        let run = |warm: Option<&SaState>| {
            am_solve(
                &pose,
                &predictions,
                &slice,
                &ego(),
                &bounds(),
                &params(),
                &cfg,
                warm,
                None,
            )
            .unwrap()
        };
        let (cold_plan, cold_state) = run(None);
        let (warm_plan, _) = run(Some(&cold_state));
        assert!(cold_plan.feasible && warm_plan.feasible);
        assert!(
            warm_plan.iterations <= cold_plan.iterations,
            "warm {} > cold {}",
            warm_plan.iterations,
            cold_plan.iterations
        );
    }

    #[test]
    fn debug_warm_path() {
        let (pose, obstacles, plan) = corridor_scene();
        let cfg = SaConfig {
            am_iterations: 5,
            ..SaConfig::default()
        };
        let slice = slice_for(&plan, &pose, &cfg);
        let predictions = predict_polytopes(&obstacles, cfg.h, params().dt);
        let run = |warm: Option<&SaState>| {
            am_solve(
                &pose,
                &predictions,
                &slice,
                &ego(),
                &bounds(),
                &params(),
                &cfg,
                warm,
                None,
            )
            .unwrap()
        };
        let (cold_plan, cold_state) = run(None);
        eprintln!(
            "cold: feasible {} iters {} residual {:.6} secs {:.4} objectives {:?}",
            cold_plan.feasible,
            cold_plan.iterations,
            cold_plan.residual,
            cold_plan.solve_seconds,
            cold_state.objectives
        );
        for s in &cold_state.motion.states {
            eprintln!("  cold state ({:.3}, {:.3}, {:.4})", s.x, s.y, s.theta);
        }
        let (warm_plan, warm_state) = run(Some(&cold_state));
        eprintln!(
            "warm: feasible {} iters {} residual {:.6} secs {:.4} objectives {:?}",
            warm_plan.feasible,
            warm_plan.iterations,
            warm_plan.residual,
            warm_plan.solve_seconds,
            warm_state.objectives
        );
        for s in &warm_state.motion.states {
            eprintln!("  warm state ({:.3}, {:.3}, {:.4})", s.x, s.y, s.theta);
        }
    }

    #[test]
    fn dual_subproblem_matches_exact_distance_when_separated() {
        let motion = Motion {
            states: vec![VehicleState::new(0.0, 0.0, 0.3); 4],
            inputs: vec![ControlInput::new(5.0, 0.0); 3],
        };
        let pred = ObstaclePrediction {
            polytopes: (0..4).map(|h| box_at(10.0 + h as f64, 2.0, 2.0, 2.0)).collect(),
        };
        let ds = solve_dual_subproblem(&motion, &[pred.clone()], &ego(), None);
        assert!(!ds.degraded);
        for h in 0..4 {
            let pose = RigidPose2::new(0.0, 0.0, 0.3);
            let exact = min_distance(&transform_to_world(&ego(), &pose), &pred.polytopes[h]);
            assert!((ds.margins[0][h] - exact).abs() < 1e-9);
            assert!(ds.duals[0][h].lambda.iter().all(|v| *v >= 0.0));
            let w: Vector2<f64> = (0..pred.polytopes[h].num_facets())
                .map(|r| ds.duals[0][h].lambda[r] * pred.polytopes[h].normal(r))
                .sum();
            assert!(w.norm() <= 1.0 + 1e-8);
        }
    }

    #[test]
    fn dual_subproblem_reports_negative_margin_on_overlap() {
        let motion = Motion {
            states: vec![VehicleState::new(0.0, 0.0, 0.0); 2],
            inputs: vec![ControlInput::new(1.0, 0.0)],
        };
        let pred = ObstaclePrediction {
            polytopes: vec![box_at(1.0, 0.0, 2.0, 2.0); 2],
        };
        let ds = solve_dual_subproblem(&motion, &[pred], &ego(), None);
        for h in 0..2 {
            assert!(ds.margins[0][h] < 0.0, "margin {}", ds.margins[0][h]);
        }
    }

    #[test]
    fn dual_results_are_order_independent() {
        let motion = Motion {
            states: vec![VehicleState::new(0.0, 0.0, 0.1); 3],
            inputs: vec![ControlInput::new(4.0, 0.0); 2],
        };
        let preds: Vec<ObstaclePrediction> = (0..3)
            .map(|i| ObstaclePrediction {
                polytopes: vec![box_at(8.0 + 3.0 * i as f64, i as f64 - 1.0, 2.0, 1.5); 3],
            })
            .collect();
        let forward = solve_dual_subproblem(&motion, &preds, &ego(), None);
        let reversed_preds: Vec<ObstaclePrediction> = preds.iter().rev().cloned().collect();
        let reversed = solve_dual_subproblem(&motion, &reversed_preds, &ego(), None);
        for i in 0..3 {
            let j = 2 - i;
            for h in 0..3 {
                assert_eq!(forward.margins[i][h], reversed.margins[j][h]);
                assert_eq!(
                    forward.duals[i][h].lambda.as_slice(),
                    reversed.duals[j][h].lambda.as_slice()
                );
            }
        }
    }

    #[test]
    fn am_solve_is_deterministic() {
        let (pose, obstacles, plan) = corridor_scene();
        let cfg = SaConfig::default();
        let slice = slice_for(&plan, &pose, &cfg);
        let predictions = predict_polytopes(&obstacles, cfg.h, params().dt);
        let run = || {
            let (r, _) = am_solve(
                &pose,
                &predictions,
                &slice,
                &ego(),
                &bounds(),
                &params(),
                &cfg,
                None,
                None,
            )
            .unwrap();
            (
                r.states.iter().map(|s| (s.x, s.y, s.theta)).collect::<Vec<_>>(),
                r.residual,
                r.deviation_cost,
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn planner_survives_obstacle_count_changes() {
        let (pose, obstacles, plan) = corridor_scene();
        let mut planner =
            SaPlanner::from_vehicle(SaConfig::default(), params(), bounds()).unwrap();
        let first = planner.plan(&pose, None, &plan, 0.0, &obstacles).unwrap();
        assert!(first.feasible);
        let fewer = &obstacles[..1];
        let pose2 = first.states[1];
        let second = planner
            .plan(&pose2, Some(first.inputs[0]), &plan, 0.0, fewer)
            .unwrap();
        assert!(second.feasible);
        let pose3 = second.states[1];
        let third = planner
            .plan(&pose3, Some(second.inputs[0]), &plan, 0.0, &obstacles)
            .unwrap();
        assert!(third.feasible);
    }

    #[test]
    fn config_bounds_are_enforced() {
        let mut cfg = SaConfig::default();
        cfg.am_iterations = 1;
        assert!(cfg.validate().is_err());
        cfg.am_iterations = 11;
        assert!(cfg.validate().is_err());
        cfg.am_iterations = 2;
        assert!(cfg.validate().is_ok());
    }
}
