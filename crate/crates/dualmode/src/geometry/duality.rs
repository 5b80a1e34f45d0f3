use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use super::{transform_to_world, ConvexPolytope, RigidPose2};
use crate::{Error, Result};

/// Slack below which a facet counts as active at a point. Must stay below
/// half the smallest facet gap in use (1e-6 m point boxes).
const ACTIVE_EPS: f64 = 1e-8;

/// Acceptable residual when writing a direction as a nonnegative
/// combination of active facet normals.
const DECOMP_EPS: f64 = 1e-9;

/// Multipliers certifying clearance between one ego pose and one obstacle.
///
/// Any pair with `lambda, mu >= 0`, `|D^T lambda|_2 <= 1`, and
/// `G^T mu + R^T D^T lambda = 0` yields a certified lower bound
/// `lambda^T (D p - b) - mu^T h` on the true set distance, so a planner can
/// enforce clearance without evaluating the distance itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualVariables {
    /// One entry per obstacle facet.
    pub lambda: DVector<f64>,
    /// One entry per ego body facet.
    pub mu: DVector<f64>,
}

impl DualVariables {
    pub fn zeros(obstacle_facets: usize, ego_facets: usize) -> Self {
        Self {
            lambda: DVector::zeros(obstacle_facets),
            mu: DVector::zeros(ego_facets),
        }
    }
}

/// Certified clearance `lambda^T (D p - b) - mu^T h` for an ego body at
/// `pose` against a world-frame obstacle.
///
/// For feasible duals this never exceeds the true distance (weak duality);
/// the bound is tight at the maximizer returned by [`max_margin_duals`].
pub fn certificate_margin(
    ego_body: &ConvexPolytope,
    pose: &RigidPose2,
    obstacle: &ConvexPolytope,
    duals: &DualVariables,
) -> f64 {
    assert_eq!(duals.lambda.len(), obstacle.num_facets(), "lambda length");
    assert_eq!(duals.mu.len(), ego_body.num_facets(), "mu length");
    let mut margin = 0.0;
    for i in 0..obstacle.num_facets() {
        margin += duals.lambda[i] * (obstacle.normal(i).dot(&pose.position) - obstacle.offset(i));
    }
    for j in 0..ego_body.num_facets() {
        margin -= duals.mu[j] * ego_body.offset(j);
    }
    margin
}

/// Check every certificate row within `tol`: `lambda >= 0`, `mu >= 0`,
/// `d_safe - lambda^T (D p - b) + mu^T h <= 0`, `|D^T lambda|_2 - 1 <= 0`,
/// and `G^T mu + R^T D^T lambda = 0`.
pub fn dual_certificate_feasible(
    ego_body: &ConvexPolytope,
    pose: &RigidPose2,
    obstacle: &ConvexPolytope,
    duals: &DualVariables,
    d_safe: f64,
    tol: f64,
) -> Result<bool> {
    if duals.lambda.len() != obstacle.num_facets() || duals.mu.len() != ego_body.num_facets() {
        return Err(Error::InvalidArgument(format!(
            "dual dimensions ({}, {}) do not match facet counts ({}, {})",
            duals.lambda.len(),
            duals.mu.len(),
            obstacle.num_facets(),
            ego_body.num_facets()
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be nonnegative, got {tol}"
        )));
    }

    if duals.lambda.iter().any(|&l| -l > tol) || duals.mu.iter().any(|&m| -m > tol) {
        return Ok(false);
    }

    let mut d_t_lambda = Vector2::zeros();
    for i in 0..obstacle.num_facets() {
        d_t_lambda += duals.lambda[i] * obstacle.normal(i);
    }
    if d_t_lambda.norm() - 1.0 > tol {
        return Ok(false);
    }

    // G^T mu + R^T D^T lambda = 0, with G in the body frame.
    let mut g_t_mu = Vector2::zeros();
    for j in 0..ego_body.num_facets() {
        g_t_mu += duals.mu[j] * ego_body.normal(j);
    }
    let equality = g_t_mu + pose.rotation().transpose() * d_t_lambda;
    if equality.amax() > tol {
        return Ok(false);
    }

    let margin = certificate_margin(ego_body, pose, obstacle, duals);
    Ok(d_safe - margin <= tol)
}

/// Duals maximizing the certified clearance for one ego pose / obstacle
/// pair, together with that clearance.
///
/// For disjoint sets the margin equals the exact set distance (strong
/// duality). For touching sets it is 0, and for overlapping sets it is the
/// negated minimum separating translation with a unit-norm certificate, so
/// callers still get the best push direction out of contact.
///
/// The maximizing direction of `min_O d.o - max_E d.x` over unit `d` is
/// always one of: a facet normal of either set (up to sign) or a normalized
/// vertex difference. All are enumerated, then `lambda` and `mu` are read
/// off the active facet normal cones at the supporting points.
pub fn max_margin_duals(
    ego_body: &ConvexPolytope,
    pose: &RigidPose2,
    obstacle: &ConvexPolytope,
) -> Result<(DualVariables, f64)> {
    let ego_world = transform_to_world(ego_body, pose);

    let mut candidates: Vec<Vector2<f64>> = Vec::new();
    for i in 0..obstacle.num_facets() {
        candidates.push(obstacle.normal(i));
        candidates.push(-obstacle.normal(i));
    }
    for j in 0..ego_world.num_facets() {
        candidates.push(ego_world.normal(j));
        candidates.push(-ego_world.normal(j));
    }
    for vo in obstacle.vertices() {
        for ve in ego_world.vertices() {
            let diff = vo - ve;
            let norm = diff.norm();
            if norm > 1e-12 {
                candidates.push(diff / norm);
            }
        }
    }

    // phi(d) = min over obstacle of d.o minus max over ego of d.x; its
    // maximum over unit d is the signed separation.
    let mut best_dir = candidates[0];
    let mut best_phi = f64::NEG_INFINITY;
    for d in &candidates {
        let phi = -obstacle.support(-d) - ego_world.support(*d);
        if phi > best_phi {
            best_phi = phi;
            best_dir = *d;
        }
    }

    let o_star = obstacle.support_point(-best_dir);
    let x_star = ego_world.support_point(best_dir);

    // -d lies in the obstacle normal cone at o*, d in the ego cone at x*.
    let lambda = cone_coefficients(
        -best_dir,
        obstacle,
        o_star,
        "obstacle facet cone at the supporting vertex",
    )?;
    let mu = cone_coefficients(
        best_dir,
        &ego_world,
        x_star,
        "ego facet cone at the supporting vertex",
    )?;

    let duals = DualVariables { lambda, mu };
    let margin = certificate_margin(ego_body, pose, obstacle, &duals);
    debug_assert!(
        (margin - best_phi).abs() <= 1e-9 * (1.0 + best_phi.abs()),
        "certificate margin {margin} drifted from support gap {best_phi}"
    );
    Ok((duals, margin))
}

/// Write `target` as a nonnegative combination of the facet normals active
/// at `point`, returned as a dense multiplier vector over all facets.
fn cone_coefficients(
    target: Vector2<f64>,
    poly: &ConvexPolytope,
    point: Vector2<f64>,
    what: &str,
) -> Result<DVector<f64>> {
    let active = poly.active_facets(point, ACTIVE_EPS);
    let mut best: Option<(f64, DVector<f64>)> = None;

    let mut consider = |coeffs: &[(usize, f64)]| {
        if coeffs.iter().any(|&(_, c)| c < -DECOMP_EPS) {
            return;
        }
        let mut combo = Vector2::zeros();
        for &(i, c) in coeffs {
            combo += c.max(0.0) * poly.normal(i);
        }
        let residual = (combo - target).norm();
        if residual <= DECOMP_EPS && best.as_ref().map_or(true, |(r, _)| residual < *r) {
            let mut full = DVector::zeros(poly.num_facets());
            for &(i, c) in coeffs {
                full[i] = c.max(0.0);
            }
            best = Some((residual, full));
        }
    };

    for &i in &active {
        consider(&[(i, target.dot(&poly.normal(i)))]);
    }
    for (a_idx, &i) in active.iter().enumerate() {
        for &j in &active[a_idx + 1..] {
            let ni = poly.normal(i);
            let nj = poly.normal(j);
            let det = ni.x * nj.y - ni.y * nj.x;
            if det.abs() < 1e-12 {
                continue;
            }
            let ci = (target.x * nj.y - target.y * nj.x) / det;
            let cj = (ni.x * target.y - ni.y * target.x) / det;
            consider(&[(i, ci), (j, cj)]);
        }
    }

    match best {
        Some((_, coeffs)) => Ok(coeffs),
        None => Err(Error::NumericFailure(format!(
            "no nonnegative decomposition of ({:.6}, {:.6}) over {what} ({} active facets)",
            target.x,
            target.y,
            active.len()
        ))),
    }
}
