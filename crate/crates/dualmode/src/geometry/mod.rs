//! Convex polytopes, rigid transforms, exact minimum distance, and the
//! strong-duality collision certificate.
//!
//! Obstacle and ego footprints are stored as bounded halfspace
//! intersections `{x | D x <= b}` with unit-norm rows, so offsets and
//! tolerances are plain meters. The certificate machinery in [`duality`]
//! proves set-to-set clearance without ever forming the non-convex
//! distance function inside an optimizer.

mod duality;
mod polytope;

pub use duality::{
    certificate_margin, dual_certificate_feasible, max_margin_duals, DualVariables,
};
pub use polytope::{
    min_distance, point_polytope, rectangle_polytope, transform_to_world, ConvexPolytope,
    POINT_BOX_SIDE,
};

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

/// Wrap an angle into `(-pi, pi]`.
pub fn normalize_angle(angle: f64) -> f64 {
    let mut a = angle % TAU;
    if a <= -PI {
        a += TAU;
    } else if a > PI {
        a -= TAU;
    }
    a
}

/// Planar rigid pose: position in meters, heading in radians.
///
/// Heading is normalized to `(-pi, pi]` at construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidPose2 {
    pub position: nalgebra::Vector2<f64>,
    pub heading: f64,
}

impl RigidPose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            position: nalgebra::Vector2::new(x, y),
            heading: normalize_angle(heading),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Rotation matrix of the heading.
    pub fn rotation(&self) -> nalgebra::Matrix2<f64> {
        let (s, c) = self.heading.sin_cos();
        nalgebra::Matrix2::new(c, -s, s, c)
    }

    /// Map a body-frame point into the world frame.
    pub fn to_world(&self, body_point: nalgebra::Vector2<f64>) -> nalgebra::Vector2<f64> {
        self.rotation() * body_point + self.position
    }

    /// Map a world-frame point into the body frame.
    pub fn to_body(&self, world_point: nalgebra::Vector2<f64>) -> nalgebra::Vector2<f64> {
        self.rotation().transpose() * (world_point - self.position)
    }
}
