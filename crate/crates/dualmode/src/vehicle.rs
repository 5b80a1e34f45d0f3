//! Ackermann kinematics: nonlinear step, exact Jacobian linearization, and
//! actuation bounds.
//!
//! Both planners consume the discrete model through
//! [`LinearizedDynamics`]; the simulation harness integrates
//! [`step_nonlinear`] at a finer substep, so the linearization error is a
//! property under test, not an assumption.

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::normalize_angle;
use crate::{Error, Result};

/// Planar vehicle state: rear-axle position and heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }
}

/// Speed and steering-angle command. `psi` is a steering angle in the
/// Ackermann sense: yaw rate is `v tan(psi) / wheelbase`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub v: f64,
    pub psi: f64,
}

impl ControlInput {
    pub fn new(v: f64, psi: f64) -> Self {
        Self { v, psi }
    }

    pub fn as_vector(&self) -> Vector2<f64> {
        Vector2::new(self.v, self.psi)
    }
}

/// Box bounds on the control vector plus per-step rate bounds on its
/// consecutive differences (same units as the control, per planning step).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ActionBounds {
    pub u_min: ControlInput,
    pub u_max: ControlInput,
    pub a_min: ControlInput,
    pub a_max: ControlInput,
}

impl ActionBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = self.u_min.v <= self.u_max.v
            && self.u_min.psi <= self.u_max.psi
            && self.a_min.v <= 0.0
            && self.a_min.psi <= 0.0
            && self.a_max.v >= 0.0
            && self.a_max.psi >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "action bounds must satisfy u_min <= u_max and a_min <= 0 <= a_max".into(),
            ))
        }
    }

    pub fn contains(&self, u: &ControlInput, tol: f64) -> bool {
        u.v >= self.u_min.v - tol
            && u.v <= self.u_max.v + tol
            && u.psi >= self.u_min.psi - tol
            && u.psi <= self.u_max.psi + tol
    }

    pub fn rate_ok(&self, prev: &ControlInput, next: &ControlInput, tol: f64) -> bool {
        let dv = next.v - prev.v;
        let dpsi = next.psi - prev.psi;
        dv >= self.a_min.v - tol
            && dv <= self.a_max.v + tol
            && dpsi >= self.a_min.psi - tol
            && dpsi <= self.a_max.psi + tol
    }
}

/// Affine one-step model `s' = A s + B u + c`, valid around one
/// state/control reference.
#[derive(Clone, Debug)]
pub struct LinearizedDynamics {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
    pub c: Vector3<f64>,
}

impl LinearizedDynamics {
    pub fn step(&self, s: Vector3<f64>, u: Vector2<f64>) -> Vector3<f64> {
        self.a * s + self.b * u + self.c
    }
}

/// Geometry and timing of the planning model.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Axle-to-axle distance, meters.
    pub wheelbase: f64,
    /// Discretization step, seconds.
    pub dt: f64,
    /// Footprint length, meters.
    pub length: f64,
    /// Footprint width, meters.
    pub width: f64,
}

impl VehicleParams {
    pub fn validate(&self) -> Result<()> {
        if self.wheelbase > 0.0 && self.dt > 0.0 && self.length > 0.0 && self.width > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "vehicle params must be positive".into(),
            ))
        }
    }

    /// Same vehicle on a different time grid.
    pub fn with_dt(&self, dt: f64) -> Self {
        Self { dt, ..*self }
    }
}

fn check_steering(psi: f64) -> Result<()> {
    if !psi.is_finite() || psi.abs() >= std::f64::consts::FRAC_PI_2 {
        return Err(Error::InvalidArgument(format!(
            "steering angle {psi} outside (-pi/2, pi/2)"
        )));
    }
    Ok(())
}

/// Forward-Euler Ackermann step.
pub fn step_nonlinear(s: &VehicleState, u: &ControlInput, params: &VehicleParams) -> Result<VehicleState> {
    check_steering(u.psi)?;
    let dt = params.dt;
    Ok(VehicleState::new(
        s.x + u.v * s.theta.cos() * dt,
        s.y + u.v * s.theta.sin() * dt,
        s.theta + u.v * u.psi.tan() / params.wheelbase * dt,
    ))
}

/// Exact Jacobian linearization of [`step_nonlinear`] at the reference,
/// with the affine term chosen so the expansion reproduces the nonlinear
/// step exactly at the expansion point.
pub fn linearize(
    s_ref: &VehicleState,
    u_ref: &ControlInput,
    params: &VehicleParams,
) -> Result<LinearizedDynamics> {
    check_steering(u_ref.psi)?;
    let dt = params.dt;
    let (sin_t, cos_t) = s_ref.theta.sin_cos();
    let l = params.wheelbase;
    let tan_psi = u_ref.psi.tan();
    let sec2_psi = 1.0 / (u_ref.psi.cos() * u_ref.psi.cos());

    let a = Matrix3::new(
        1.0, 0.0, -u_ref.v * sin_t * dt,
        0.0, 1.0, u_ref.v * cos_t * dt,
        0.0, 0.0, 1.0,
    );
    let b = Matrix3x2::new(
        cos_t * dt, 0.0,
        sin_t * dt, 0.0,
        tan_psi / l * dt, u_ref.v * sec2_psi / l * dt,
    );
    // Unnormalized heading keeps the affine model continuous; consumers
    // renormalize when they convert back to a state.
    let next = Vector3::new(
        s_ref.x + u_ref.v * cos_t * dt,
        s_ref.y + u_ref.v * sin_t * dt,
        s_ref.theta + u_ref.v * tan_psi / l * dt,
    );
    let c = next - a * s_ref.as_vector() - b * u_ref.as_vector();
    Ok(LinearizedDynamics { a, b, c })
}

/// True iff every control sits in the box and every consecutive difference
/// sits in the rate box, both inclusive.
pub fn check_bounds(u_seq: &[ControlInput], bounds: &ActionBounds) -> bool {
    if u_seq.is_empty() {
        return false;
    }
    if !u_seq.iter().all(|u| bounds.contains(u, 0.0)) {
        return false;
    }
    u_seq
        .windows(2)
        .all(|w| bounds.rate_ok(&w[0], &w[1], 0.0))
}
