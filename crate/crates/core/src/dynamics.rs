//! Ground-truth vehicle plant.
//!
//! Lateral motion follows the linear-tire dynamic bicycle model in body frame,
//! integrated with RK4 while the longitudinal speed is frozen over the step.
//! Longitudinal motion is a point mass with quadratic drag and a gear-dependent
//! drive-force cap. Tire forces are scaled back onto the friction circle when
//! their resultant acceleration exceeds `mu_limit`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::wrap_angle;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite vehicle state")]
    NonFiniteState,
    #[error("non-finite actuation command")]
    NonFiniteCommand,
    #[error("step {0} s outside (0, 0.02]")]
    InvalidStep(f64),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(String),
}

/// Below this longitudinal speed the kinematic bicycle replaces the dynamic model.
pub const KINEMATIC_SPEED: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub m: f64,
    pub i_z: f64,
    pub c_alpha_f: f64,
    pub c_alpha_r: f64,
    pub l_f: f64,
    pub l_r: f64,
    pub drag_coeff: f64,
    pub max_drive_force: f64,
    pub max_brake_force: f64,
    pub max_steer: f64,
    pub mu_limit: f64,
    /// Body width, used for clearance checks.
    pub width: f64,
    /// Lateral distance between left and right wheels.
    pub wheel_track: f64,
    /// Drive-force cap per gear, first gear first.
    pub gear_forces: Vec<f64>,
    /// Rear longitudinal slip stiffness: drive force per unit slip ratio.
    pub slip_stiffness: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            m: 750.0,
            i_z: 1000.0,
            c_alpha_f: 80_000.0,
            c_alpha_r: 80_000.0,
            l_f: 1.7,
            l_r: 1.2,
            drag_coeff: 0.8,
            max_drive_force: 9000.0,
            max_brake_force: 15_000.0,
            max_steer: 0.3,
            mu_limit: 25.0,
            width: 1.9,
            wheel_track: 1.6,
            gear_forces: vec![9000.0, 7600.0, 6400.0, 5400.0, 4700.0, 4200.0],
            slip_stiffness: 300_000.0,
        }
    }
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("m", self.m),
            ("i_z", self.i_z),
            ("c_alpha_f", self.c_alpha_f),
            ("c_alpha_r", self.c_alpha_r),
            ("l_f", self.l_f),
            ("l_r", self.l_r),
            ("drag_coeff", self.drag_coeff),
            ("max_drive_force", self.max_drive_force),
            ("max_brake_force", self.max_brake_force),
            ("max_steer", self.max_steer),
            ("mu_limit", self.mu_limit),
            ("width", self.width),
            ("wheel_track", self.wheel_track),
            ("slip_stiffness", self.slip_stiffness),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DynamicsError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if self.l_f + self.l_r >= 5.0 {
            return Err(DynamicsError::InvalidParams("l_f + l_r must be below 5 m".into()));
        }
        if self.max_steer > 0.5 {
            return Err(DynamicsError::InvalidParams("max_steer must not exceed 0.5 rad".into()));
        }
        if self.gear_forces.is_empty() || self.gear_forces.iter().any(|f| !(*f > 0.0)) {
            return Err(DynamicsError::InvalidParams("gear_forces must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn wheelbase(&self) -> f64 {
        self.l_f + self.l_r
    }

    /// Drive-force cap in `gear` (1-based, clamped to the table).
    pub fn gear_force(&self, gear: u8) -> f64 {
        let idx = (gear.max(1) as usize - 1).min(self.gear_forces.len() - 1);
        self.gear_forces[idx].min(self.max_drive_force)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    /// Body longitudinal speed.
    pub x_dot: f64,
    /// Body lateral speed.
    pub y_dot: f64,
    pub psi_dot: f64,
    pub gear: u8,
    /// Front-left, front-right, rear-left, rear-right.
    pub wheel_speeds: [f64; 4],
    pub traction_lost: bool,
    /// Longitudinal and lateral tire accelerations of the last step.
    pub a_long: f64,
    pub a_lat: f64,
}

impl VehicleState {
    pub fn at_rest(x: f64, y: f64, psi: f64) -> Self {
        VehicleState {
            x,
            y,
            psi,
            x_dot: 0.0,
            y_dot: 0.0,
            psi_dot: 0.0,
            gear: 1,
            wheel_speeds: [0.0; 4],
            traction_lost: false,
            a_long: 0.0,
            a_lat: 0.0,
        }
    }

    /// Rolling start with all wheels at the body speed.
    pub fn rolling(x: f64, y: f64, psi: f64, speed: f64) -> Self {
        VehicleState {
            x_dot: speed,
            wheel_speeds: [speed; 4],
            ..Self::at_rest(x, y, psi)
        }
    }

    pub fn speed(&self) -> f64 {
        self.x_dot.hypot(self.y_dot)
    }

    /// World-frame velocity.
    pub fn world_velocity(&self) -> (f64, f64) {
        let (s, c) = self.psi.sin_cos();
        (self.x_dot * c - self.y_dot * s, self.x_dot * s + self.y_dot * c)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.psi, self.x_dot, self.y_dot, self.psi_dot, self.a_long, self.a_lat]
            .iter()
            .chain(self.wheel_speeds.iter())
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ActuationCommand {
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
    pub gear: u8,
}

impl ActuationCommand {
    /// Clamps steer and pedals into range. Brake wins when both pedals are pressed.
    pub fn sanitized(&self, params: &VehicleParams) -> ActuationCommand {
        let brake = self.brake.clamp(0.0, 1.0);
        let throttle = if brake > 0.0 { 0.0 } else { self.throttle.clamp(0.0, 1.0) };
        ActuationCommand {
            steer: self.steer.clamp(-params.max_steer, params.max_steer),
            throttle,
            brake,
            gear: self.gear.max(1),
        }
    }

    fn is_finite(&self) -> bool {
        self.steer.is_finite() && self.throttle.is_finite() && self.brake.is_finite()
    }
}

#[derive(Clone, Copy)]
struct Deriv {
    x: f64,
    y: f64,
    psi: f64,
    vx: f64,
    vy: f64,
    r: f64,
}

/// Lateral tire forces (front, rear) of the linear tire model, both axles.
fn tire_forces(vx: f64, vy: f64, r: f64, steer: f64, p: &VehicleParams) -> (f64, f64) {
    let fyf = 2.0 * p.c_alpha_f * (steer - (vy + p.l_f * r) / vx);
    let fyr = 2.0 * p.c_alpha_r * (-(vy - p.l_r * r) / vx);
    (fyf, fyr)
}

/// Net longitudinal force before friction scaling.
fn longitudinal_force(vx: f64, cmd: &ActuationCommand, p: &VehicleParams) -> (f64, f64) {
    let drive = cmd.throttle * p.gear_force(cmd.gear);
    let brake = if vx > 0.0 { cmd.brake * p.max_brake_force } else { 0.0 };
    (drive, drive - brake - p.drag_coeff * vx * vx)
}

/// Advances the plant by `dt`.
pub fn step(
    state: &VehicleState,
    cmd: &ActuationCommand,
    params: &VehicleParams,
    dt: f64,
) -> Result<VehicleState, DynamicsError> {
    if !state.is_finite() {
        return Err(DynamicsError::NonFiniteState);
    }
    if !cmd.is_finite() {
        return Err(DynamicsError::NonFiniteCommand);
    }
    if !(dt > 0.0 && dt <= 0.02) {
        return Err(DynamicsError::InvalidStep(dt));
    }
    let cmd = cmd.sanitized(params);
    let p = params;
    let vx0 = state.x_dot;
    let (drive, fx) = longitudinal_force(vx0, &cmd, p);

    if vx0 < KINEMATIC_SPEED {
        return Ok(kinematic_step(state, &cmd, p, dt, drive, fx));
    }

    // friction circle on the start-of-step forces, held over the step
    let (fyf, fyr) = tire_forces(vx0, state.y_dot, state.psi_dot, cmd.steer, p);
    let a_lat = (fyf + fyr) / p.m;
    let a_long = fx / p.m;
    let total = a_lat.hypot(a_long);
    let (scale, traction_lost) = if total > p.mu_limit {
        (p.mu_limit / total, true)
    } else {
        (1.0, false)
    };

    let deriv = |vy: f64, r: f64, psi: f64| -> Deriv {
        let (fyf, fyr) = tire_forces(vx0, vy, r, cmd.steer, p);
        let (fyf, fyr) = (fyf * scale, fyr * scale);
        let (s, c) = psi.sin_cos();
        Deriv {
            x: vx0 * c - vy * s,
            y: vx0 * s + vy * c,
            psi: r,
            vx: fx * scale / p.m,
            vy: (fyf + fyr) / p.m - vx0 * r,
            r: (p.l_f * fyf - p.l_r * fyr) / p.i_z,
        }
    };
    let (vy, r, psi) = (state.y_dot, state.psi_dot, state.psi);
    let k1 = deriv(vy, r, psi);
    let k2 = deriv(vy + 0.5 * dt * k1.vy, r + 0.5 * dt * k1.r, psi + 0.5 * dt * k1.psi);
    let k3 = deriv(vy + 0.5 * dt * k2.vy, r + 0.5 * dt * k2.r, psi + 0.5 * dt * k2.psi);
    let k4 = deriv(vy + dt * k3.vy, r + dt * k3.r, psi + dt * k3.psi);
    let comb = |f: fn(&Deriv) -> f64| (f(&k1) + 2.0 * f(&k2) + 2.0 * f(&k3) + f(&k4)) * dt / 6.0;

    let mut next = *state;
    next.x += comb(|d| d.x);
    next.y += comb(|d| d.y);
    next.psi = wrap_angle(state.psi + comb(|d| d.psi));
    next.y_dot += comb(|d| d.vy);
    next.psi_dot += comb(|d| d.r);
    next.x_dot = (vx0 + comb(|d| d.vx)).max(0.0);
    next.gear = cmd.gear;
    next.traction_lost = traction_lost;
    next.a_long = a_long * scale;
    next.a_lat = a_lat * scale;
    next.wheel_speeds = wheel_speeds(&next, drive * scale, traction_lost && cmd.throttle > 0.0, p);
    Ok(next)
}

fn kinematic_step(
    state: &VehicleState,
    cmd: &ActuationCommand,
    p: &VehicleParams,
    dt: f64,
    drive: f64,
    fx: f64,
) -> VehicleState {
    let a = fx / p.m;
    let vx = (state.x_dot + a * dt).max(0.0);
    let v_mid = 0.5 * (state.x_dot + vx);
    let r = v_mid * cmd.steer.tan() / p.wheelbase();
    let psi_mid = state.psi + 0.5 * r * dt;
    let mut next = *state;
    next.x += v_mid * psi_mid.cos() * dt;
    next.y += v_mid * psi_mid.sin() * dt;
    next.psi = wrap_angle(state.psi + r * dt);
    next.x_dot = vx;
    next.y_dot = 0.0;
    next.psi_dot = vx * cmd.steer.tan() / p.wheelbase();
    next.gear = cmd.gear;
    next.traction_lost = false;
    next.a_long = if vx > 0.0 || a > 0.0 { a } else { 0.0 };
    next.a_lat = vx * next.psi_dot;
    next.wheel_speeds = wheel_speeds(&next, drive, false, p);
    next
}

/// Front wheels roll at body speed (plus yaw), rears add drive slip.
/// Rears spin up sharply once traction is lost under power.
fn wheel_speeds(s: &VehicleState, drive: f64, spinning: bool, p: &VehicleParams) -> [f64; 4] {
    let half = 0.5 * p.wheel_track * s.psi_dot;
    let base = [s.x_dot - half, s.x_dot + half];
    let slip = if spinning {
        0.3
    } else {
        (drive / p.slip_stiffness).min(0.1)
    };
    [
        base[0].max(0.0),
        base[1].max(0.0),
        (base[0] * (1.0 + slip)).max(0.0),
        (base[1] * (1.0 + slip)).max(0.0),
    ]
}

/// Spin-out signature: rear wheels more than 15% faster than the fronts while traction is lost.
pub fn detect_spinout(state: &VehicleState, _params: &VehicleParams) -> bool {
    let front = 0.5 * (state.wheel_speeds[0] + state.wheel_speeds[1]);
    let rear = 0.5 * (state.wheel_speeds[2] + state.wheel_speeds[3]);
    state.traction_lost && rear > 1.15 * front
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Vector2};

    #[test]
    fn rest_is_equilibrium() {
        let p = VehicleParams::default();
        let s = VehicleState::at_rest(1.0, 2.0, 0.3);
        let n = step(&s, &ActuationCommand::default(), &p, 0.01).unwrap();
        assert_eq!((n.x, n.y, n.psi, n.x_dot, n.y_dot, n.psi_dot), (s.x, s.y, s.psi, 0.0, 0.0, 0.0));
    }

    #[test]
    fn straight_coast_advances() {
        let p = VehicleParams {
            drag_coeff: 1e-12,
            ..VehicleParams::default()
        };
        let s = VehicleState::rolling(0.0, 0.0, 0.0, 30.0);
        let n = step(&s, &ActuationCommand::default(), &p, 0.01).unwrap();
        assert!((n.x - 0.3).abs() < 1e-9);
        assert_eq!(n.y, 0.0);
        assert_eq!(n.psi, 0.0);
    }

    #[test]
    fn steady_state_yaw_rate_matches_equilibrium() {
        let p = VehicleParams::default();
        let (v, delta) = (30.0, 0.02);
        let mut s = VehicleState::rolling(0.0, 0.0, 0.0, v);
        let cmd = ActuationCommand {
            steer: delta,
            ..Default::default()
        };
        for _ in 0..20_000 {
            s = step(&s, &cmd, &p, 0.001).unwrap();
            s.x_dot = v;
        }
        // oracle: solve the two lateral equilibrium equations directly
        let cf = 2.0 * p.c_alpha_f;
        let cr = 2.0 * p.c_alpha_r;
        let a = Matrix2::new(
            -(cf + cr) / (p.m * v),
            -v - (cf * p.l_f - cr * p.l_r) / (p.m * v),
            -(p.l_f * cf - p.l_r * cr) / (p.i_z * v),
            -(p.l_f * p.l_f * cf + p.l_r * p.l_r * cr) / (p.i_z * v),
        );
        let b = Vector2::new(cf / p.m, p.l_f * cf / p.i_z) * delta;
        let eq = a.lu().solve(&(-b)).unwrap();
        assert!((s.psi_dot - eq[1]).abs() < 1e-6, "{} vs {}", s.psi_dot, eq[1]);
        // closed form with the per-axle stiffness doubled
        let l = p.wheelbase();
        let k_us = p.m * (p.l_r * cr - p.l_f * cf) / (l * cf * cr);
        let closed = v * delta / (l + k_us * v * v);
        assert!((eq[1] - closed).abs() < 1e-9);
        assert!(!s.traction_lost);
    }

    #[test]
    fn friction_circle_saturates() {
        let p = VehicleParams::default();
        let mut s = VehicleState::rolling(0.0, 0.0, 0.0, 50.0);
        let cmd = ActuationCommand {
            steer: 0.2,
            throttle: 1.0,
            ..Default::default()
        };
        let mut lost = false;
        for _ in 0..500 {
            s = step(&s, &cmd, &p, 0.001).unwrap();
            assert!(s.a_lat.hypot(s.a_long) <= p.mu_limit + 1e-9);
            lost |= s.traction_lost;
        }
        assert!(lost);
        assert!(detect_spinout(&s, &p));
    }

    #[test]
    fn spinout_predicate() {
        let p = VehicleParams::default();
        let mut s = VehicleState::rolling(0.0, 0.0, 0.0, 40.0);
        assert!(!detect_spinout(&s, &p));
        s.wheel_speeds = [40.0, 40.0, 48.0, 48.0];
        assert!(!detect_spinout(&s, &p));
        s.traction_lost = true;
        assert!(detect_spinout(&s, &p));
    }

    #[test]
    fn pedals_are_exclusive_and_steer_clamped() {
        let p = VehicleParams::default();
        let c = ActuationCommand {
            steer: 2.0,
            throttle: 0.5,
            brake: 0.2,
            gear: 0,
        }
        .sanitized(&p);
        assert_eq!(c.throttle * c.brake, 0.0);
        assert_eq!(c.steer, p.max_steer);
        assert_eq!(c.gear, 1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = VehicleParams::default();
        let mut s = VehicleState::rolling(0.0, 0.0, 0.0, 10.0);
        assert_eq!(step(&s, &ActuationCommand::default(), &p, 0.05), Err(DynamicsError::InvalidStep(0.05)));
        s.x = f64::NAN;
        assert_eq!(step(&s, &ActuationCommand::default(), &p, 0.001), Err(DynamicsError::NonFiniteState));
    }

    #[test]
    fn braking_stops_without_reversing() {
        let p = VehicleParams::default();
        let mut s = VehicleState::rolling(0.0, 0.0, 0.0, 5.0);
        let cmd = ActuationCommand {
            brake: 1.0,
            ..Default::default()
        };
        for _ in 0..3000 {
            s = step(&s, &cmd, &p, 0.001).unwrap();
            assert!(s.x_dot >= 0.0);
        }
        assert_eq!(s.x_dot, 0.0);
    }
}
