//! Trajectory tracking: LQR steering on a lookahead point, P plus feed-forward
//! pedals, and gear selection.

pub mod care;
pub mod lateral;
pub mod longitudinal;

use serde::{Deserialize, Serialize};

pub use care::{solve_care, CareError, CareSolution};
pub use lateral::{
    default_brackets, error_dynamics, error_state, lookahead_distance, BracketSpec, ErrorState,
    GainBracket, GainSchedule, LateralError,
};
pub use longitudinal::{gear_select, longitudinal_control, smooth, GearTable, LongitudinalGains};

use crate::dynamics::{ActuationCommand, VehicleParams, VehicleState};
use crate::trajectory::PlannedTrajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub d_base: f64,
    pub k_vd: f64,
    pub k_p: f64,
    pub k_ff: f64,
    pub alpha_brake: f64,
    pub delta_throttle: f64,
    pub delta_brake: f64,
    pub brackets: Vec<BracketSpec>,
    pub gears: GearTable,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            d_base: 3.0,
            k_vd: 0.02,
            k_p: 0.3,
            k_ff: 0.008,
            alpha_brake: 0.5,
            delta_throttle: 0.05,
            delta_brake: 0.05,
            brackets: default_brackets(),
            gears: GearTable::default(),
        }
    }
}

impl ControllerConfig {
    pub fn longitudinal_gains(&self) -> LongitudinalGains {
        LongitudinalGains {
            k_p: self.k_p,
            k_ff: self.k_ff,
            alpha_brake: self.alpha_brake,
            delta_throttle: self.delta_throttle,
            delta_brake: self.delta_brake,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.d_base > 0.0) {
            return Err("d_base must be positive".into());
        }
        if !(self.delta_throttle > 0.0 && self.delta_brake > 0.0) {
            return Err("rate limits must be positive".into());
        }
        if !(self.k_vd >= 0.0 && self.k_p >= 0.0 && self.k_ff >= 0.0 && self.alpha_brake > 0.0) {
            return Err("gains must be non-negative".into());
        }
        if !self.gears.is_valid() {
            return Err("gear table must be increasing and positive".into());
        }
        Ok(())
    }
}

/// Everything the controller decided on one tick.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ControlOutput {
    pub command: ActuationCommand,
    pub error: ErrorState,
    /// Signed lateral offset of the car from the trajectory, left positive.
    pub cte: f64,
    pub bracket: usize,
    pub lookahead: f64,
    pub v_target: f64,
    /// Set when the tick had no usable trajectory and the last steer was held.
    pub degraded: bool,
}

/// Stateful tracking controller; memory is limited to pedal smoothing, gear and last steer.
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    schedule: GainSchedule,
    max_steer: f64,
    prev_throttle: f64,
    prev_brake: f64,
    prev_steer: f64,
    gear: u8,
}

impl Controller {
    pub fn new(cfg: ControllerConfig, params: &VehicleParams) -> Result<Self, LateralError> {
        cfg.validate().map_err(LateralError::BadBrackets)?;
        let schedule = GainSchedule::build(&cfg.brackets, params)?;
        Ok(Controller {
            cfg,
            schedule,
            max_steer: params.max_steer,
            prev_throttle: 0.0,
            prev_brake: 0.0,
            prev_steer: 0.0,
            gear: 1,
        })
    }

    pub fn schedule(&self) -> &GainSchedule {
        &self.schedule
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    /// Seeds pedal and gear memory, e.g. for a rolling start.
    pub fn prime(&mut self, throttle: f64, gear: u8) {
        self.prev_throttle = throttle;
        self.prev_brake = 0.0;
        self.gear = gear;
    }

    /// One control tick. `v_override` replaces the trajectory speed (controlled stop).
    pub fn tick(
        &mut self,
        state: &VehicleState,
        traj: Option<&PlannedTrajectory>,
        v_override: Option<f64>,
    ) -> ControlOutput {
        let gains = self.cfg.longitudinal_gains();
        let traj = traj.filter(|t| t.path.samples().len() >= 2);
        let Some(traj) = traj else {
            let v_target = v_override.unwrap_or(0.0);
            let (throttle, brake) =
                longitudinal_control(state.x_dot, v_target, &gains, self.prev_throttle, self.prev_brake);
            self.prev_throttle = throttle;
            self.prev_brake = brake;
            self.gear = gear_select(state.x_dot, &self.cfg.gears, self.gear);
            return ControlOutput {
                command: ActuationCommand {
                    steer: self.prev_steer,
                    throttle,
                    brake,
                    gear: self.gear,
                },
                v_target,
                degraded: true,
                ..Default::default()
            };
        };

        let proj = traj.path.closest_point(state.x, state.y);
        let d = lookahead_distance(self.cfg.d_base, self.cfg.k_vd, state.x_dot);
        let target = traj.path.lookahead_from(proj.s, d, state.x_dot);
        let error = error_state(state, &target);
        let (bracket, k) = self.schedule.gain_for(state.x_dot);
        let steer = if state.x_dot < lateral::MIN_LQR_SPEED {
            0.0
        } else {
            lateral::lqr_steer(k, &error, self.max_steer)
        };

        let v_target = v_override.unwrap_or_else(|| traj.speed_at(proj.s));
        let (throttle, brake) =
            longitudinal_control(state.x_dot, v_target, &gains, self.prev_throttle, self.prev_brake);
        self.prev_throttle = throttle;
        self.prev_brake = brake;
        self.prev_steer = steer;
        self.gear = gear_select(state.x_dot, &self.cfg.gears, self.gear);
        ControlOutput {
            command: ActuationCommand {
                steer,
                throttle,
                brake,
                gear: self.gear,
            },
            error,
            cte: proj.lateral,
            bracket,
            lookahead: d,
            v_target,
            degraded: false,
        }
    }
}
