//! Behaviour selection and trajectory generation.
//!
//! Each tick picks an action primitive from role, flag and opponent state, then
//! samples the matching lane (or a quintic lane-change blend) over a fixed
//! horizon and velocity-profiles it.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleState;
use crate::math::quintic_blend;
use crate::track::{LaneId, Raceline, Station, Track, TrackBounds, TrackError};
use crate::tracker::TrackedAgent;
use crate::trajectory::PlannedTrajectory;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("merge leaves the track at ({x:.2}, {y:.2})")]
    MergeOutOfBounds { x: f64, y: f64 },
    #[error("merge curvature {kappa:.4} exceeds cap {cap:.4}")]
    MergeTooSharp { kappa: f64, cap: f64 },
    #[error("merge duration must be positive, got {0}")]
    BadDuration(f64),
    #[error(transparent)]
    Track(#[from] TrackError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Attacker,
    Defender,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::Attacker => Role::Defender,
            Role::Defender => Role::Attacker,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    Green,
    WavingGreen,
    Yellow,
    Red,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Maintain,
    Trail,
    SafeMerge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeParams {
    /// Station on the origin lane where the blend starts.
    pub start_s: f64,
    pub duration_s: f64,
    /// Blend length along the origin lane, `v_ref * duration_s`.
    pub length: f64,
    pub origin: LaneId,
    pub target: LaneId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionPrimitive {
    pub kind: PrimitiveKind,
    pub target_lane: LaneId,
    pub target_speed: f64,
    pub gap_setpoint: Option<f64>,
    pub merge: Option<MergeParams>,
}

impl ActionPrimitive {
    pub fn maintain(lane: LaneId, speed: f64) -> Self {
        ActionPrimitive {
            kind: PrimitiveKind::Maintain,
            target_lane: lane,
            target_speed: speed.max(0.0),
            gap_setpoint: None,
            merge: None,
        }
    }

    pub fn trail(lane: LaneId, speed: f64, setpoint: f64) -> Self {
        ActionPrimitive {
            kind: PrimitiveKind::Trail,
            gap_setpoint: Some(setpoint),
            ..Self::maintain(lane, speed)
        }
    }

    pub fn safe_merge(params: MergeParams, speed: f64) -> Self {
        ActionPrimitive {
            kind: PrimitiveKind::SafeMerge,
            target_lane: params.target,
            target_speed: speed.max(0.0),
            gap_setpoint: None,
            merge: Some(params),
        }
    }

    pub fn is_merge_to(&self, lane: LaneId) -> bool {
        self.kind == PrimitiveKind::SafeMerge && self.target_lane == lane
    }

    pub fn is_well_formed(&self) -> bool {
        let speed_ok = self.target_speed >= 0.0 && self.target_speed.is_finite();
        let payload_ok = match self.kind {
            PrimitiveKind::SafeMerge => self.merge.is_some_and(|m| m.target == self.target_lane),
            PrimitiveKind::Trail => self.gap_setpoint.is_some(),
            PrimitiveKind::Maintain => true,
        };
        speed_ok && payload_ok
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaceContext {
    pub role: Role,
    pub flag: Flag,
    pub round_speed: f64,
    pub opponent: Option<TrackedAgent>,
    pub ego: VehicleState,
    /// Scripted lane change outside the race rules (test scenarios).
    pub lane_request: Option<LaneId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongLimits {
    pub accel: f64,
    pub decel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub gap_setpoint: f64,
    pub k_gap: f64,
    pub v_max: f64,
    /// Speed margin over the opponent while passing.
    pub pass_speed_delta: f64,
    pub pass_gap: f64,
    pub ahead_hysteresis: f64,
    pub merge_duration: f64,
    /// Lateral clearance required beyond the vehicle width.
    pub clearance_margin: f64,
    /// Longitudinal distance inside which two cars count as overlapping.
    pub overlap_length: f64,
    pub merge_kappa_cap: f64,
    pub a_lat_max: f64,
    pub long_limits: LongLimits,
    pub horizon: f64,
    pub spacing: f64,
    pub start_behind: f64,
    pub yellow_factor: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            gap_setpoint: 25.0,
            k_gap: 0.2,
            v_max: 63.0,
            pass_speed_delta: 6.0,
            pass_gap: 30.0,
            ahead_hysteresis: 2.0,
            merge_duration: 3.0,
            clearance_margin: 1.5,
            overlap_length: 6.0,
            merge_kappa_cap: 0.05,
            a_lat_max: 22.0,
            long_limits: LongLimits { accel: 6.0, decel: 8.0 },
            horizon: 300.0,
            spacing: 2.0,
            start_behind: 10.0,
            yellow_factor: 0.5,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.merge_duration > 0.0) {
            return Err("merge_duration must be positive".into());
        }
        if !(self.spacing > 0.0 && self.horizon > 4.0 * self.spacing) {
            return Err("horizon must span several samples".into());
        }
        if !(self.a_lat_max > 0.0 && self.long_limits.accel > 0.0 && self.long_limits.decel > 0.0) {
            return Err("acceleration limits must be positive".into());
        }
        if !(self.v_max > 0.0 && self.k_gap >= 0.0 && self.ahead_hysteresis >= 0.0) {
            return Err("v_max must be positive, k_gap and hysteresis non-negative".into());
        }
        Ok(())
    }
}

/// `v_opp + k_gap (gap - setpoint)` clamped to `[0, v_max]`. `gap` is how far the opponent is ahead.
pub fn trail_speed(v_opp: f64, gap: f64, setpoint: f64, k_gap: f64, v_max: f64) -> f64 {
    (v_opp + k_gap * (gap - setpoint)).clamp(0.0, v_max)
}

/// Signed along-track gap of the ego ahead of the opponent, in `(-L/2, L/2]`,
/// and the hysteretic ahead flag (kept when `|gap| <= hysteresis`).
pub fn pass_progress(
    ego: (f64, f64),
    opponent: (f64, f64),
    line: &Raceline,
    prev_ahead: bool,
    hysteresis: f64,
) -> (bool, f64) {
    let s_ego = line.closest_point(ego.0, ego.1).s;
    let s_opp = line.closest_point(opponent.0, opponent.1).s;
    let gap = line.station_delta(s_opp, s_ego);
    let ahead = if gap > hysteresis {
        true
    } else if gap < -hysteresis {
        false
    } else {
        prev_ahead
    };
    (ahead, gap)
}

pub fn pass_complete(ahead: bool, gap: f64, pass_gap: f64) -> bool {
    ahead && gap >= pass_gap
}

/// Pointwise lateral-acceleration cap, then forward and backward passes on `v^2`.
pub fn velocity_profile(
    traj: &PlannedTrajectory,
    v_cmd: f64,
    a_lat_max: f64,
    limits: LongLimits,
) -> PlannedTrajectory {
    let st = traj.path.samples();
    let mut v: Vec<f64> = st
        .iter()
        .map(|p| {
            let k = p.kappa.abs();
            let cap = if k > 0.0 { (a_lat_max / k).sqrt() } else { f64::INFINITY };
            v_cmd.max(0.0).min(cap)
        })
        .collect();
    for i in 1..v.len() {
        let ds = st[i].s - st[i - 1].s;
        v[i] = v[i].min((v[i - 1] * v[i - 1] + 2.0 * limits.accel * ds).sqrt());
    }
    for i in (0..v.len().saturating_sub(1)).rev() {
        let ds = st[i + 1].s - st[i].s;
        v[i] = v[i].min((v[i + 1] * v[i + 1] + 2.0 * limits.decel * ds).sqrt());
    }
    PlannedTrajectory::new(traj.path.clone(), v, traj.stamp)
}

/// Window of a lane sampled every `spacing` from station `s_from`.
pub fn lane_window(line: &Raceline, s_from: f64, length: f64, spacing: f64) -> Vec<Station> {
    let n = (length / spacing).round() as usize + 1;
    (0..n)
        .map(|i| line.pose_at(line.normalize_s(s_from + i as f64 * spacing)))
        .collect()
}

/// Horizon window over which a merge path is sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub s_from: f64,
    pub length: f64,
    pub spacing: f64,
}

/// Minimum-jerk lane change: the origin lane shifted along its normal by
/// `delta(s) * B(u)` with `u` the fraction of the merge length covered.
#[allow(clippy::too_many_arguments)]
pub fn safe_merge(
    origin: &Raceline,
    target: &Raceline,
    start_s: f64,
    duration_s: f64,
    v_ref: f64,
    window: Window,
    bounds: Option<&TrackBounds>,
    kappa_cap: f64,
    stamp: f64,
) -> Result<PlannedTrajectory, PlannerError> {
    if !(duration_s > 0.0) {
        return Err(PlannerError::BadDuration(duration_s));
    }
    let length = (v_ref * duration_s).max(1.0);
    let base = lane_window(origin, window.s_from, window.length, window.spacing);
    let mut hint = target.closest_point(base[0].x, base[0].y).s;
    let mut pts = Vec::with_capacity(base.len());
    let mut any_offset = false;
    for st in &base {
        let proj = target.closest_point_near(st.x, st.y, hint, 4.0 * window.spacing + 10.0);
        hint = proj.s;
        let delta = -proj.lateral;
        let u = (origin.station_delta(start_s, st.s) / length).clamp(0.0, 1.0);
        let off = delta * quintic_blend(u);
        if off.abs() > 1e-12 {
            any_offset = true;
        }
        let (nx, ny) = origin.normal_at(st.s);
        pts.push((st.x + nx * off, st.y + ny * off));
    }
    let path = if any_offset {
        Raceline::from_dense_points(LaneId::Merge, &pts, false)?
    } else {
        Raceline::open_from_stations(origin.lane(), &base)?
    };
    if let Some(b) = bounds {
        if let Some(&(x, y)) = pts.iter().find(|&&p| !b.contains(p)) {
            return Err(PlannerError::MergeOutOfBounds { x, y });
        }
    }
    if let Some(st) = path.samples().iter().find(|st| st.kappa.abs() > kappa_cap) {
        return Err(PlannerError::MergeTooSharp {
            kappa: st.kappa,
            cap: kappa_cap,
        });
    }
    let n = path.samples().len();
    Ok(PlannedTrajectory::new(path, vec![v_ref.max(0.0); n], stamp))
}

/// Smallest predicted lateral separation during a merge among instants where
/// the cars overlap longitudinally (`+inf` when they never do). Offsets are
/// lateral positions left of the reference line; stations advance at constant speed.
#[allow(clippy::too_many_arguments)]
pub fn merge_clearance(
    ego_s: f64,
    ego_v: f64,
    ego_from: f64,
    ego_to: f64,
    opp_s: f64,
    opp_v: f64,
    opp_lat: f64,
    duration: f64,
    overlap_length: f64,
    line_length: f64,
) -> f64 {
    let steps = 60;
    let mut min = f64::INFINITY;
    for k in 0..=steps {
        let tau = duration * k as f64 / steps as f64;
        let mut ds = (ego_s + ego_v * tau - opp_s - opp_v * tau).rem_euclid(line_length);
        if ds > line_length / 2.0 {
            ds -= line_length;
        }
        if ds.abs() < overlap_length {
            let lat = ego_from + (ego_to - ego_from) * quintic_blend(tau / duration);
            min = min.min((lat - opp_lat).abs());
        }
    }
    min
}

/// Facts the planner derives before choosing a primitive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Situation {
    /// Lane the car is on, or the origin lane while a merge is under way.
    pub lane: LaneId,
    pub merge_done: bool,
    /// Gap of the ego ahead of the opponent (negative when behind).
    pub gap: Option<f64>,
    pub ahead: bool,
    pub opponent_speed: Option<f64>,
    /// Whether a merge started now toward the other lane keeps the clearance.
    pub clearance_ok: bool,
    /// A merge to the outer lane was taken and the car has not returned since.
    pub passing: bool,
}

fn other_lane(lane: LaneId) -> LaneId {
    match lane {
        LaneId::Inner => LaneId::Outer,
        _ => LaneId::Inner,
    }
}

/// Primitive selection. Pure in its inputs; `start_s` and `v_ref` seed a new merge.
pub fn select_action(
    ctx: &RaceContext,
    prev: &ActionPrimitive,
    sit: &Situation,
    cfg: &PlannerConfig,
    start_s: f64,
) -> ActionPrimitive {
    let new_merge = |to: LaneId, speed: f64| {
        let v_ref = ctx.ego.x_dot.max(5.0);
        ActionPrimitive::safe_merge(
            MergeParams {
                start_s,
                duration_s: cfg.merge_duration,
                length: v_ref * cfg.merge_duration,
                origin: sit.lane,
                target: to,
            },
            speed,
        )
    };
    let merging = prev.kind == PrimitiveKind::SafeMerge && !sit.merge_done;
    let pass_speed = sit
        .opponent_speed
        .map(|v| (v + cfg.pass_speed_delta).min(cfg.v_max))
        .unwrap_or(ctx.round_speed);

    match ctx.flag {
        Flag::Red | Flag::Yellow => {
            let v = if ctx.flag == Flag::Red {
                0.0
            } else {
                ctx.round_speed * cfg.yellow_factor
            };
            if merging {
                return ActionPrimitive { target_speed: v, ..*prev };
            }
            return ActionPrimitive::maintain(sit.lane, v);
        }
        Flag::Green | Flag::WavingGreen => {}
    }

    if merging {
        let v = if prev.target_lane == LaneId::Outer {
            pass_speed
        } else {
            prev.target_speed
        };
        return ActionPrimitive { target_speed: v, ..*prev };
    }

    let passed = sit.gap.is_some_and(|g| pass_complete(sit.ahead, g, cfg.pass_gap));
    if sit.lane == LaneId::Outer {
        if sit.passing && passed {
            // close the door
            return new_merge(LaneId::Inner, ctx.round_speed.max(ctx.ego.x_dot.min(cfg.v_max)));
        }
        if sit.passing && ctx.role == Role::Attacker {
            return ActionPrimitive::maintain(LaneId::Outer, pass_speed);
        }
        if ctx.lane_request != Some(LaneId::Outer) && sit.clearance_ok {
            return new_merge(LaneId::Inner, ctx.round_speed);
        }
        return ActionPrimitive::maintain(LaneId::Outer, ctx.round_speed);
    }

    if let Some(req) = ctx.lane_request {
        if req != sit.lane && sit.clearance_ok {
            return new_merge(req, ctx.round_speed);
        }
    }

    match ctx.role {
        Role::Defender => ActionPrimitive::maintain(sit.lane, ctx.round_speed),
        Role::Attacker => {
            let (Some(gap), Some(v_opp)) = (sit.gap, sit.opponent_speed) else {
                return ActionPrimitive::maintain(sit.lane, ctx.round_speed);
            };
            if ctx.flag == Flag::WavingGreen && prev.kind == PrimitiveKind::Trail && sit.clearance_ok {
                return new_merge(other_lane(sit.lane), pass_speed);
            }
            let v = trail_speed(v_opp, -gap, cfg.gap_setpoint, cfg.k_gap, cfg.v_max);
            ActionPrimitive::trail(sit.lane, v, cfg.gap_setpoint)
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannerOutput {
    pub primitive: ActionPrimitive,
    pub trajectory: PlannedTrajectory,
    pub situation: Situation,
    pub diagnostic: Option<String>,
}

/// Stateful 20 Hz planner for one car.
#[derive(Debug, Clone)]
pub struct Planner {
    cfg: PlannerConfig,
    track: Arc<Track>,
    vehicle_width: f64,
    lane: LaneId,
    prev: ActionPrimitive,
    ahead: bool,
    passing: bool,
}

impl Planner {
    pub fn new(cfg: PlannerConfig, track: Arc<Track>, vehicle_width: f64, lane: LaneId) -> Result<Self, String> {
        cfg.validate()?;
        Ok(Planner {
            cfg,
            track,
            vehicle_width,
            lane,
            prev: ActionPrimitive::maintain(lane, 0.0),
            ahead: false,
            passing: false,
        })
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn lane(&self) -> LaneId {
        self.lane
    }

    pub fn previous(&self) -> &ActionPrimitive {
        &self.prev
    }

    fn situation(&self, ctx: &RaceContext) -> (Situation, f64) {
        let center = &self.track.centerline;
        let ego = &ctx.ego;
        let origin_lane = match self.prev.merge {
            Some(m) if self.prev.kind == PrimitiveKind::SafeMerge => m.origin,
            _ => self.lane,
        };
        let origin = self.track.lane(origin_lane);
        let ego_s_lane = origin.closest_point(ego.x, ego.y).s;
        let merge_done = match self.prev.merge {
            Some(m) if self.prev.kind == PrimitiveKind::SafeMerge => {
                origin.station_delta(m.start_s, ego_s_lane) >= m.length
            }
            _ => true,
        };
        let lane = if self.prev.kind == PrimitiveKind::SafeMerge && merge_done {
            self.prev.target_lane
        } else {
            origin_lane
        };

        let mut sit = Situation {
            lane,
            merge_done,
            gap: None,
            ahead: self.ahead,
            opponent_speed: None,
            clearance_ok: false,
            passing: self.passing,
        };
        let ego_c = center.closest_point(ego.x, ego.y);
        if let Some(opp) = &ctx.opponent {
            let (ox, oy) = opp.position();
            let (ahead, gap) = pass_progress(
                (ego.x, ego.y),
                (ox, oy),
                center,
                self.ahead,
                self.cfg.ahead_hysteresis,
            );
            let opp_c = center.closest_point(ox, oy);
            sit.gap = Some(gap);
            sit.ahead = ahead;
            sit.opponent_speed = Some(opp.speed());
            let lat_of = |id: LaneId| {
                let l = self.track.lane(id);
                let p = l.pose_at(l.closest_point(ego.x, ego.y).s);
                center.closest_point(p.x, p.y).lateral
            };
            let min = merge_clearance(
                ego_c.s,
                ego.x_dot,
                lat_of(lane),
                lat_of(other_lane(lane)),
                opp_c.s,
                opp.speed(),
                opp_c.lateral,
                self.cfg.merge_duration,
                self.cfg.overlap_length,
                center.total_length(),
            );
            sit.clearance_ok = min >= self.vehicle_width + self.cfg.clearance_margin;
        } else {
            sit.clearance_ok = true;
        }
        let start_s = if lane == origin_lane {
            ego_s_lane
        } else {
            self.track.lane(lane).closest_point(ego.x, ego.y).s
        };
        (sit, start_s)
    }

    /// One planning tick.
    pub fn tick(&mut self, ctx: &RaceContext, now: f64) -> PlannerOutput {
        let (sit, start_s) = self.situation(ctx);
        let mut diagnostic = None;
        if ctx.role == Role::Attacker && ctx.opponent.is_none() && matches!(ctx.flag, Flag::Green | Flag::WavingGreen)
        {
            diagnostic = Some("no confirmed opponent, holding round speed".to_string());
        }
        let mut prim = select_action(ctx, &self.prev, &sit, &self.cfg, start_s);
        let traj = match self.build(&prim, ctx, now) {
            Ok(t) => t,
            Err(e) => {
                diagnostic = Some(format!("merge rejected: {e}"));
                prim = ActionPrimitive::maintain(sit.lane, prim.target_speed);
                self.build(&prim, ctx, now).expect("lane window is always valid")
            }
        };
        self.ahead = sit.ahead;
        self.passing = prim.target_lane == LaneId::Outer && (prim.is_merge_to(LaneId::Outer) || self.passing);
        self.lane = if prim.kind == PrimitiveKind::SafeMerge {
            prim.merge.map_or(sit.lane, |m| m.origin)
        } else {
            prim.target_lane
        };
        self.prev = prim;
        PlannerOutput {
            primitive: prim,
            trajectory: traj,
            situation: sit,
            diagnostic,
        }
    }

    fn build(&self, prim: &ActionPrimitive, ctx: &RaceContext, now: f64) -> Result<PlannedTrajectory, PlannerError> {
        let cfg = &self.cfg;
        let raw = match (prim.kind, prim.merge) {
            (PrimitiveKind::SafeMerge, Some(m)) => {
                let origin = self.track.lane(m.origin);
                let target = self.track.lane(m.target);
                let s_ego = origin.closest_point(ctx.ego.x, ctx.ego.y).s;
                safe_merge(
                    origin,
                    target,
                    m.start_s,
                    m.duration_s,
                    m.length / m.duration_s,
                    Window {
                        s_from: s_ego - cfg.start_behind,
                        length: cfg.horizon,
                        spacing: cfg.spacing,
                    },
                    Some(&self.track.bounds),
                    cfg.merge_kappa_cap,
                    now,
                )?
            }
            _ => {
                let line = self.track.lane(prim.target_lane);
                let s_ego = line.closest_point(ctx.ego.x, ctx.ego.y).s;
                let st = lane_window(line, s_ego - cfg.start_behind, cfg.horizon, cfg.spacing);
                PlannedTrajectory::from_stations(prim.target_lane, &st, prim.target_speed, now)?
            }
        };
        Ok(velocity_profile(&raw, prim.target_speed, cfg.a_lat_max, cfg.long_limits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{quintic_blend_d1, quintic_blend_d2};
    use crate::track::TrackConfig;
    use crate::tracker::{Cov5, State5, TrackStatus};

    fn track() -> Arc<Track> {
        Arc::new(Track::from_config(&TrackConfig::default()).unwrap())
    }

    fn ego_at(line: &Raceline, s: f64, v: f64) -> VehicleState {
        let p = line.pose_at(line.normalize_s(s));
        VehicleState::rolling(p.x, p.y, p.psi, v)
    }

    fn opp_at(line: &Raceline, s: f64, v: f64) -> TrackedAgent {
        let p = line.pose_at(line.normalize_s(s));
        TrackedAgent {
            id: 7,
            state: State5::new(p.x, p.y, v * p.psi.cos(), v * p.psi.sin(), p.psi),
            covariance: Cov5::identity() * 0.01,
            status: TrackStatus::Confirmed,
            consecutive_hits: 10,
            last_update: 0.0,
            stamp: 0.0,
        }
    }

    #[test]
    fn trail_law_examples() {
        assert_eq!(trail_speed(40.0, 25.0, 25.0, 0.2, 70.0), 40.0);
        assert!((trail_speed(40.0, 45.0, 25.0, 0.2, 70.0) - 44.0).abs() < 1e-12);
        assert_eq!(trail_speed(5.0, -100.0, 25.0, 0.2, 70.0), 0.0);
        assert_eq!(trail_speed(69.0, 100.0, 25.0, 0.2, 70.0), 70.0);
    }

    #[test]
    fn pass_progress_examples() {
        let t = track();
        let c = &t.centerline;
        let o = c.pose_at(100.0);
        let at = |ds: f64| {
            let p = c.pose_at(100.0 + ds);
            (p.x, p.y)
        };
        let (ahead, gap) = pass_progress(at(31.0), (o.x, o.y), c, false, 2.0);
        assert!(ahead && (gap - 31.0).abs() < 1e-6);
        let (ahead, gap) = pass_progress(at(29.0), (o.x, o.y), c, false, 2.0);
        assert!(ahead && !pass_complete(ahead, gap, 30.0));
        assert!(pass_progress((o.x, o.y), (o.x, o.y), c, true, 2.0).0);
        assert!(!pass_progress((o.x, o.y), (o.x, o.y), c, false, 2.0).0);
        // wrap across the start line
        let end = c.pose_at(c.total_length() - 5.0);
        let start = c.pose_at(5.0);
        let (_, gap) = pass_progress((start.x, start.y), (end.x, end.y), c, false, 2.0);
        assert!((gap - 10.0).abs() < 1e-6);
    }

    #[test]
    fn velocity_profile_examples() {
        let st: Vec<Station> = (0..50)
            .map(|i| Station {
                s: i as f64,
                x: i as f64,
                y: 0.0,
                psi: 0.0,
                kappa: 0.0,
            })
            .collect();
        let traj = PlannedTrajectory::from_stations(LaneId::Inner, &st, 0.0, 0.0).unwrap();
        let lim = LongLimits { accel: 5.0, decel: 5.0 };
        let p = velocity_profile(&traj, 30.0, 20.0, lim);
        assert!(p.speeds.iter().all(|&v| v == 30.0));

        let t = track();
        let turn = lane_window(&t.centerline, 320.0, 100.0, 2.0);
        let traj = PlannedTrajectory::from_stations(LaneId::Center, &turn, 0.0, 0.0).unwrap();
        let p = velocity_profile(&traj, 80.0, 20.0, lim);
        assert!(p.satisfies_invariants(20.0));
        let cap = (20.0f64 * 190.0).sqrt();
        assert!((p.speeds[25] - cap).abs() < 0.05);

        let k = [0.0, 0.0, 0.01, 0.0, 0.0];
        let st: Vec<Station> = k
            .iter()
            .enumerate()
            .map(|(i, &kappa)| Station {
                s: 0.0,
                x: 10.0 * i as f64,
                y: 0.0,
                psi: 0.0,
                kappa,
            })
            .collect();
        let traj = PlannedTrajectory::from_stations(LaneId::Inner, &st, 0.0, 0.0).unwrap();
        let p = velocity_profile(&traj, 60.0, 20.0, lim);
        assert!((p.speeds[2] - 2000f64.sqrt()).abs() < 1e-9);
        for w in p.speeds.windows(2).zip(p.path.samples().windows(2)) {
            let (v, s) = w;
            let dv2 = (v[1] * v[1] - v[0] * v[0]) / (2.0 * (s[1].s - s[0].s));
            assert!(dv2.abs() <= 5.0 + 1e-9);
        }
    }

    #[test]
    fn quintic_boundary_derivatives_by_finite_differences() {
        let h = 1e-4;
        let fd1 = |u: f64| (quintic_blend(u + h) - quintic_blend(u - h)) / (2.0 * h);
        let fd2 = |u: f64| (quintic_blend(u + h) - 2.0 * quintic_blend(u) + quintic_blend(u - h)) / (h * h);
        for u in [0.0, 1.0] {
            assert!(fd1(u).abs() < 1e-6, "B'({u})");
            assert!(fd2(u).abs() < 1e-6 * 1e3, "B''({u})");
            assert!(quintic_blend_d1(u).abs() < 1e-12);
            assert!(quintic_blend_d2(u).abs() < 1e-12);
        }
        assert_eq!(quintic_blend(0.5), 0.5);
    }

    #[test]
    fn merge_identity_and_offset() {
        let t = track();
        let w = Window {
            s_from: 50.0,
            length: 300.0,
            spacing: 2.0,
        };
        let same = safe_merge(&t.inner_lane, &t.inner_lane, 60.0, 3.0, 50.0, w, None, 0.05, 0.0).unwrap();
        let base = lane_window(&t.inner_lane, 50.0, 300.0, 2.0);
        for (a, b) in same.path.samples().iter().zip(&base) {
            assert!((a.x - b.x).abs() < 1e-9 && (a.y - b.y).abs() < 1e-9);
        }
        let m = safe_merge(&t.inner_lane, &t.outer_lane, 60.0, 3.0, 50.0, w, Some(&t.bounds), 0.05, 0.0).unwrap();
        let pts = m.path.samples();
        let first = pts[0];
        assert!(t.inner_lane.closest_point(first.x, first.y).lateral.abs() < 1e-6);
        let last = pts[pts.len() - 1];
        assert!(t.outer_lane.closest_point(last.x, last.y).lateral.abs() < 1e-3);
        assert!(safe_merge(&t.inner_lane, &t.outer_lane, 60.0, 0.0, 50.0, w, None, 0.05, 0.0).is_err());
        assert!(matches!(
            safe_merge(&t.inner_lane, &t.outer_lane, 60.0, 0.05, 50.0, w, None, 0.05, 0.0),
            Err(PlannerError::MergeTooSharp { .. })
        ));
    }

    #[test]
    fn merge_out_of_bounds_rejected() {
        let t = track();
        let w = Window {
            s_from: 0.0,
            length: 100.0,
            spacing: 2.0,
        };
        // blending toward a lane far outside the track
        let pts = crate::track::offset_points(&t.centerline, -30.0);
        let far = Raceline::from_dense_points(LaneId::Outer, &pts, true).unwrap();
        let r = safe_merge(&t.inner_lane, &far, 10.0, 1.0, 30.0, w, Some(&t.bounds), 1.0, 0.0);
        assert!(matches!(r, Err(PlannerError::MergeOutOfBounds { .. })));
    }

    fn ctx(role: Role, flag: Flag, round: f64, ego: VehicleState, opp: Option<TrackedAgent>) -> RaceContext {
        RaceContext {
            role,
            flag,
            round_speed: round,
            opponent: opp,
            ego,
            lane_request: None,
        }
    }

    #[test]
    fn select_action_examples() {
        let t = track();
        let lane = &t.inner_lane;
        let mut p = Planner::new(PlannerConfig::default(), t.clone(), 1.9, LaneId::Inner).unwrap();
        let out = p.tick(&ctx(Role::Defender, Flag::Green, 35.8, ego_at(lane, 100.0, 35.8), None), 0.0);
        assert_eq!(out.primitive, ActionPrimitive::maintain(LaneId::Inner, 35.8));

        let mut p = Planner::new(PlannerConfig::default(), t.clone(), 1.9, LaneId::Inner).unwrap();
        let c = ctx(
            Role::Attacker,
            Flag::Green,
            35.8,
            ego_at(lane, 100.0, 35.8),
            Some(opp_at(lane, 180.0, 35.8)),
        );
        let out = p.tick(&c, 0.0);
        assert_eq!(out.primitive.kind, PrimitiveKind::Trail);
        assert!(out.primitive.target_speed > 35.8);

        let c = RaceContext {
            flag: Flag::WavingGreen,
            ..c
        };
        let out = p.tick(&c, 0.05);
        assert!(out.primitive.is_merge_to(LaneId::Outer));
        assert!(out.trajectory.satisfies_invariants(22.0));

        let c = RaceContext { flag: Flag::Red, ..c };
        let out = p.tick(&c, 0.1);
        assert!(out.primitive.is_merge_to(LaneId::Outer));
        assert_eq!(out.primitive.target_speed, 0.0);
    }

    #[test]
    fn long_pass_holds_outer_lane_until_clear() {
        let t = track();
        let (inner, outer) = (&t.inner_lane, &t.outer_lane);
        let mut p = Planner::new(PlannerConfig::default(), t.clone(), 1.9, LaneId::Inner).unwrap();
        let mut c = ctx(
            Role::Attacker,
            Flag::WavingGreen,
            55.0,
            ego_at(inner, 100.0, 55.0),
            Some(opp_at(inner, 125.0, 55.0)),
        );
        p.tick(&c, 0.0);
        c.flag = Flag::WavingGreen;
        assert!(p.tick(&c, 0.05).primitive.is_merge_to(LaneId::Outer));
        // alongside the defender, far enough round the lap that the merge start
        // station is more than half a lap behind
        let l = t.centerline.total_length();
        for (k, s) in [300.0, 700.0, 1000.0, 1100.0].into_iter().enumerate() {
            c.ego = ego_at(outer, s, 58.0);
            c.opponent = Some(opp_at(inner, s + 1.0, 55.0));
            let out = p.tick(&c, 1.0 + k as f64);
            assert_eq!(out.primitive.target_lane, LaneId::Outer, "s={s} of {l}");
            assert!(out.primitive.target_speed > 55.0);
            assert!(out.diagnostic.is_none());
        }
        c.ego = ego_at(outer, 1200.0, 58.0);
        c.opponent = Some(opp_at(inner, 1140.0, 55.0));
        p.tick(&c, 6.0);
        assert!(p.tick(&c, 6.05).primitive.is_merge_to(LaneId::Inner));
    }

    #[test]
    fn lane_request_merges_and_holds() {
        let t = track();
        let mut p = Planner::new(PlannerConfig::default(), t.clone(), 1.9, LaneId::Inner).unwrap();
        let mut c = ctx(Role::Defender, Flag::Green, 50.0, ego_at(&t.inner_lane, 0.0, 50.0), None);
        c.lane_request = Some(LaneId::Outer);
        assert!(p.tick(&c, 0.0).primitive.is_merge_to(LaneId::Outer));
        // after the blend length the car is on the outer lane and stays there
        c.ego = ego_at(&t.outer_lane, 200.0, 50.0);
        let out = p.tick(&c, 3.0);
        assert_eq!(out.primitive, ActionPrimitive::maintain(LaneId::Outer, 50.0));
        c.lane_request = None;
        assert!(p.tick(&c, 3.05).primitive.is_merge_to(LaneId::Inner));
    }

    #[test]
    fn no_opponent_degrades_to_maintain() {
        let t = track();
        let mut p = Planner::new(PlannerConfig::default(), t.clone(), 1.9, LaneId::Inner).unwrap();
        let out = p.tick(
            &ctx(Role::Attacker, Flag::Green, 40.0, ego_at(&t.inner_lane, 0.0, 40.0), None),
            0.0,
        );
        assert_eq!(out.primitive, ActionPrimitive::maintain(LaneId::Inner, 40.0));
        assert!(out.diagnostic.is_some());
    }

    #[test]
    fn clearance_gate_blocks_alongside_merge() {
        let l = 1000.0;
        // opponent alongside in the target lane
        let min = merge_clearance(0.0, 40.0, 3.75, -3.75, 1.0, 40.0, -3.75, 3.0, 6.0, l);
        assert!(min < 3.4);
        // opponent 25 m ahead at the same speed never overlaps
        let min = merge_clearance(0.0, 40.0, 3.75, -3.75, 25.0, 40.0, 3.75, 3.0, 6.0, l);
        assert!(min.is_infinite());
    }

    #[test]
    fn planner_tick_budget() {
        let t = track();
        let mut p = Planner::new(PlannerConfig::default(), t.clone(), 1.9, LaneId::Inner).unwrap();
        let c = ctx(
            Role::Attacker,
            Flag::WavingGreen,
            50.0,
            ego_at(&t.inner_lane, 400.0, 50.0),
            Some(opp_at(&t.inner_lane, 425.0, 50.0)),
        );
        p.tick(&RaceContext { flag: Flag::Green, ..c.clone() }, 0.0);
        let start = std::time::Instant::now();
        for k in 0..20 {
            p.tick(&c, 0.05 * k as f64);
        }
        let per_tick = start.elapsed().as_secs_f64() / 20.0;
        assert!(per_tick < 0.05, "planner tick took {per_tick:.4} s");
    }
}
