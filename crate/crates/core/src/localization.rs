//! Dual GNSS/IMU/wheel-speed localization: measurement simulation, gating,
//! a 6-state EKF with a rollback buffer for late measurements, and health
//! monitoring that latches a safe stop.
//!
//! EKF state is `(x, y, psi, u, v, r)` with `u, v` body-frame velocities.

use nalgebra::{SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::math::wrap_angle;

pub type Vec6 = SVector<f64, 6>;
pub type Mat6 = SMatrix<f64, 6, 6>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceId {
    UnitA,
    UnitB,
    /// Vehicle wheel-speed sensors; not part of either GNSS unit.
    Wheels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    Pose,
    Velocity,
    Heading,
    Imu,
    WheelSpeed,
}

impl MeasurementKind {
    pub const ALL: [MeasurementKind; 5] = [
        MeasurementKind::Pose,
        MeasurementKind::Velocity,
        MeasurementKind::Heading,
        MeasurementKind::Imu,
        MeasurementKind::WheelSpeed,
    ];

    pub fn arity(self) -> usize {
        match self {
            MeasurementKind::Pose => 3,
            MeasurementKind::Velocity => 4,
            MeasurementKind::Heading => 1,
            MeasurementKind::Imu => 4,
            MeasurementKind::WheelSpeed => 4,
        }
    }

    /// Nominal sample period in ms.
    pub fn period_ms(self) -> u64 {
        match self {
            MeasurementKind::Pose | MeasurementKind::Velocity => 50,
            MeasurementKind::Heading => 1000,
            MeasurementKind::Imu => 8,
            MeasurementKind::WheelSpeed => 10,
        }
    }

    pub fn period(self) -> f64 {
        self.period_ms() as f64 / 1000.0
    }
}

/// GNSS solution quality, ordered worst to best. IMU and wheel sources report
/// `RtkFixed` while valid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixStatus {
    NoSolution,
    Single,
    RtkFloat,
    RtkFixed,
}

/// Values by kind: Pose `(x, y, z)`, Velocity `(vx, vy, vz, course)` in the world
/// frame, Heading `(theta)`, Imu `(ax, ay, az, yaw_rate)` in the body frame,
/// WheelSpeed `(fl, fr, rl, rr)`. Unused slots are zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceMeasurement {
    pub source: SourceId,
    pub kind: MeasurementKind,
    pub timestamp: f64,
    pub values: [f64; 4],
    pub variance: [f64; 4],
    pub status: FixStatus,
}

impl SourceMeasurement {
    pub fn used(&self) -> (&[f64], &[f64]) {
        let n = self.kind.arity();
        (&self.values[..n], &self.variance[..n])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Status,
    Variance,
    Stale,
    NonFinite,
}

/// One value per measurement kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerKind<T> {
    pub pose: T,
    pub velocity: T,
    pub heading: T,
    pub imu: T,
    pub wheel_speed: T,
}

impl<T: Copy> PerKind<T> {
    pub fn get(&self, k: MeasurementKind) -> T {
        match k {
            MeasurementKind::Pose => self.pose,
            MeasurementKind::Velocity => self.velocity,
            MeasurementKind::Heading => self.heading,
            MeasurementKind::Imu => self.imu,
            MeasurementKind::WheelSpeed => self.wheel_speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    pub min_status: PerKind<FixStatus>,
    pub max_variance: PerKind<f64>,
    pub staleness: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            min_status: PerKind {
                pose: FixStatus::RtkFloat,
                velocity: FixStatus::Single,
                heading: FixStatus::RtkFloat,
                imu: FixStatus::Single,
                wheel_speed: FixStatus::Single,
            },
            max_variance: PerKind {
                pose: 1.0,
                velocity: 1.0,
                heading: 0.1,
                imu: 1.0,
                wheel_speed: 1.0,
            },
            staleness: 0.25,
        }
    }
}

/// Heuristic gate applied before a measurement may reach the filter.
pub fn gate_measurement(m: &SourceMeasurement, cfg: &GateConfig, now: f64) -> Result<(), RejectReason> {
    let (vals, vars) = m.used();
    if !m.timestamp.is_finite() || vals.iter().chain(vars).any(|v| !v.is_finite()) {
        return Err(RejectReason::NonFinite);
    }
    if m.status < cfg.min_status.get(m.kind) {
        return Err(RejectReason::Status);
    }
    if vars.iter().any(|&v| v > cfg.max_variance.get(m.kind) || v <= 0.0) {
        return Err(RejectReason::Variance);
    }
    if now - m.timestamp > cfg.staleness {
        return Err(RejectReason::Stale);
    }
    Ok(())
}

/// Continuous-time process noise densities per state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcessNoise {
    pub position: f64,
    pub heading: f64,
    pub velocity: f64,
    pub yaw_rate: f64,
}

impl Default for ProcessNoise {
    fn default() -> Self {
        ProcessNoise {
            position: 1e-4,
            heading: 1e-5,
            velocity: 0.5,
            yaw_rate: 1.0,
        }
    }
}

/// Filter state together with the IMU acceleration input held since the last IMU sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState {
    pub x: Vec6,
    pub p: Mat6,
    pub t: f64,
    pub accel: (f64, f64),
}

impl EkfState {
    pub fn new(x: Vec6, p: Mat6, t: f64) -> Self {
        EkfState {
            x,
            p,
            t,
            accel: (0.0, 0.0),
        }
    }

    pub fn from_vehicle(s: &VehicleState, p_diag: [f64; 6], t: f64) -> Self {
        let x = Vec6::new(s.x, s.y, s.psi, s.x_dot, s.y_dot, s.psi_dot);
        EkfState::new(x, Mat6::from_diagonal(&Vec6::from_row_slice(&p_diag)), t)
    }
}

const MAX_PREDICT_STEP: f64 = 0.01;

/// One Euler step of the motion model with IMU body accelerations as input.
pub fn ekf_predict(s: &EkfState, accel: (f64, f64), dt: f64, q: &ProcessNoise) -> EkfState {
    if !(dt > 0.0) {
        return *s;
    }
    let (x, y, psi, u, v, r) = (s.x[0], s.x[1], s.x[2], s.x[3], s.x[4], s.x[5]);
    let (sn, cs) = psi.sin_cos();
    let next = Vec6::new(
        x + (u * cs - v * sn) * dt,
        y + (u * sn + v * cs) * dt,
        wrap_angle(psi + r * dt),
        u + (accel.0 + r * v) * dt,
        v + (accel.1 - r * u) * dt,
        r,
    );
    let mut f = Mat6::identity();
    f[(0, 2)] = (-u * sn - v * cs) * dt;
    f[(0, 3)] = cs * dt;
    f[(0, 4)] = -sn * dt;
    f[(1, 2)] = (u * cs - v * sn) * dt;
    f[(1, 3)] = sn * dt;
    f[(1, 4)] = cs * dt;
    f[(2, 5)] = dt;
    f[(3, 4)] = r * dt;
    f[(3, 5)] = v * dt;
    f[(4, 3)] = -r * dt;
    f[(4, 5)] = -u * dt;
    let qd = Vec6::new(q.position, q.position, q.heading, q.velocity, q.velocity, q.yaw_rate) * dt;
    let p = f * s.p * f.transpose() + Mat6::from_diagonal(&qd);
    EkfState {
        x: next,
        p: (p + p.transpose()) * 0.5,
        t: s.t + dt,
        accel: s.accel,
    }
}

/// Propagates to `t` in steps of at most 10 ms using the held IMU input.
pub fn predict_to(s: &EkfState, t: f64, q: &ProcessNoise) -> EkfState {
    let mut out = *s;
    while t - out.t > 1e-12 {
        let dt = (t - out.t).min(MAX_PREDICT_STEP);
        out = ekf_predict(&out, out.accel, dt, q);
    }
    out.t = out.t.max(t);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InnovationRejected {
    pub mahalanobis: f64,
}

fn kalman<const M: usize>(
    s: &EkfState,
    h: SMatrix<f64, M, 6>,
    nu: SVector<f64, M>,
    r: SMatrix<f64, M, M>,
    gate: f64,
) -> Result<EkfState, InnovationRejected> {
    let sm = h * s.p * h.transpose() + r;
    let Some(s_inv) = sm.try_inverse() else {
        return Err(InnovationRejected {
            mahalanobis: f64::INFINITY,
        });
    };
    let d = (nu.transpose() * s_inv * nu)[(0, 0)].max(0.0).sqrt();
    if d > gate {
        return Err(InnovationRejected { mahalanobis: d });
    }
    let k = s.p * h.transpose() * s_inv;
    let mut x = s.x + k * nu;
    x[2] = wrap_angle(x[2]);
    let i_kh = Mat6::identity() - k * h;
    let p = i_kh * s.p * i_kh.transpose() + k * r * k.transpose();
    Ok(EkfState {
        x,
        p: (p + p.transpose()) * 0.5,
        ..*s
    })
}

/// Kind-specific EKF update at the state's current time. For `Imu` only the gyro is
/// an observation; the accelerations become the new held input.
pub fn ekf_update(s: &EkfState, m: &SourceMeasurement, gate: f64) -> Result<EkfState, InnovationRejected> {
    let x = &s.x;
    let (sn, cs) = x[2].sin_cos();
    let (u, v) = (x[3], x[4]);
    let val = &m.values;
    let var = &m.variance;
    match m.kind {
        MeasurementKind::Pose => {
            let mut h = SMatrix::<f64, 2, 6>::zeros();
            h[(0, 0)] = 1.0;
            h[(1, 1)] = 1.0;
            let nu = SVector::<f64, 2>::new(val[0] - x[0], val[1] - x[1]);
            kalman(s, h, nu, SMatrix::<f64, 2, 2>::new(var[0], 0.0, 0.0, var[1]), gate)
        }
        MeasurementKind::Velocity => {
            let pred = (u * cs - v * sn, u * sn + v * cs);
            let mut h = SMatrix::<f64, 2, 6>::zeros();
            h[(0, 2)] = -u * sn - v * cs;
            h[(0, 3)] = cs;
            h[(0, 4)] = -sn;
            h[(1, 2)] = u * cs - v * sn;
            h[(1, 3)] = sn;
            h[(1, 4)] = cs;
            let nu = SVector::<f64, 2>::new(val[0] - pred.0, val[1] - pred.1);
            kalman(s, h, nu, SMatrix::<f64, 2, 2>::new(var[0], 0.0, 0.0, var[1]), gate)
        }
        MeasurementKind::Heading => {
            let mut h = SMatrix::<f64, 1, 6>::zeros();
            h[(0, 2)] = 1.0;
            let nu = SVector::<f64, 1>::new(wrap_angle(val[0] - x[2]));
            kalman(s, h, nu, SMatrix::<f64, 1, 1>::new(var[0]), gate)
        }
        MeasurementKind::Imu => {
            let mut h = SMatrix::<f64, 1, 6>::zeros();
            h[(0, 5)] = 1.0;
            let nu = SVector::<f64, 1>::new(val[3] - x[5]);
            let mut out = kalman(s, h, nu, SMatrix::<f64, 1, 1>::new(var[3]), gate)?;
            out.accel = (val[0], val[1]);
            Ok(out)
        }
        MeasurementKind::WheelSpeed => {
            let mut h = SMatrix::<f64, 1, 6>::zeros();
            h[(0, 3)] = 1.0;
            // fronts only: the driven rears carry slip
            let mean = 0.5 * (val[0] + val[1]);
            let r = 0.25 * (var[0] + var[1]);
            let nu = SVector::<f64, 1>::new(mean - u);
            kalman(s, h, nu, SMatrix::<f64, 1, 1>::new(r), gate)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusedOdometry {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub x_dot: f64,
    pub y_dot: f64,
    pub psi_dot: f64,
    pub covariance: Mat6,
    pub stamp: f64,
}

impl FusedOdometry {
    pub fn from_state(s: &EkfState) -> Self {
        FusedOdometry {
            x: s.x[0],
            y: s.x[1],
            psi: s.x[2],
            x_dot: s.x[3],
            y_dot: s.x[4],
            psi_dot: s.x[5],
            covariance: s.p,
            stamp: s.t,
        }
    }

    pub fn position_variance(&self) -> f64 {
        self.covariance[(0, 0)] + self.covariance[(1, 1)]
    }

    pub fn covariance_is_spd(&self) -> bool {
        self.covariance.cholesky().is_some()
    }

    /// Vehicle state as seen by the controller; unobserved fields come from `truth_aux`.
    pub fn to_vehicle_state(&self, truth_aux: &VehicleState) -> VehicleState {
        VehicleState {
            x: self.x,
            y: self.y,
            psi: self.psi,
            x_dot: self.x_dot,
            y_dot: self.y_dot,
            psi_dot: self.psi_dot,
            ..*truth_aux
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationConfig {
    pub gate: GateConfig,
    pub innovation_gate: f64,
    pub rollback_window: f64,
    pub process_noise: ProcessNoise,
    pub initial_variance: [f64; 6],
    /// Position variance trace above which a safe stop latches.
    pub covariance_threshold: f64,
    /// Watchdog window as a multiple of each source's nominal period.
    pub watchdog_factor: f64,
    /// How long pose/heading/velocity coverage may be missing before a safe stop.
    pub coverage_grace: f64,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            gate: GateConfig::default(),
            innovation_gate: 8.0,
            rollback_window: 0.2,
            process_noise: ProcessNoise::default(),
            initial_variance: [0.05, 0.05, 0.01, 0.1, 0.1, 0.01],
            covariance_threshold: 4.0,
            watchdog_factor: 3.0,
            coverage_grace: 0.15,
        }
    }
}

/// Health of one GNSS unit's pose/velocity/heading channels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitHealth {
    pub status: FixStatus,
    pub pose_ok: bool,
    pub velocity_ok: bool,
    pub heading_ok: bool,
    pub watchdog_tripped: bool,
}

impl UnitHealth {
    pub fn healthy(&self) -> bool {
        self.pose_ok && self.velocity_ok && self.heading_ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthFlags {
    pub unit_a: UnitHealth,
    pub unit_b: UnitHealth,
    pub wheels_ok: bool,
    pub covariance_alarm: bool,
    pub safe_stop_required: bool,
}

#[derive(Debug, Clone, Copy)]
struct Channel {
    last_rx: f64,
    last_ok: bool,
    status: FixStatus,
}

/// Watchdog and acceptance memory per `(source, kind)`; produces [`HealthFlags`].
#[derive(Debug, Clone)]
pub struct HealthMonitor {
    channels: std::collections::BTreeMap<(SourceId, MeasurementKind), Channel>,
    watchdog_factor: f64,
    coverage_grace: f64,
    covariance_threshold: f64,
    uncovered_since: Option<f64>,
    latched: bool,
    flags: HealthFlags,
}

impl HealthMonitor {
    pub fn new(cfg: &LocalizationConfig, t0: f64) -> Self {
        let mut channels = std::collections::BTreeMap::new();
        for src in [SourceId::UnitA, SourceId::UnitB] {
            for k in [
                MeasurementKind::Pose,
                MeasurementKind::Velocity,
                MeasurementKind::Heading,
                MeasurementKind::Imu,
            ] {
                channels.insert(
                    (src, k),
                    Channel {
                        last_rx: t0,
                        last_ok: true,
                        status: FixStatus::RtkFixed,
                    },
                );
            }
        }
        channels.insert(
            (SourceId::Wheels, MeasurementKind::WheelSpeed),
            Channel {
                last_rx: t0,
                last_ok: true,
                status: FixStatus::RtkFixed,
            },
        );
        let unit = UnitHealth {
            status: FixStatus::RtkFixed,
            pose_ok: true,
            velocity_ok: true,
            heading_ok: true,
            watchdog_tripped: false,
        };
        HealthMonitor {
            channels,
            watchdog_factor: cfg.watchdog_factor,
            coverage_grace: cfg.coverage_grace,
            covariance_threshold: cfg.covariance_threshold,
            uncovered_since: None,
            latched: false,
            flags: HealthFlags {
                unit_a: unit,
                unit_b: unit,
                wheels_ok: true,
                covariance_alarm: false,
                safe_stop_required: false,
            },
        }
    }

    pub fn record(&mut self, m: &SourceMeasurement, accepted: bool) {
        let ch = self.channels.entry((m.source, m.kind)).or_insert(Channel {
            last_rx: m.timestamp,
            last_ok: accepted,
            status: m.status,
        });
        if m.timestamp >= ch.last_rx {
            ch.last_rx = m.timestamp;
            ch.last_ok = accepted;
            ch.status = m.status;
        }
    }

    fn channel_ok(&self, src: SourceId, k: MeasurementKind, now: f64) -> (bool, bool) {
        match self.channels.get(&(src, k)) {
            Some(ch) => {
                let alive = now - ch.last_rx <= self.watchdog_factor * k.period() + 1e-9;
                (alive && ch.last_ok, !alive)
            }
            None => (false, true),
        }
    }

    fn unit(&self, src: SourceId, now: f64) -> UnitHealth {
        let (pose_ok, w1) = self.channel_ok(src, MeasurementKind::Pose, now);
        let (velocity_ok, w2) = self.channel_ok(src, MeasurementKind::Velocity, now);
        let (heading_ok, w3) = self.channel_ok(src, MeasurementKind::Heading, now);
        let status = self
            .channels
            .get(&(src, MeasurementKind::Pose))
            .map_or(FixStatus::NoSolution, |c| c.status);
        UnitHealth {
            status,
            pose_ok,
            velocity_ok,
            heading_ok,
            watchdog_tripped: w1 || w2 || w3,
        }
    }

    /// Re-evaluates flags at `now`. `safe_stop_required` latches until [`HealthMonitor::reset`].
    pub fn evaluate(&mut self, now: f64, position_variance: f64) -> HealthFlags {
        let a = self.unit(SourceId::UnitA, now);
        let b = self.unit(SourceId::UnitB, now);
        let (wheels_ok, _) = self.channel_ok(SourceId::Wheels, MeasurementKind::WheelSpeed, now);
        let covered = (a.pose_ok || b.pose_ok) && (a.velocity_ok || b.velocity_ok) && (a.heading_ok || b.heading_ok);
        if covered {
            self.uncovered_since = None;
        } else {
            let since = *self.uncovered_since.get_or_insert(now);
            if now - since >= self.coverage_grace {
                self.latched = true;
            }
        }
        let covariance_alarm = !(position_variance <= self.covariance_threshold);
        if covariance_alarm {
            self.latched = true;
        }
        self.flags = HealthFlags {
            unit_a: a,
            unit_b: b,
            wheels_ok,
            covariance_alarm,
            safe_stop_required: self.latched,
        };
        self.flags
    }

    pub fn flags(&self) -> HealthFlags {
        self.flags
    }

    /// Operator reset of the safe-stop latch.
    pub fn reset(&mut self) {
        self.latched = false;
        self.uncovered_since = None;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LocalizationStats {
    pub accepted: u64,
    pub rejected_status: u64,
    pub rejected_variance: u64,
    pub rejected_stale: u64,
    pub rejected_non_finite: u64,
    pub late_dropped: u64,
    pub innovation_dropped: u64,
    pub replays: u64,
}

type Keyed = ((f64, SourceId, MeasurementKind, u64), SourceMeasurement);

/// Fusion front end: gate, rollback buffer and the EKF chain behind it.
#[derive(Debug, Clone)]
pub struct Localizer {
    cfg: LocalizationConfig,
    checkpoint: EkfState,
    /// Measurements stamped before this are outside the rollback window.
    folded_until: f64,
    history: Vec<Keyed>,
    head: EkfState,
    applied: usize,
    dirty: bool,
    seq: u64,
    health: HealthMonitor,
    stats: LocalizationStats,
}

fn key_cmp(a: &(f64, SourceId, MeasurementKind, u64), b: &(f64, SourceId, MeasurementKind, u64)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3))
}

impl Localizer {
    pub fn new(cfg: LocalizationConfig, initial: EkfState) -> Self {
        let health = HealthMonitor::new(&cfg, initial.t);
        Localizer {
            cfg,
            checkpoint: initial,
            folded_until: initial.t,
            history: Vec::new(),
            head: initial,
            applied: 0,
            dirty: false,
            seq: 0,
            health,
            stats: LocalizationStats::default(),
        }
    }

    pub fn config(&self) -> &LocalizationConfig {
        &self.cfg
    }

    pub fn stats(&self) -> LocalizationStats {
        self.stats
    }

    pub fn health(&self) -> HealthFlags {
        self.health.flags()
    }

    pub fn reset_safe_stop(&mut self) {
        self.health.reset();
    }

    /// Gates `m` at time `now` and buffers it if accepted.
    pub fn ingest(&mut self, m: SourceMeasurement, now: f64) -> Result<(), RejectReason> {
        let verdict = gate_measurement(&m, &self.cfg.gate, now);
        self.health.record(&m, verdict.is_ok());
        if let Err(reason) = verdict {
            match reason {
                RejectReason::Status => self.stats.rejected_status += 1,
                RejectReason::Variance => self.stats.rejected_variance += 1,
                RejectReason::Stale => self.stats.rejected_stale += 1,
                RejectReason::NonFinite => self.stats.rejected_non_finite += 1,
            }
            return Err(reason);
        }
        if m.timestamp < self.folded_until {
            self.stats.late_dropped += 1;
            return Ok(());
        }
        self.stats.accepted += 1;
        self.seq += 1;
        let key = (m.timestamp, m.source, m.kind, self.seq);
        let pos = self.history.partition_point(|(k, _)| key_cmp(k, &key).is_lt());
        if pos < self.applied {
            self.dirty = true;
        }
        self.history.insert(pos, (key, m));
        Ok(())
    }

    fn apply(cfg: &LocalizationConfig, s: &EkfState, m: &SourceMeasurement) -> (EkfState, bool) {
        let pred = predict_to(s, m.timestamp, &cfg.process_noise);
        match ekf_update(&pred, m, cfg.innovation_gate) {
            Ok(u) => (u, true),
            Err(_) => (pred, false),
        }
    }

    /// Brings the filter up to date and returns odometry predicted to `now`.
    pub fn emit(&mut self, now: f64) -> FusedOdometry {
        if self.dirty {
            self.stats.replays += 1;
            self.head = self.checkpoint;
            self.applied = 0;
            self.dirty = false;
        }
        while self.applied < self.history.len() {
            let (next, _) = Self::apply(&self.cfg, &self.head, &self.history[self.applied].1);
            self.head = next;
            self.applied += 1;
        }
        // fold measurements older than the rollback window into the checkpoint
        let horizon = now - self.cfg.rollback_window;
        self.folded_until = self.folded_until.max(horizon);
        let n_old = self.history.partition_point(|(k, _)| k.0 <= horizon);
        if n_old > 0 {
            for (_, m) in self.history.drain(..n_old) {
                let (next, ok) = Self::apply(&self.cfg, &self.checkpoint, &m);
                if !ok {
                    self.stats.innovation_dropped += 1;
                }
                self.checkpoint = next;
            }
            self.applied -= n_old;
        }
        let out = FusedOdometry::from_state(&predict_to(&self.head, now, &self.cfg.process_noise));
        self.health.evaluate(now, out.position_variance());
        out
    }
}

/// How a degradation window alters a unit's output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "effect", rename_all = "snake_case")]
pub enum DegradationEffect {
    /// Multiplies both the noise variance and the reported variance.
    VarianceScale { factor: f64 },
    Status { status: FixStatus },
    Silence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDegradation")]
pub struct Degradation {
    pub unit: SourceId,
    pub start: f64,
    pub end: f64,
    #[serde(default)]
    pub kinds: Option<[bool; 5]>,
    #[serde(flatten)]
    pub effect: DegradationEffect,
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum EffectKind {
    VarianceScale,
    Status,
    Silence,
}

// serde cannot combine `flatten` with `deny_unknown_fields`, so the table is read flat.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDegradation {
    unit: SourceId,
    start: f64,
    end: f64,
    #[serde(default)]
    kinds: Option<[bool; 5]>,
    effect: EffectKind,
    factor: Option<f64>,
    status: Option<FixStatus>,
}

impl TryFrom<RawDegradation> for Degradation {
    type Error = String;

    fn try_from(r: RawDegradation) -> Result<Self, String> {
        let effect = match (r.effect, r.factor, r.status) {
            (EffectKind::VarianceScale, Some(factor), None) => DegradationEffect::VarianceScale { factor },
            (EffectKind::Status, None, Some(status)) => DegradationEffect::Status { status },
            (EffectKind::Silence, None, None) => DegradationEffect::Silence,
            (EffectKind::VarianceScale, ..) => return Err("variance_scale takes exactly `factor`".into()),
            (EffectKind::Status, ..) => return Err("status takes exactly `status`".into()),
            (EffectKind::Silence, ..) => return Err("silence takes no parameters".into()),
        };
        Ok(Degradation {
            unit: r.unit,
            start: r.start,
            end: r.end,
            kinds: r.kinds,
            effect,
        })
    }
}

impl Degradation {
    fn applies(&self, unit: SourceId, kind: MeasurementKind, t: f64) -> bool {
        let k_ok = self.kinds.is_none_or(|mask| mask[kind as usize]);
        self.unit == unit && k_ok && t >= self.start && t < self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorNoise {
    pub pose_sigma: f64,
    pub velocity_sigma: f64,
    pub heading_sigma: f64,
    pub accel_sigma: f64,
    pub gyro_sigma: f64,
    pub wheel_sigma: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        SensorNoise {
            pose_sigma: 0.02,
            velocity_sigma: 0.03,
            heading_sigma: 0.005,
            accel_sigma: 0.05,
            gyro_sigma: 0.002,
            wheel_sigma: 0.1,
        }
    }
}

impl SensorNoise {
    pub fn zero() -> Self {
        SensorNoise {
            pose_sigma: 0.0,
            velocity_sigma: 0.0,
            heading_sigma: 0.0,
            accel_sigma: 0.0,
            gyro_sigma: 0.0,
            wheel_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnssSimConfig {
    pub noise: SensorNoise,
    /// Delivery delay of GNSS pose, velocity and heading.
    pub gnss_latency: f64,
    /// Variance floor reported when the true noise is zero.
    pub min_reported_variance: f64,
    pub degradations: Vec<Degradation>,
}

impl Default for GnssSimConfig {
    fn default() -> Self {
        GnssSimConfig {
            noise: SensorNoise::default(),
            gnss_latency: 0.02,
            min_reported_variance: 1e-6,
            degradations: Vec::new(),
        }
    }
}

/// Emits the two GNSS units' pose/velocity/heading/IMU streams and the wheel
/// speeds at their nominal rates. Each source has its own RNG stream so that
/// silencing one leaves the others bit-identical.
#[derive(Debug, Clone)]
pub struct GnssSimulator {
    cfg: GnssSimConfig,
    rngs: [ChaCha8Rng; 3],
    queue: Vec<(u64, u64, SourceMeasurement)>,
    seq: u64,
}

impl GnssSimulator {
    pub fn new(cfg: GnssSimConfig, seed: u64) -> Self {
        let rngs = [0u64, 1, 2].map(|k| ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(k + 0x9e37)));
        GnssSimulator {
            cfg,
            rngs,
            queue: Vec::new(),
            seq: 0,
        }
    }

    pub fn config(&self) -> &GnssSimConfig {
        &self.cfg
    }

    fn effect(&self, unit: SourceId, kind: MeasurementKind, t: f64) -> (f64, Option<FixStatus>, bool) {
        let mut scale = 1.0;
        let mut status = None;
        let mut silent = false;
        for d in self.cfg.degradations.iter().filter(|d| d.applies(unit, kind, t)) {
            match d.effect {
                DegradationEffect::VarianceScale { factor } => scale *= factor,
                DegradationEffect::Status { status: s } => status = Some(s),
                DegradationEffect::Silence => silent = true,
            }
        }
        (scale, status, silent)
    }

    fn sample(&mut self, src: SourceId, kind: MeasurementKind, t: f64, truth: &VehicleState) -> Option<SourceMeasurement> {
        let (scale, status, silent) = self.effect(src, kind, t);
        if silent {
            return None;
        }
        let n = &self.cfg.noise;
        let sigma = match kind {
            MeasurementKind::Pose => [n.pose_sigma, n.pose_sigma, n.pose_sigma, 0.0],
            MeasurementKind::Velocity => [n.velocity_sigma, n.velocity_sigma, n.velocity_sigma, 0.0],
            MeasurementKind::Heading => [n.heading_sigma, 0.0, 0.0, 0.0],
            MeasurementKind::Imu => [n.accel_sigma, n.accel_sigma, n.accel_sigma, n.gyro_sigma],
            MeasurementKind::WheelSpeed => [n.wheel_sigma; 4],
        };
        let (vx, vy) = truth.world_velocity();
        let clean = match kind {
            MeasurementKind::Pose => [truth.x, truth.y, 0.0, 0.0],
            MeasurementKind::Velocity => [vx, vy, 0.0, vy.atan2(vx)],
            MeasurementKind::Heading => [truth.psi, 0.0, 0.0, 0.0],
            // body-frame specific force; the plant's longitudinal rate has no r*v term
            MeasurementKind::Imu => [truth.a_long - truth.psi_dot * truth.y_dot, truth.a_lat, 0.0, truth.psi_dot],
            MeasurementKind::WheelSpeed => truth.wheel_speeds,
        };
        let rng = &mut self.rngs[src as usize];
        let arity = kind.arity();
        let mut values = [0.0; 4];
        let mut variance = [0.0; 4];
        for i in 0..arity {
            let sd = sigma[i] * scale.sqrt();
            let noise = if sd > 0.0 {
                Normal::new(0.0, sd).expect("finite sigma").sample(rng)
            } else {
                0.0
            };
            values[i] = clean[i] + noise;
            variance[i] = (sd * sd).max(self.cfg.min_reported_variance);
        }
        if kind == MeasurementKind::Velocity {
            // course from the noisy velocity
            values[3] = values[1].atan2(values[0]);
            variance[3] = variance[0] / vx.hypot(vy).max(1.0).powi(2);
        }
        if kind == MeasurementKind::Heading {
            values[0] = wrap_angle(values[0]);
        }
        Some(SourceMeasurement {
            source: src,
            kind,
            timestamp: t,
            values,
            variance,
            status: status.unwrap_or(FixStatus::RtkFixed),
        })
    }

    /// Samples every source due at `now_ms` from `truth` and returns the
    /// measurements whose delivery time has arrived, oldest first.
    pub fn poll(&mut self, now_ms: u64, truth: &VehicleState) -> Vec<SourceMeasurement> {
        let t = now_ms as f64 / 1000.0;
        let latency_ms = (self.cfg.gnss_latency * 1000.0).round().max(0.0) as u64;
        for src in [SourceId::UnitA, SourceId::UnitB] {
            for kind in [
                MeasurementKind::Pose,
                MeasurementKind::Velocity,
                MeasurementKind::Heading,
                MeasurementKind::Imu,
            ] {
                if now_ms.is_multiple_of(kind.period_ms()) {
                    if let Some(m) = self.sample(src, kind, t, truth) {
                        let delay = if kind == MeasurementKind::Imu { 0 } else { latency_ms };
                        self.seq += 1;
                        self.queue.push((now_ms + delay, self.seq, m));
                    }
                }
            }
        }
        if now_ms.is_multiple_of(MeasurementKind::WheelSpeed.period_ms()) {
            if let Some(m) = self.sample(SourceId::Wheels, MeasurementKind::WheelSpeed, t, truth) {
                self.seq += 1;
                self.queue.push((now_ms, self.seq, m));
            }
        }
        let mut out: Vec<(u64, u64, SourceMeasurement)> = Vec::new();
        self.queue.retain(|e| {
            if e.0 <= now_ms {
                out.push(*e);
                false
            } else {
                true
            }
        });
        out.sort_by_key(|e| (e.0, e.1));
        out.into_iter().map(|e| e.2).collect()
    }
}

/// Fixed-point form of the simulator call for a single instant.
pub fn simulate_gnss(sim: &mut GnssSimulator, truth: &VehicleState, now_ms: u64) -> Vec<SourceMeasurement> {
    sim.poll(now_ms, truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meas(kind: MeasurementKind, t: f64, values: [f64; 4], var: f64) -> SourceMeasurement {
        SourceMeasurement {
            source: SourceId::UnitA,
            kind,
            timestamp: t,
            values,
            variance: [var; 4],
            status: FixStatus::RtkFixed,
        }
    }

    #[test]
    fn degradation_tables_parse_flat() {
        let d: Degradation = toml::from_str("unit = \"unit_a\"\nstart = 1.0\nend = 2.0\neffect = \"variance_scale\"\nfactor = 4.0\n").unwrap();
        assert_eq!(d.effect, DegradationEffect::VarianceScale { factor: 4.0 });
        let d: Degradation = toml::from_str("unit = \"unit_b\"\nstart = 1.0\nend = 2.0\neffect = \"status\"\nstatus = \"single\"\n").unwrap();
        assert_eq!(d.effect, DegradationEffect::Status { status: FixStatus::Single });
        assert!(toml::from_str::<Degradation>("unit = \"unit_a\"\nstart = 1.0\nend = 2.0\neffect = \"silence\"\nfactr = 4.0\n").is_err());
        assert!(toml::from_str::<Degradation>("unit = \"unit_a\"\nstart = 1.0\nend = 2.0\neffect = \"status\"\nfactor = 4.0\n").is_err());
    }

    #[test]
    fn gate_examples() {
        let cfg = GateConfig::default();
        let ok = meas(MeasurementKind::Pose, 1.0, [0.0; 4], 0.05);
        assert_eq!(gate_measurement(&ok, &cfg, 1.0), Ok(()));
        let noisy = meas(MeasurementKind::Pose, 1.0, [0.0; 4], 25.0);
        assert_eq!(gate_measurement(&noisy, &cfg, 1.0), Err(RejectReason::Variance));
        let lost = SourceMeasurement {
            status: FixStatus::NoSolution,
            ..ok
        };
        assert_eq!(gate_measurement(&lost, &cfg, 1.0), Err(RejectReason::Status));
        assert_eq!(gate_measurement(&ok, &cfg, 1.3), Err(RejectReason::Stale));
        let nan = meas(MeasurementKind::Pose, 1.0, [f64::NAN, 0.0, 0.0, 0.0], 0.05);
        assert_eq!(gate_measurement(&nan, &cfg, 1.0), Err(RejectReason::NonFinite));
        // unused slots are ignored
        let h = meas(MeasurementKind::Heading, 1.0, [0.1, f64::NAN, 0.0, 0.0], 0.01);
        assert_eq!(gate_measurement(&h, &cfg, 1.0), Ok(()));
    }

    #[test]
    fn predict_examples() {
        let q = ProcessNoise::default();
        let s = EkfState::new(Vec6::zeros(), Mat6::identity() * 0.1, 0.0);
        let out = ekf_predict(&s, (0.0, 0.0), 0.05, &q);
        assert_eq!((out.x[0], out.x[1], out.x[2]), (0.0, 0.0, 0.0));
        assert!(out.p.trace() >= s.p.trace());

        let s = EkfState::new(
            Vec6::new(0.0, 0.0, std::f64::consts::FRAC_PI_2, 10.0, 0.0, 0.0),
            Mat6::identity(),
            0.0,
        );
        let out = predict_to(&s, 0.1, &q);
        assert!(out.x[0].abs() < 1e-12 && (out.x[1] - 1.0).abs() < 1e-12);
        assert!((out.t - 0.1).abs() < 1e-15);
    }

    #[test]
    fn predict_jacobian_matches_finite_differences() {
        let q = ProcessNoise {
            position: 0.0,
            heading: 0.0,
            velocity: 0.0,
            yaw_rate: 0.0,
        };
        let x0 = Vec6::new(1.0, 2.0, 0.7, 30.0, 0.5, 0.2);
        let dt = 0.01;
        let s = EkfState::new(x0, Mat6::identity(), 0.0);
        let analytic = ekf_predict(&s, (1.0, 3.0), dt, &q).p;
        let h = 1e-6;
        let mut jac = Mat6::zeros();
        for j in 0..6 {
            let mut xp = x0;
            let mut xm = x0;
            xp[j] += h;
            xm[j] -= h;
            let fp = ekf_predict(&EkfState::new(xp, Mat6::zeros(), 0.0), (1.0, 3.0), dt, &q).x;
            let fm = ekf_predict(&EkfState::new(xm, Mat6::zeros(), 0.0), (1.0, 3.0), dt, &q).x;
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        // with P = I the propagated covariance is F F'
        assert!((analytic - jac * jac.transpose()).norm() < 1e-6);
    }

    #[test]
    fn zero_innovation_and_heading_wrap() {
        let s = EkfState::new(Vec6::new(1.0, 2.0, 0.3, 20.0, 0.0, 0.1), Mat6::identity() * 0.5, 1.0);
        let m = meas(MeasurementKind::Pose, 1.0, [1.0, 2.0, 0.0, 0.0], 1e-4);
        let u = ekf_update(&s, &m, 8.0).unwrap();
        assert!((u.x - s.x).norm() < 1e-6);
        let m = meas(MeasurementKind::Heading, 1.0, [0.3 + std::f64::consts::TAU, 0.0, 0.0, 0.0], 1e-4);
        let u = ekf_update(&s, &m, 8.0).unwrap();
        assert!((u.x[2] - 0.3).abs() < 1e-12);
        let far = meas(MeasurementKind::Pose, 1.0, [100.0, 2.0, 0.0, 0.0], 1e-4);
        assert!(ekf_update(&s, &far, 8.0).is_err());
    }

    #[test]
    fn velocity_update_resolves_heading() {
        let s = EkfState::new(Vec6::new(0.0, 0.0, 0.05, 40.0, 0.0, 0.0), Mat6::from_diagonal(&Vec6::new(0.1, 0.1, 0.01, 0.01, 0.0001, 0.01)), 0.0);
        let m = meas(MeasurementKind::Velocity, 0.0, [40.0, 0.0, 0.0, 0.0], 1e-4);
        let u = ekf_update(&s, &m, 100.0).unwrap();
        assert!(u.x[2].abs() < 0.005);
    }

    #[test]
    fn reversed_delivery_matches_in_order() {
        let cfg = LocalizationConfig::default();
        let init = EkfState::new(Vec6::new(0.0, 0.0, 0.0, 10.0, 0.0, 0.0), Mat6::identity() * 0.1, 0.0);
        let a = meas(MeasurementKind::Pose, 0.05, [0.52, 0.01, 0.0, 0.0], 0.01);
        let b = meas(MeasurementKind::Pose, 0.10, [1.01, -0.02, 0.0, 0.0], 0.01);
        let mut l1 = Localizer::new(cfg.clone(), init);
        l1.ingest(a, 0.1).unwrap();
        l1.ingest(b, 0.1).unwrap();
        let o1 = l1.emit(0.12);
        let mut l2 = Localizer::new(cfg, init);
        l2.ingest(b, 0.1).unwrap();
        l2.emit(0.1);
        l2.ingest(a, 0.1).unwrap();
        let o2 = l2.emit(0.12);
        assert!(l2.stats().replays >= 1);
        assert!((o1.x - o2.x).abs() < 1e-6 && (o1.y - o2.y).abs() < 1e-6);
        assert!((o1.covariance - o2.covariance).norm() < 1e-6);
    }

    #[test]
    fn too_late_measurement_dropped() {
        let cfg = LocalizationConfig::default();
        let init = EkfState::new(Vec6::zeros(), Mat6::identity() * 0.1, 0.0);
        let mut l = Localizer::new(cfg, init);
        l.ingest(meas(MeasurementKind::Pose, 0.5, [0.0; 4], 0.01), 0.5).unwrap();
        l.emit(0.8);
        l.ingest(meas(MeasurementKind::Pose, 0.55, [0.0; 4], 0.01), 0.56).unwrap();
        assert_eq!(l.stats().late_dropped, 1);
    }

    #[test]
    fn health_examples() {
        let cfg = LocalizationConfig::default();
        let mut h = HealthMonitor::new(&cfg, 0.0);
        let feed = |h: &mut HealthMonitor, src, t: f64, ok: bool| {
            for k in [MeasurementKind::Pose, MeasurementKind::Velocity, MeasurementKind::Heading] {
                let mut m = meas(k, t, [0.0; 4], 0.01);
                m.source = src;
                h.record(&m, ok);
            }
        };
        for i in 0..20 {
            let t = 0.05 * i as f64;
            feed(&mut h, SourceId::UnitA, t, false);
            feed(&mut h, SourceId::UnitB, t, true);
            let f = h.evaluate(t, 0.01);
            assert!(!f.safe_stop_required);
            assert!(!f.unit_a.healthy() && f.unit_b.healthy());
        }
        for i in 20..30 {
            let t = 0.05 * i as f64;
            feed(&mut h, SourceId::UnitA, t, false);
            feed(&mut h, SourceId::UnitB, t, false);
            h.evaluate(t, 0.01);
        }
        assert!(h.flags().safe_stop_required);
        // stays latched after recovery
        feed(&mut h, SourceId::UnitA, 1.6, true);
        assert!(h.evaluate(1.6, 0.01).safe_stop_required);
        h.reset();
        assert!(!h.evaluate(1.6, 0.01).safe_stop_required);
        assert!(h.evaluate(1.6, 10.0).safe_stop_required);
    }

    #[test]
    fn silent_units_trip_watchdog() {
        let cfg = LocalizationConfig::default();
        let mut h = HealthMonitor::new(&cfg, 0.0);
        let f = h.evaluate(0.1, 0.01);
        assert!(!f.unit_a.watchdog_tripped);
        let f = h.evaluate(0.2, 0.01);
        assert!(f.unit_a.watchdog_tripped && f.unit_b.watchdog_tripped);
        h.evaluate(0.4, 0.01);
        assert!(h.flags().safe_stop_required);
    }

    #[test]
    fn noiseless_simulator_reports_truth_at_rates() {
        let cfg = GnssSimConfig {
            noise: SensorNoise::zero(),
            gnss_latency: 0.0,
            ..Default::default()
        };
        let mut sim = GnssSimulator::new(cfg, 1);
        let mut truth = VehicleState::rolling(5.0, -3.0, 0.4, 30.0);
        truth.psi_dot = 0.1;
        let mut counts = std::collections::BTreeMap::new();
        for ms in 0..1000 {
            for m in sim.poll(ms, &truth) {
                *counts.entry((m.source, m.kind)).or_insert(0) += 1;
                match m.kind {
                    MeasurementKind::Pose => assert_eq!((m.values[0], m.values[1]), (5.0, -3.0)),
                    MeasurementKind::Heading => assert_eq!(m.values[0], 0.4),
                    MeasurementKind::Imu => assert_eq!(m.values[3], 0.1),
                    _ => {}
                }
            }
        }
        assert_eq!(counts[&(SourceId::UnitA, MeasurementKind::Pose)], 20);
        assert_eq!(counts[&(SourceId::UnitB, MeasurementKind::Velocity)], 20);
        assert_eq!(counts[&(SourceId::UnitA, MeasurementKind::Heading)], 1);
        assert_eq!(counts[&(SourceId::UnitA, MeasurementKind::Imu)], 125);
        assert_eq!(counts[&(SourceId::Wheels, MeasurementKind::WheelSpeed)], 100);
    }

    #[test]
    fn degradation_window_rejected_by_gate() {
        let cfg = GnssSimConfig {
            degradations: vec![
                Degradation {
                    unit: SourceId::UnitB,
                    start: 1.0,
                    end: 2.0,
                    kinds: None,
                    effect: DegradationEffect::VarianceScale { factor: 1e4 },
                },
                Degradation {
                    unit: SourceId::UnitA,
                    start: 2.0,
                    end: 3.0,
                    kinds: None,
                    effect: DegradationEffect::Silence,
                },
            ],
            ..Default::default()
        };
        let mut sim = GnssSimulator::new(cfg, 3);
        let gate = GateConfig::default();
        let truth = VehicleState::rolling(0.0, 0.0, 0.0, 40.0);
        for ms in 0..3000 {
            let now = ms as f64 / 1000.0;
            for m in sim.poll(ms, &truth) {
                let in_b = m.source == SourceId::UnitB && m.timestamp >= 1.0 && m.timestamp < 2.0;
                if in_b && m.kind == MeasurementKind::Pose {
                    assert_eq!(gate_measurement(&m, &gate, now), Err(RejectReason::Variance));
                }
                if m.source == SourceId::UnitA {
                    assert!(!(m.timestamp >= 2.0 && m.timestamp < 3.0));
                }
            }
        }
    }
}
