//! Race executive: owns sim time, runs the fixed-rate schedule, applies the
//! competition rules and executes controlled stops.
//!
//! Per 1 ms plant step the order is: operator commands, race rules, sensors,
//! localization, tracker, planner, controller, plant, telemetry snapshot.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::control::{ControlOutput, Controller};
use crate::dynamics::{detect_spinout, step, VehicleState};
use crate::localization::{EkfState, FusedOdometry, GnssSimulator, HealthFlags, Localizer};
use crate::log::*;
use crate::math::mph_to_mps;
use crate::perception::{simulate_frame, SensorSource};
use crate::planner::{lane_window, ActionPrimitive, Flag, Planner, PrimitiveKind, RaceContext, Role};
use crate::scenario::{CarConfig, LocalizationMode, Policy, RaceMode, Scenario, ScriptedEvent};
use crate::telemetry::wire::health_bits;
use crate::telemetry::{
    CommandKind, CommandListener, CommandSequencer, OperatorCommand, Publisher, TelemetryPacket, UdpTelemetrySender,
};
use crate::track::{in_track_bounds, LaneId, Track, TrackError};
use crate::trajectory::PlannedTrajectory;

pub const PLANT_DT: f64 = 0.001;

/// Module periods in plant steps (milliseconds).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Schedule {
    pub localization: u64,
    pub controller: u64,
    pub planner: u64,
    pub tracker: u64,
    pub race: u64,
    pub lidar: u64,
    pub camera: u64,
    pub snapshot: u64,
}

impl Schedule {
    pub const DEFAULT: Schedule = Schedule {
        localization: 10,
        controller: 10,
        planner: 50,
        tracker: 50,
        race: 10,
        lidar: 50,
        camera: 33,
        snapshot: 10,
    };
}

/// Rounds a sensor period to whole plant steps, at least one.
pub fn period_ms(period: f64) -> u64 {
    ((period * 1000.0).round() as u64).max(1)
}

#[derive(Debug, Error)]
pub enum ExecutiveError {
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error("car {car}: {msg}")]
    Car { car: usize, msg: String },
    #[error("log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PassEntry {
    pub t: f64,
    pub passer: usize,
    pub speed: f64,
    pub bracket: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Phase {
    /// Waiting for the trailing gap and speeds to settle before a pass window.
    Settling { since: Option<f64> },
    /// Attacker cleared to pass; `defender_progress` marks the window start.
    Window { opened: f64, defender_progress: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RaceState {
    pub flags: Vec<Flag>,
    pub roles: Vec<Role>,
    pub round_speed: f64,
    pub round: usize,
    pub laps: Vec<u32>,
    pub passes: Vec<PassEntry>,
    pub timeouts: usize,
    pub phase: Phase,
    pub finished_at: Option<f64>,
}

impl RaceState {
    pub fn attacker(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == Role::Attacker)
    }

    pub fn defender(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == Role::Defender)
    }
}

#[derive(Debug, Clone)]
struct StopState {
    t0: f64,
    v0: f64,
    reason: &'static str,
    stopped: bool,
}

/// One simulated car: truth plant plus whatever stack its policy runs.
pub struct CarSim {
    pub cfg: CarConfig,
    pub truth: VehicleState,
    /// Truth states of the most recent steps, newest last.
    history: VecDeque<VehicleState>,
    pub estimate: VehicleState,
    controller: Controller,
    planner: Option<Planner>,
    tracker: Option<crate::tracker::Tracker>,
    localizer: Option<Localizer>,
    gnss: Option<GnssSimulator>,
    rng: ChaCha8Rng,
    trajectory: Option<PlannedTrajectory>,
    pub last_control: ControlOutput,
    pub last_primitive: Option<ActionPrimitive>,
    lane_request: Option<LaneId>,
    stop: Option<StopState>,
    /// Unwrapped centerline station.
    pub progress: f64,
    start_progress: f64,
    pub lateral: f64,
    s_hint: f64,
    lap_t0: f64,
    health: Option<HealthFlags>,
    spun: bool,
    out_of_bounds: bool,
    bad_trajectory: bool,
    bad_covariance: bool,
    emits: u64,
}

const HISTORY: usize = 400;

impl CarSim {
    fn new(idx: usize, cfg: &CarConfig, track: &Arc<Track>, seed: u64) -> Result<Self, ExecutiveError> {
        let err = |msg: String| ExecutiveError::Car { car: idx, msg };
        let lane = track.lane(cfg.lane);
        let p = lane.pose_at(lane.normalize_s(cfg.start_s));
        let truth = if cfg.start_speed > 0.0 {
            VehicleState::rolling(p.x, p.y, p.psi, cfg.start_speed)
        } else {
            VehicleState::at_rest(p.x, p.y, p.psi)
        };
        track.check_vehicle_width(cfg.vehicle.width)?;
        let mut controller = Controller::new(cfg.controller.clone(), &cfg.vehicle).map_err(|e| err(e.to_string()))?;
        if cfg.start_speed > 0.0 {
            let gear = crate::control::gear_select(cfg.start_speed, &cfg.controller.gears, 1);
            controller.prime(0.3, gear);
        }
        let stack = cfg.policy == Policy::Stack;
        let planner = if stack {
            Some(Planner::new(cfg.planner.clone(), track.clone(), cfg.vehicle.width, cfg.lane).map_err(err)?)
        } else {
            None
        };
        let tracker = stack.then(|| crate::tracker::Tracker::new(cfg.tracker.clone(), track.bounds.clone()));
        let (localizer, gnss) = if stack && cfg.localization == LocalizationMode::Ekf {
            let init = EkfState::from_vehicle(&truth, cfg.fusion.initial_variance, 0.0);
            (
                Some(Localizer::new(cfg.fusion.clone(), init)),
                Some(GnssSimulator::new(cfg.gnss.clone(), sub_seed(seed, idx, 1))),
            )
        } else {
            (None, None)
        };
        let c = track.centerline.closest_point(truth.x, truth.y);
        Ok(CarSim {
            cfg: cfg.clone(),
            truth,
            history: VecDeque::from(vec![truth]),
            estimate: truth,
            controller,
            planner,
            tracker,
            localizer,
            gnss,
            rng: ChaCha8Rng::seed_from_u64(sub_seed(seed, idx, 2)),
            trajectory: None,
            last_control: ControlOutput::default(),
            last_primitive: None,
            lane_request: None,
            stop: None,
            progress: c.s,
            start_progress: c.s,
            lateral: c.lateral,
            s_hint: c.s,
            lap_t0: 0.0,
            health: None,
            spun: false,
            out_of_bounds: false,
            bad_trajectory: false,
            bad_covariance: false,
            emits: 0,
        })
    }

    /// Truth state `back` steps ago, clamped to the oldest kept.
    fn past(&self, back: u64) -> &VehicleState {
        let n = self.history.len();
        let i = n.saturating_sub(1 + back as usize);
        &self.history[i]
    }

    pub fn planner(&self) -> Option<&Planner> {
        self.planner.as_ref()
    }

    pub fn tracker(&self) -> Option<&crate::tracker::Tracker> {
        self.tracker.as_ref()
    }

    pub fn localizer(&self) -> Option<&Localizer> {
        self.localizer.as_ref()
    }

    pub fn trajectory(&self) -> Option<&PlannedTrajectory> {
        self.trajectory.as_ref()
    }

    pub fn is_stopping(&self) -> bool {
        self.stop.is_some()
    }

    /// Completed laps since the start.
    pub fn laps(&self, track_length: f64) -> u32 {
        ((self.progress - self.start_progress) / track_length).floor().max(0.0) as u32
    }

    /// Output cadence of the localizer over `elapsed` seconds.
    pub fn localization_rate(&self, elapsed: f64) -> Option<f64> {
        (self.localizer.is_some() && elapsed > 0.0).then(|| self.emits as f64 / elapsed)
    }
}

fn sub_seed(seed: u64, car: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((car as u64 + 1) * 0x1000)
        .wrapping_add(stream)
}

/// Label for the speed ladder step a pass happened in.
pub fn ladder_label(mph: f64) -> String {
    format!("{mph}mph")
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub sim_time: f64,
    pub wall_time: f64,
    pub passes: Vec<PassEntry>,
    pub timeouts: usize,
    pub laps: Vec<u32>,
    pub breaches: Vec<InvariantRecord>,
    pub min_lateral_separation: Option<f64>,
    pub safe_stops: usize,
    pub spinouts: usize,
    pub localization_rate_hz: Vec<Option<f64>>,
    pub telemetry_packets: u64,
    pub finished: bool,
}

/// Socket side of the telemetry module, when enabled.
#[derive(Default)]
pub struct TelemetryLink {
    pub sender: Option<UdpTelemetrySender>,
    pub listener: Option<CommandListener>,
}

pub struct World {
    pub scenario: Scenario,
    pub seed: u64,
    pub track: Arc<Track>,
    pub cars: Vec<CarSim>,
    pub race: RaceState,
    pub schedule: Schedule,
    ladder: Vec<f64>,
    duration: f64,
    k: u64,
    publisher: Publisher,
    link: TelemetryLink,
    link_down: bool,
    sequencer: CommandSequencer,
    script: Vec<OperatorCommand>,
    script_at: Vec<u64>,
    script_next: usize,
    injected: VecDeque<OperatorCommand>,
    events: Vec<ScriptedEvent>,
    event_next: usize,
    /// Every packet the publisher emitted, when capture is on.
    pub captured: Option<Vec<TelemetryPacket>>,
    packets: u64,
    breaches: Vec<InvariantRecord>,
    min_separation: Option<f64>,
    separated_ok: bool,
    safe_stops: usize,
    spinouts: usize,
}

impl World {
    pub fn new(scenario: &Scenario, seed: Option<u64>, duration: Option<f64>) -> Result<World, ExecutiveError> {
        let seed = seed.unwrap_or(scenario.seed);
        let track = Arc::new(Track::from_config(&scenario.track)?);
        let cars = scenario
            .cars
            .iter()
            .enumerate()
            .map(|(i, c)| CarSim::new(i, c, &track, seed))
            .collect::<Result<Vec<_>, _>>()?;
        let ladder: Vec<f64> = scenario.race.ladder_mph.clone();
        let roles = scenario
            .cars
            .iter()
            .enumerate()
            .map(|(i, c)| c.role.unwrap_or(if i == 0 { Role::Attacker } else { Role::Defender }))
            .collect();
        let race = RaceState {
            flags: vec![scenario.race.initial_flag; cars.len()],
            roles,
            round_speed: mph_to_mps(ladder[0]),
            round: 0,
            laps: vec![0; cars.len()],
            passes: Vec::new(),
            timeouts: 0,
            phase: Phase::Settling { since: None },
            finished_at: None,
        };
        let mut schedule = Schedule::DEFAULT;
        if let Some(c) = cars.first() {
            schedule.lidar = period_ms(c.cfg.perception.lidar.period);
            schedule.camera = period_ms(c.cfg.perception.camera.period);
        }
        let publisher = Publisher::new(scenario.telemetry).map_err(|e| ExecutiveError::Car {
            car: 0,
            msg: e.to_string(),
        })?;
        let mut script: Vec<(u64, OperatorCommand)> = scenario
            .operator
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let at = (c.t * 1000.0).round().max(0.0) as u64;
                (
                    at,
                    OperatorCommand {
                        seq: c.seq.unwrap_or(i as u32 + 1),
                        kind: c.kind,
                    },
                )
            })
            .collect();
        script.sort_by_key(|e| e.0);
        let mut events = scenario.events.clone();
        events.sort_by(|a, b| a.time().total_cmp(&b.time()));
        Ok(World {
            scenario: scenario.clone(),
            seed,
            track,
            cars,
            race,
            schedule,
            ladder,
            duration: duration.unwrap_or(scenario.duration),
            k: 0,
            publisher,
            link: TelemetryLink::default(),
            link_down: false,
            sequencer: CommandSequencer::default(),
            script_at: script.iter().map(|e| e.0).collect(),
            script: script.into_iter().map(|e| e.1).collect(),
            script_next: 0,
            injected: VecDeque::new(),
            events,
            event_next: 0,
            captured: None,
            packets: 0,
            breaches: Vec::new(),
            min_separation: None,
            separated_ok: true,
            safe_stops: 0,
            spinouts: 0,
        })
    }

    pub fn attach(&mut self, link: TelemetryLink) {
        self.link = link;
    }

    pub fn capture_telemetry(&mut self) {
        self.captured = Some(Vec::new());
    }

    /// Queues a command as if it had arrived on the command port.
    pub fn inject(&mut self, cmd: OperatorCommand) {
        self.injected.push_back(cmd);
    }

    pub fn now(&self) -> f64 {
        self.k as f64 * PLANT_DT
    }

    pub fn tick_index(&self) -> u64 {
        self.k
    }

    pub fn publisher(&self) -> &Publisher {
        &self.publisher
    }

    pub fn is_done(&self) -> bool {
        let t = self.now();
        if t >= self.duration - 1e-9 {
            return true;
        }
        match self.race.finished_at {
            Some(f) if self.scenario.race.finish_delay >= 0.0 => t >= f + self.scenario.race.finish_delay - 1e-9,
            _ => false,
        }
    }

    pub fn header(&self) -> LogRecord {
        LogRecord::Header(HeaderRecord {
            schema_version: LOG_SCHEMA_VERSION,
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            duration: self.duration,
            cars: self.cars.iter().map(|c| c.cfg.name.clone()).collect(),
        })
    }

    /// Runs to completion. `realtime` paces sim time against the wall clock.
    pub fn run(&mut self, log: &mut RunLog, realtime: bool) -> Result<RunSummary, ExecutiveError> {
        let wall = Instant::now();
        log.push(self.header())?;
        let start_speed = self.race.round_speed;
        log.push(race(0.0, RaceEvent::Start {
            attacker: (self.scenario.race.mode == RaceMode::Passing).then(|| self.race.attacker()).flatten(),
            round_speed: start_speed,
        }))?;
        while !self.is_done() {
            self.tick(log)?;
            if realtime && self.k.is_multiple_of(10) {
                let ahead = Duration::from_secs_f64(self.now()).saturating_sub(wall.elapsed());
                if !ahead.is_zero() {
                    std::thread::sleep(ahead);
                }
            }
        }
        log.flush()?;
        Ok(self.summary(wall.elapsed().as_secs_f64()))
    }

    pub fn summary(&self, wall_time: f64) -> RunSummary {
        let t = self.now();
        RunSummary {
            scenario: self.scenario.name.clone(),
            seed: self.seed,
            sim_time: t,
            wall_time,
            passes: self.race.passes.clone(),
            timeouts: self.race.timeouts,
            laps: self.race.laps.clone(),
            breaches: self.breaches.clone(),
            min_lateral_separation: self.min_separation,
            safe_stops: self.safe_stops,
            spinouts: self.spinouts,
            localization_rate_hz: self.cars.iter().map(|c| c.localization_rate(t)).collect(),
            telemetry_packets: self.packets,
            finished: self.race.finished_at.is_some(),
        }
    }

    fn breach(&mut self, log: &mut RunLog, what: String) -> Result<(), ExecutiveError> {
        let rec = InvariantRecord { t: self.now(), what };
        log::warn!("invariant breach at {:.3}s: {}", rec.t, rec.what);
        self.breaches.push(rec.clone());
        log.push(LogRecord::Invariant(rec))?;
        Ok(())
    }

    /// Advances one plant step.
    pub fn tick(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let k = self.k;
        let t = self.now();
        self.commands(log)?;
        self.scripted_events(log)?;
        if k.is_multiple_of(self.schedule.race) {
            self.race_rules(log)?;
        }
        self.sensors(log)?;
        if k.is_multiple_of(self.schedule.localization) {
            self.localization(log)?;
        }
        if k.is_multiple_of(self.schedule.tracker) {
            self.tracking(log)?;
        }
        if k.is_multiple_of(self.schedule.planner) {
            self.planning(log)?;
        }
        if k.is_multiple_of(self.schedule.controller) {
            self.control(log)?;
        }
        if k.is_multiple_of(self.schedule.snapshot) {
            self.telemetry(log)?;
        }
        // plant
        for i in 0..self.cars.len() {
            let car = &mut self.cars[i];
            let cmd = car.last_control.command;
            match step(&car.truth, &cmd, &car.cfg.vehicle, PLANT_DT) {
                Ok(s) => {
                    car.truth = s;
                    car.history.push_back(s);
                    if car.history.len() > HISTORY {
                        car.history.pop_front();
                    }
                }
                Err(e) => {
                    self.breach(log, format!("car {i} plant step failed: {e}"))?;
                    self.duration = t;
                }
            }
        }
        self.k += 1;
        Ok(())
    }

    fn commands(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let mut due = Vec::new();
        while self.script_next < self.script.len() && self.script_at[self.script_next] <= self.k {
            due.push(self.script[self.script_next]);
            self.script_next += 1;
        }
        due.extend(self.injected.drain(..));
        if let Some(l) = &self.link.listener {
            due.extend(l.drain());
        }
        for cmd in due {
            let applied = self.sequencer.accept(&cmd);
            log.push(LogRecord::Command(CommandRecord {
                t: self.now(),
                seq: cmd.seq,
                kind: cmd.kind,
                applied,
            }))?;
            if applied {
                self.apply(cmd.kind, log)?;
            }
        }
        Ok(())
    }

    fn set_flag(&mut self, i: usize, flag: Flag, log: &mut RunLog) -> Result<(), ExecutiveError> {
        if self.race.flags[i] == flag {
            return Ok(());
        }
        let was = self.race.flags[i];
        self.race.flags[i] = flag;
        log.push(race(self.now(), RaceEvent::FlagChanged { car: i, flag }))?;
        if flag == Flag::Red {
            self.start_stop(i, "red_flag", log)?;
        } else if was == Flag::Red {
            self.release_stop(i, &["red_flag", "emergency_stop"], log)?;
        }
        Ok(())
    }

    fn apply(&mut self, kind: CommandKind, log: &mut RunLog) -> Result<(), ExecutiveError> {
        match kind {
            CommandKind::SetFlag { flag, car } => {
                for i in 0..self.cars.len() {
                    if car.matches(i) {
                        self.set_flag(i, flag, log)?;
                    }
                }
            }
            CommandKind::SetRoundSpeed { speed } => {
                self.race.round_speed = speed.max(0.0);
                log.push(race(self.now(), RaceEvent::RoundSpeed {
                    round: self.race.round,
                    speed: self.race.round_speed,
                }))?;
            }
            CommandKind::EmergencyStop => {
                for i in 0..self.cars.len() {
                    self.set_flag(i, Flag::Red, log)?;
                    self.start_stop(i, "emergency_stop", log)?;
                }
            }
            CommandKind::ResetLatch => {
                for i in 0..self.cars.len() {
                    if let Some(l) = self.cars[i].localizer.as_mut() {
                        l.reset_safe_stop();
                    }
                    self.release_stop(i, &["safe_stop"], log)?;
                }
            }
        }
        Ok(())
    }

    fn start_stop(&mut self, i: usize, reason: &'static str, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let t = self.now();
        let car = &mut self.cars[i];
        if car.stop.is_some() {
            return Ok(());
        }
        let v0 = car.truth.x_dot.max(0.0);
        car.stop = Some(StopState {
            t0: t,
            v0,
            reason,
            stopped: false,
        });
        log.push(race(t, RaceEvent::ControlledStop {
            car: i,
            from_speed: v0,
            reason: reason.to_string(),
        }))?;
        Ok(())
    }

    /// Ends a stop begun for one of `reasons`, unless a safe-stop latch or Red flag still holds.
    fn release_stop(&mut self, i: usize, reasons: &[&str], log: &mut RunLog) -> Result<(), ExecutiveError> {
        let latched = self.cars[i]
            .localizer
            .as_ref()
            .is_some_and(|l| l.health().safe_stop_required);
        let matches = self.cars[i].stop.as_ref().is_some_and(|s| reasons.contains(&s.reason));
        if latched || !matches || self.race.flags[i] == Flag::Red {
            return Ok(());
        }
        self.cars[i].stop = None;
        log.push(race(self.now(), RaceEvent::StopReleased { car: i }))?;
        Ok(())
    }

    fn scripted_events(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        while self.event_next < self.events.len() {
            let e = self.events[self.event_next];
            if (e.time() * 1000.0).round() as u64 > self.k {
                break;
            }
            self.event_next += 1;
            match e {
                ScriptedEvent::LaneChange { car, lane, .. } => {
                    self.cars[car].lane_request = Some(lane);
                    log.push(race(self.now(), RaceEvent::LaneChangeRequested { car, lane }))?;
                }
            }
        }
        Ok(())
    }

    /// Progress, laps, pass rules and separation. Runs on truth.
    fn race_rules(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let t = self.now();
        let length = self.track.length();
        let center = &self.track.centerline;
        for (i, car) in self.cars.iter_mut().enumerate() {
            let p = center.closest_point_near(car.truth.x, car.truth.y, car.s_hint, 40.0);
            car.progress += center.station_delta(car.s_hint, p.s);
            car.s_hint = p.s;
            car.lateral = p.lateral;
            let laps = car.laps(length);
            if laps > self.race.laps[i] {
                self.race.laps[i] = laps;
                log.push(race(t, RaceEvent::Lap {
                    car: i,
                    lap: laps,
                    lap_time: t - car.lap_t0,
                }))?;
                car.lap_t0 = t;
            }
        }

        let mut checks = Vec::new();
        for (i, car) in self.cars.iter_mut().enumerate() {
            if !car.spun && detect_spinout(&car.truth, &car.cfg.vehicle) {
                car.spun = true;
                self.spinouts += 1;
                log.push(race(t, RaceEvent::Spinout { car: i }))?;
                checks.push(format!("car {i} lost traction"));
            }
            let inside = in_track_bounds(&self.track.bounds, (car.truth.x, car.truth.y));
            if !inside && !car.out_of_bounds {
                checks.push(format!("car {i} left the track bounds"));
            }
            car.out_of_bounds = !inside;
            if let Some(s) = car.stop.as_mut() {
                if !s.stopped && car.truth.x_dot.abs() < 0.1 {
                    s.stopped = true;
                    log.push(race(t, RaceEvent::Stopped { car: i }))?;
                }
            }
        }
        for c in checks {
            self.breach(log, c)?;
        }

        if self.cars.len() == 2 {
            let gap = self.cars[0].progress - self.cars[1].progress;
            if gap.abs() < self.scenario.race.overlap_length {
                let sep = (self.cars[0].lateral - self.cars[1].lateral).abs();
                self.min_separation = Some(self.min_separation.map_or(sep, |m| m.min(sep)));
                let ok = sep >= self.scenario.race.min_lateral_separation;
                let compliant = self.race.flags.iter().all(|f| matches!(f, Flag::Green | Flag::WavingGreen));
                if !ok && self.separated_ok && compliant {
                    self.breach(log, format!("lateral separation {sep:.2} m while side by side"))?;
                }
                self.separated_ok = ok;
            } else {
                self.separated_ok = true;
            }
        }

        match self.scenario.race.mode {
            RaceMode::TimeTrial => self.time_trial_rules(log),
            RaceMode::Passing => self.passing_rules(log),
        }
    }

    fn advance_round(&mut self, log: &mut RunLog) -> Result<bool, ExecutiveError> {
        if self.race.round + 1 < self.ladder.len() {
            self.race.round += 1;
            self.race.round_speed = mph_to_mps(self.ladder[self.race.round]);
            log.push(race(self.now(), RaceEvent::RoundSpeed {
                round: self.race.round,
                speed: self.race.round_speed,
            }))?;
            Ok(true)
        } else {
            if self.race.finished_at.is_none() {
                self.race.finished_at = Some(self.now());
                log.push(race(self.now(), RaceEvent::Finished))?;
            }
            Ok(false)
        }
    }

    fn time_trial_rules(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        if self.race.finished_at.is_some() {
            return Ok(());
        }
        let target = (self.race.round as u32 + 1) * self.scenario.race.laps_per_step;
        if self.race.laps[0] >= target {
            self.advance_round(log)?;
        }
        Ok(())
    }

    fn passing_rules(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        if self.race.finished_at.is_some() {
            return Ok(());
        }
        let (Some(a), Some(d)) = (self.race.attacker(), self.race.defender()) else {
            return Ok(());
        };
        // no passing under caution or while either car is being stopped; an open window is withdrawn
        let caution = self.cars.iter().any(|c| c.stop.is_some())
            || self.race.flags.iter().any(|f| matches!(f, Flag::Yellow | Flag::Red));
        if caution {
            self.race.phase = Phase::Settling { since: None };
            return Ok(());
        }
        let t = self.now();
        let rc = self.scenario.race.clone();
        let gap = self.cars[a].progress - self.cars[d].progress;
        match self.race.phase {
            Phase::Settling { since } => {
                let setpoint = self.cars[a].cfg.planner.gap_setpoint;
                let settled_gap = gap < 0.0 && (-gap - setpoint).abs() <= rc.settle_tolerance;
                let def_speed = (self.cars[d].truth.x_dot - self.race.round_speed).abs() <= rc.settle_speed_tolerance;
                let lanes_ok = self.cars.iter().all(|c| {
                    c.planner.as_ref().is_none_or(|p| p.lane() == LaneId::Inner)
                        && c.last_primitive.is_none_or(|p| p.kind != PrimitiveKind::SafeMerge)
                });
                let ready = settled_gap && def_speed && lanes_ok;
                let since = match (ready, since) {
                    (false, _) => None,
                    (true, None) => Some(t),
                    (true, s) => s,
                };
                let held = since.is_some_and(|s| t - s >= rc.settle_time - 1e-9);
                if held && rc.auto_waving_green {
                    self.set_flag(a, Flag::WavingGreen, log)?;
                }
                if self.race.flags[a] == Flag::WavingGreen {
                    self.race.phase = Phase::Window {
                        opened: t,
                        defender_progress: self.cars[d].progress,
                    };
                    log.push(race(t, RaceEvent::WindowOpened { attacker: a }))?;
                } else {
                    self.race.phase = Phase::Settling { since };
                }
            }
            Phase::Window { defender_progress, .. } => {
                let length = self.track.length();
                let defender_laps = (self.cars[d].progress - defender_progress) / length;
                if gap >= rc.pass_gap {
                    let mph = self.ladder[self.race.round];
                    let entry = PassEntry {
                        t,
                        passer: a,
                        speed: self.race.round_speed,
                        bracket: ladder_label(mph),
                    };
                    log.push(race(t, RaceEvent::Pass {
                        passer: a,
                        passed: d,
                        speed: entry.speed,
                        bracket: entry.bracket.clone(),
                        gap,
                    }))?;
                    self.race.passes.push(entry);
                    self.swap_roles(log)?;
                    self.advance_round(log)?;
                } else if defender_laps >= rc.pass_window_laps {
                    self.race.timeouts += 1;
                    log.push(race(t, RaceEvent::PassTimeout {
                        attacker: a,
                        defender_laps,
                    }))?;
                    self.swap_roles(log)?;
                }
            }
        }
        Ok(())
    }

    fn swap_roles(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        for r in self.race.roles.iter_mut() {
            *r = r.other();
        }
        let attacker = self.race.attacker().unwrap_or(0);
        log.push(race(self.now(), RaceEvent::RolesSwapped { attacker }))?;
        for i in 0..self.cars.len() {
            if self.race.flags[i] == Flag::WavingGreen {
                self.set_flag(i, Flag::Green, log)?;
            }
        }
        self.race.phase = Phase::Settling { since: None };
        Ok(())
    }

    fn sensors(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let k = self.k;
        let t = self.now();
        let n = self.cars.len();
        for i in 0..n {
            let car = &mut self.cars[i];
            if let (Some(gnss), Some(loc)) = (car.gnss.as_mut(), car.localizer.as_mut()) {
                for m in gnss.poll(k, &car.truth) {
                    let _ = loc.ingest(m, t);
                }
            }
            if self.cars[i].tracker.is_none() {
                continue;
            }
            for (src, period) in [
                (SensorSource::Lidar, self.schedule.lidar),
                (SensorSource::Camera, self.schedule.camera),
            ] {
                let sensor = self.cars[i].cfg.perception.sensor(src);
                let lat = (sensor.latency * 1000.0).round().max(0.0) as u64;
                // no frame can show the scene before the run started
                if !sensor.enabled || !k.is_multiple_of(period) || k < lat {
                    continue;
                }
                let ego = *self.cars[i].past(lat);
                let opp = (n == 2).then(|| *self.cars[1 - i].past(lat));
                let car = &mut self.cars[i];
                let dets = simulate_frame(&ego, opp.as_ref(), &car.cfg.perception, src, t, &mut car.rng);
                for d in dets {
                    if self.scenario.log.detections {
                        log.push(LogRecord::Detection(DetectionRecord {
                            t,
                            car: i,
                            stamp: d.timestamp,
                            source: d.source,
                            x: d.x,
                            y: d.y,
                            confidence: d.confidence,
                            spurious: d.spurious,
                        }))?;
                    }
                    car.tracker.as_mut().expect("checked").ingest(d);
                }
            }
        }
        Ok(())
    }

    fn localization(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let t = self.now();
        let mut breaches = Vec::new();
        for i in 0..self.cars.len() {
            let car = &mut self.cars[i];
            let Some(loc) = car.localizer.as_mut() else {
                car.estimate = car.truth;
                continue;
            };
            let odo: FusedOdometry = loc.emit(t);
            car.emits += 1;
            car.estimate = odo.to_vehicle_state(&car.truth);
            let health = loc.health();
            if !odo.covariance_is_spd() && !car.bad_covariance {
                car.bad_covariance = true;
                breaches.push(format!("car {i} fused covariance not positive definite"));
            }
            if car.health != Some(health) {
                if car.health.is_some() {
                    log.push(race(t, RaceEvent::HealthChanged { car: i, health }))?;
                }
                car.health = Some(health);
            }
            let period = self.scenario.log.localization_period_ms.max(1);
            if self.k.is_multiple_of(period) {
                log.push(LogRecord::Localization(LocalizationRecord {
                    t,
                    car: i,
                    x: odo.x,
                    y: odo.y,
                    psi: odo.psi,
                    speed: odo.x_dot,
                    position_variance: odo.position_variance(),
                    position_error: (odo.x - car.truth.x).hypot(odo.y - car.truth.y),
                    heading_error: crate::math::wrap_angle(odo.psi - car.truth.psi),
                    health,
                }))?;
            }
            if health.safe_stop_required && car.stop.is_none() {
                self.safe_stops += 1;
                self.start_stop(i, "safe_stop", log)?;
            }
        }
        for b in breaches {
            self.breach(log, b)?;
        }
        Ok(())
    }

    fn tracking(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let t = self.now();
        let n = self.cars.len();
        let radius = self.scenario.log.false_track_radius;
        for i in 0..n {
            let opp_truth = (n == 2).then(|| (self.cars[1 - i].truth.x, self.cars[1 - i].truth.y));
            let car = &mut self.cars[i];
            let Some(tr) = car.tracker.as_mut() else {
                continue;
            };
            let events = tr.process(t);
            let cfg = tr.config().clone();
            let err = |x: f64, y: f64| opp_truth.map_or(f64::INFINITY, |(ox, oy)| (x - ox).hypot(y - oy));
            let mut false_confirmed = 0;
            for c in tr.confirmed() {
                let (x, y) = c.predicted_to(t, &cfg).position();
                if err(x, y) > radius {
                    false_confirmed += 1;
                }
            }
            let best = tr.best_opponent(t).map(|b| {
                let (x, y) = b.position();
                TrackSummary {
                    id: b.id,
                    x,
                    y,
                    speed: b.speed(),
                    error: err(x, y),
                }
            });
            let confirmed = tr.confirmed().count();
            log.push(LogRecord::Tracker(TrackerRecord {
                t,
                car: i,
                tentative: tr.tracks().len() - confirmed,
                confirmed,
                false_confirmed,
                best,
                events,
            }))?;
        }
        Ok(())
    }

    fn planning(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let t = self.now();
        let mut breaches = Vec::new();
        for i in 0..self.cars.len() {
            let role = self.race.roles[i];
            let flag = self.race.flags[i];
            let round_speed = self.race.round_speed;
            let track = self.track.clone();
            let car = &mut self.cars[i];
            match car.cfg.policy {
                Policy::Hold { speed } => {
                    let v = match flag {
                        Flag::Red => 0.0,
                        Flag::Yellow => speed.unwrap_or(round_speed) * car.cfg.planner.yellow_factor,
                        _ => speed.unwrap_or(round_speed),
                    };
                    let line = track.lane(car.cfg.lane);
                    let s = line.closest_point(car.truth.x, car.truth.y).s;
                    let pc = &car.cfg.planner;
                    let st = lane_window(line, s - pc.start_behind, pc.horizon, pc.spacing);
                    car.trajectory = PlannedTrajectory::from_stations(car.cfg.lane, &st, v, t).ok();
                }
                Policy::Stack => {
                    let opponent = car.tracker.as_ref().and_then(|tr| tr.best_opponent(t));
                    let ctx = RaceContext {
                        role,
                        flag,
                        round_speed,
                        opponent,
                        ego: car.estimate,
                        lane_request: car.lane_request,
                    };
                    let planner = car.planner.as_mut().expect("stack car has a planner");
                    let out = planner.tick(&ctx, t);
                    if !out.trajectory.satisfies_invariants(planner.config().a_lat_max) && !car.bad_trajectory {
                        car.bad_trajectory = true;
                        breaches.push(format!("car {i} planned trajectory violates its invariants"));
                    }
                    if let Some(d) = &out.diagnostic {
                        log::debug!("car {i} planner: {d}");
                    }
                    log.push(LogRecord::Planner(PlannerRecord {
                        t,
                        car: i,
                        role,
                        flag,
                        primitive: out.primitive.kind,
                        lane: out.situation.lane,
                        target_lane: out.primitive.target_lane,
                        target_speed: out.primitive.target_speed,
                        gap: out.situation.gap,
                        ahead: out.situation.ahead,
                        clearance_ok: out.situation.clearance_ok,
                        diagnostic: out.diagnostic,
                    }))?;
                    car.last_primitive = Some(out.primitive);
                    car.trajectory = Some(out.trajectory);
                }
            }
        }
        for b in breaches {
            self.breach(log, b)?;
        }
        Ok(())
    }

    fn control(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let t = self.now();
        let decel = self.scenario.race.stop_decel;
        for (i, car) in self.cars.iter_mut().enumerate() {
            let v_override = car
                .stop
                .as_ref()
                .map(|s| controlled_stop_speed(s.v0, decel, t - s.t0));
            let out = car.controller.tick(&car.estimate, car.trajectory.as_ref(), v_override);
            car.last_control = out;
            let cte = car
                .trajectory
                .as_ref()
                .map_or(0.0, |tr| tr.path.closest_point(car.truth.x, car.truth.y).lateral);
            log.push(LogRecord::Controller(ControllerRecord {
                t,
                car: i,
                cte,
                cte_est: out.cte,
                speed: car.truth.x_dot,
                v_target: out.v_target,
                lane: car.trajectory.as_ref().map_or(car.cfg.lane, |tr| tr.lane()),
                steer: out.command.steer,
                throttle: out.command.throttle,
                brake: out.command.brake,
                gear: out.command.gear,
                bracket: out.bracket,
                lookahead: out.lookahead,
                degraded: out.degraded,
                stopping: car.stop.is_some(),
            }))?;
            if self.k.is_multiple_of(self.scenario.log.plant_period_ms.max(1)) {
                let s = &car.truth;
                log.push(LogRecord::Plant(PlantRecord {
                    t,
                    car: i,
                    x: s.x,
                    y: s.y,
                    psi: s.psi,
                    x_dot: s.x_dot,
                    y_dot: s.y_dot,
                    psi_dot: s.psi_dot,
                    a_long: s.a_long,
                    a_lat: s.a_lat,
                    gear: s.gear,
                    traction_lost: s.traction_lost,
                }))?;
            }
        }
        Ok(())
    }

    /// Snapshot of car 0 as the base station sees it.
    pub fn snapshot(&self, seq: u32) -> TelemetryPacket {
        let car = &self.cars[0];
        let opp = car.tracker.as_ref().and_then(|tr| tr.best_opponent(self.now()));
        let e = &car.estimate;
        let out = &car.last_control;
        TelemetryPacket {
            seq,
            sim_time: self.now(),
            x: e.x as f32,
            y: e.y as f32,
            psi: e.psi as f32,
            speed: e.x_dot as f32,
            target_speed: out.v_target as f32,
            flag: self.race.flags[0],
            role: self.race.roles[0],
            opponent_present: opp.is_some(),
            opponent_x: opp.as_ref().map_or(0.0, |o| o.position().0 as f32),
            opponent_y: opp.as_ref().map_or(0.0, |o| o.position().1 as f32),
            opponent_speed: opp.as_ref().map_or(0.0, |o| o.speed() as f32),
            health: health_word(car.health.as_ref(), opp.is_some(), out.degraded, car.truth.traction_lost),
            cte: out.cte as f32,
            steer: out.command.steer as f32,
            throttle: out.command.throttle as f32,
            brake: out.command.brake as f32,
        }
    }

    fn telemetry(&mut self, log: &mut RunLog) -> Result<(), ExecutiveError> {
        let k = self.k;
        if !k.is_multiple_of(self.publisher.period_ms()) {
            return Ok(());
        }
        let snap = self.snapshot(0);
        let Some(pkt) = self.publisher.offer(k, |seq| TelemetryPacket { seq, ..snap }) else {
            return Ok(());
        };
        self.packets += 1;
        if let Some(c) = self.captured.as_mut() {
            c.push(pkt);
        }
        if let Some(s) = &self.link.sender {
            s.send(pkt);
            if s.failed() && !self.link_down {
                self.link_down = true;
                log.push(race(self.now(), RaceEvent::TelemetryDown))?;
            }
        }
        Ok(())
    }
}

fn race(t: f64, event: RaceEvent) -> LogRecord {
    LogRecord::Race(RaceRecord { t, event })
}

/// Target speed of a controlled stop `elapsed` seconds after it began.
pub fn controlled_stop_speed(v0: f64, decel: f64, elapsed: f64) -> f64 {
    (v0 - decel * elapsed.max(0.0)).max(0.0)
}

/// Packs health into the telemetry bitfield; a set bit means healthy or present.
pub fn health_word(h: Option<&HealthFlags>, opponent: bool, degraded: bool, traction_lost: bool) -> u16 {
    use health_bits::*;
    let mut w = 0u16;
    let mut set = |bit: u16, on: bool| {
        if on {
            w |= bit;
        }
    };
    match h {
        Some(h) => {
            set(UNIT_A_POSE, h.unit_a.pose_ok);
            set(UNIT_A_VELOCITY, h.unit_a.velocity_ok);
            set(UNIT_A_HEADING, h.unit_a.heading_ok);
            set(UNIT_A_WATCHDOG, h.unit_a.watchdog_tripped);
            set(UNIT_B_POSE, h.unit_b.pose_ok);
            set(UNIT_B_VELOCITY, h.unit_b.velocity_ok);
            set(UNIT_B_HEADING, h.unit_b.heading_ok);
            set(UNIT_B_WATCHDOG, h.unit_b.watchdog_tripped);
            set(WHEELS, h.wheels_ok);
            set(COVARIANCE_ALARM, h.covariance_alarm);
            set(SAFE_STOP, h.safe_stop_required);
        }
        None => {
            // truth localization: report all channels healthy
            set(UNIT_A_POSE | UNIT_A_VELOCITY | UNIT_A_HEADING, true);
            set(UNIT_B_POSE | UNIT_B_VELOCITY | UNIT_B_HEADING | WHEELS, true);
        }
    }
    set(OPPONENT_TRACKED, opponent);
    set(CONTROLLER_DEGRADED, degraded);
    set(TRACTION_LOST, traction_lost);
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_ramp_from_sixty() {
        assert_eq!(controlled_stop_speed(60.0, 5.0, 0.0), 60.0);
        assert!((controlled_stop_speed(60.0, 5.0, 6.0) - 30.0).abs() < 1e-12);
        assert_eq!(controlled_stop_speed(60.0, 5.0, 12.0), 0.0);
        assert_eq!(controlled_stop_speed(60.0, 5.0, 20.0), 0.0);
        assert_eq!(controlled_stop_speed(0.0, 5.0, 0.0), 0.0);
    }

    #[test]
    fn periods_round_to_plant_steps() {
        assert_eq!(period_ms(0.05), 50);
        assert_eq!(period_ms(1.0 / 30.0), 33);
        assert_eq!(period_ms(1e-5), 1);
    }

    #[test]
    fn health_word_bits() {
        assert_eq!(health_word(None, false, false, false), 0x1ff & !0x88);
        let w = health_word(None, true, true, true);
        assert_ne!(w & health_bits::OPPONENT_TRACKED, 0);
        assert_ne!(w & health_bits::CONTROLLER_DEGRADED, 0);
        assert_ne!(w & health_bits::TRACTION_LOST, 0);
    }
}
