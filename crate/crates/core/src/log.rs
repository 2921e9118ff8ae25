//! Run log: one JSON object per line, tagged by `type`.
//!
//! Records are written in the order the executive produces them, so two runs
//! with the same scenario and seed yield byte-identical files.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::localization::HealthFlags;
use crate::perception::SensorSource;
use crate::planner::{Flag, PrimitiveKind, Role};
use crate::telemetry::CommandKind;
use crate::track::LaneId;
use crate::tracker::TrackEvent;

pub const LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported log schema version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderRecord {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub duration: f64,
    pub cars: Vec<String>,
}

/// Truth state of one car, written every plant log period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub t: f64,
    pub car: usize,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub x_dot: f64,
    pub y_dot: f64,
    pub psi_dot: f64,
    pub a_long: f64,
    pub a_lat: f64,
    pub gear: u8,
    pub traction_lost: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerRecord {
    pub t: f64,
    pub car: usize,
    /// Lateral offset of the true position from the tracked trajectory.
    pub cte: f64,
    /// The same offset as the controller saw it, from its state estimate.
    pub cte_est: f64,
    /// True body longitudinal speed.
    pub speed: f64,
    pub v_target: f64,
    pub lane: LaneId,
    pub steer: f64,
    pub throttle: f64,
    pub brake: f64,
    pub gear: u8,
    pub bracket: usize,
    pub lookahead: f64,
    pub degraded: bool,
    pub stopping: bool,
}

/// One delivered detection, with its sensing stamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub t: f64,
    pub car: usize,
    pub stamp: f64,
    pub source: SensorSource,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub spurious: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub speed: f64,
    /// Distance to the true opponent position at the same instant.
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerRecord {
    pub t: f64,
    pub car: usize,
    pub tentative: usize,
    pub confirmed: usize,
    /// Confirmed tracks farther than the false-track radius from the opponent.
    pub false_confirmed: usize,
    pub best: Option<TrackSummary>,
    pub events: Vec<TrackEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerRecord {
    pub t: f64,
    pub car: usize,
    pub role: Role,
    pub flag: Flag,
    pub primitive: PrimitiveKind,
    pub lane: LaneId,
    pub target_lane: LaneId,
    pub target_speed: f64,
    pub gap: Option<f64>,
    pub ahead: bool,
    pub clearance_ok: bool,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub t: f64,
    pub car: usize,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub speed: f64,
    pub position_variance: f64,
    pub position_error: f64,
    pub heading_error: f64,
    pub health: HealthFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RaceEvent {
    Start { attacker: Option<usize>, round_speed: f64 },
    FlagChanged { car: usize, flag: Flag },
    RoundSpeed { round: usize, speed: f64 },
    WindowOpened { attacker: usize },
    Pass { passer: usize, passed: usize, speed: f64, bracket: String, gap: f64 },
    PassTimeout { attacker: usize, defender_laps: f64 },
    RolesSwapped { attacker: usize },
    Lap { car: usize, lap: u32, lap_time: f64 },
    LaneChangeRequested { car: usize, lane: LaneId },
    ControlledStop { car: usize, from_speed: f64, reason: String },
    Stopped { car: usize },
    StopReleased { car: usize },
    HealthChanged { car: usize, health: HealthFlags },
    Spinout { car: usize },
    TelemetryDown,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceRecord {
    pub t: f64,
    #[serde(flatten)]
    pub event: RaceEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub t: f64,
    pub seq: u32,
    #[serde(flatten)]
    pub kind: CommandKind,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantRecord {
    pub t: f64,
    pub what: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header(HeaderRecord),
    Plant(PlantRecord),
    Controller(ControllerRecord),
    Detection(DetectionRecord),
    Tracker(TrackerRecord),
    Planner(PlannerRecord),
    Localization(LocalizationRecord),
    Race(RaceRecord),
    Command(CommandRecord),
    Invariant(InvariantRecord),
}

/// Destination for records. `None` keeps the run in memory only.
pub struct RunLog {
    sink: Option<Box<dyn Write + Send>>,
    records: Vec<LogRecord>,
    keep: bool,
    line: Vec<u8>,
}

impl RunLog {
    /// Keeps every record in memory.
    pub fn memory() -> Self {
        RunLog {
            sink: None,
            records: Vec::new(),
            keep: true,
            line: Vec::new(),
        }
    }

    /// Streams to `w`; records are kept in memory too when `keep` is set.
    pub fn to_writer(w: Box<dyn Write + Send>, keep: bool) -> Self {
        RunLog {
            sink: Some(w),
            records: Vec::new(),
            keep,
            line: Vec::new(),
        }
    }

    pub fn push(&mut self, r: LogRecord) -> io::Result<()> {
        if let Some(w) = self.sink.as_mut() {
            self.line.clear();
            serde_json::to_writer(&mut self.line, &r)?;
            self.line.push(b'\n');
            w.write_all(&self.line)?;
        }
        if self.keep {
            self.records.push(r);
        }
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LogRecord> {
        self.records
    }

    pub fn flush(&mut self) -> io::Result<()> {
        match self.sink.as_mut() {
            Some(w) => w.flush(),
            None => Ok(()),
        }
    }
}

pub fn to_jsonl(records: &[LogRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// Reads a JSON-lines log, checking the header's schema version when present.
pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogRecord>, LogError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| LogError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if let LogRecord::Header(h) = &rec {
            if h.schema_version != LOG_SCHEMA_VERSION {
                return Err(LogError::Version(h.schema_version));
            }
        }
        out.push(rec);
    }
    Ok(out)
}
