//! Scenario files: TOML describing the track, the cars, race rules and scripts.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::ControllerConfig;
use crate::dynamics::VehicleParams;
use crate::localization::{GnssSimConfig, LocalizationConfig};
use crate::perception::PerceptionConfig;
use crate::planner::{Flag, PlannerConfig, Role};
use crate::telemetry::{CommandKind, PublisherConfig};
use crate::track::{LaneId, TrackConfig};
use crate::tracker::TrackerConfig;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse: {0}")]
    Parse(String),
    #[error("scenario io: {0}")]
    Io(String),
    #[error("unknown scenario `{0}`; bundled: {list}", list = BUNDLED.iter().map(|b| b.0).collect::<Vec<_>>().join(", "))]
    Unknown(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaceMode {
    /// Each car runs the round speed ladder on its own.
    TimeTrial,
    /// Two cars, attacker and defender, ladder advanced by passes.
    Passing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaceConfig {
    pub mode: RaceMode,
    /// Round speeds in mph, as announced at the track.
    pub ladder_mph: Vec<f64>,
    /// Time trial: laps of the lead car per ladder step.
    pub laps_per_step: u32,
    pub initial_flag: Flag,
    pub pass_gap: f64,
    /// Defender laps the attacker has to complete a pass.
    pub pass_window_laps: f64,
    /// Raise WavingGreen for the attacker once the cars have settled.
    pub auto_waving_green: bool,
    pub settle_time: f64,
    /// Allowed deviation of the trailing gap from the planner setpoint while settling.
    pub settle_tolerance: f64,
    /// Allowed deviation of the defender from the round speed while settling.
    pub settle_speed_tolerance: f64,
    pub min_lateral_separation: f64,
    /// Cars closer than this along the track count as side by side.
    pub overlap_length: f64,
    pub stop_decel: f64,
    /// End the run this long after the ladder is exhausted; negative runs to `duration`.
    pub finish_delay: f64,
}

impl Default for RaceConfig {
    fn default() -> Self {
        RaceConfig {
            mode: RaceMode::TimeTrial,
            ladder_mph: vec![80.0],
            laps_per_step: 1,
            initial_flag: Flag::Green,
            pass_gap: 30.0,
            pass_window_laps: 2.0,
            auto_waving_green: true,
            settle_time: 3.0,
            settle_tolerance: 5.0,
            settle_speed_tolerance: 1.0,
            min_lateral_separation: 2.4,
            overlap_length: 6.0,
            stop_decel: 5.0,
            finish_delay: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Policy {
    /// Full autonomy stack.
    Stack,
    /// Compliant scripted car: holds its lane at `speed`, or at the round speed when absent.
    Hold {
        #[serde(default)]
        speed: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationMode {
    Ekf,
    /// Feeds the truth state to planning and control.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarConfig {
    pub name: String,
    #[serde(default)]
    pub role: Option<Role>,
    #[serde(default = "default_lane")]
    pub lane: LaneId,
    /// Start station along `lane`.
    #[serde(default)]
    pub start_s: f64,
    #[serde(default)]
    pub start_speed: f64,
    #[serde(default = "default_policy")]
    pub policy: Policy,
    #[serde(default = "default_localization")]
    pub localization: LocalizationMode,
    #[serde(default)]
    pub vehicle: VehicleParams,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub perception: PerceptionConfig,
    #[serde(default)]
    pub tracker: TrackerConfig,
    #[serde(default)]
    pub fusion: LocalizationConfig,
    #[serde(default)]
    pub gnss: GnssSimConfig,
}

fn default_lane() -> LaneId {
    LaneId::Inner
}

fn default_policy() -> Policy {
    Policy::Stack
}

fn default_localization() -> LocalizationMode {
    LocalizationMode::Ekf
}

/// Operator command replayed at sim time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCommand {
    pub t: f64,
    /// Defaults to the entry's position in the script, starting at 1.
    #[serde(default)]
    pub seq: Option<u32>,
    #[serde(flatten)]
    pub kind: CommandKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScriptedEvent {
    /// Lane change outside the race rules.
    LaneChange { t: f64, car: usize, lane: LaneId },
}

impl ScriptedEvent {
    pub fn time(&self) -> f64 {
        match self {
            ScriptedEvent::LaneChange { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogConfig {
    pub plant_period_ms: u64,
    pub localization_period_ms: u64,
    pub detections: bool,
    /// Distance beyond which a confirmed track counts as false.
    pub false_track_radius: f64,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            plant_period_ms: 10,
            localization_period_ms: 10,
            detections: true,
            false_track_radius: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    /// Invariant breaches make the run fail.
    #[serde(default = "yes")]
    pub strict: bool,
    #[serde(default)]
    pub track: TrackConfig,
    #[serde(default)]
    pub race: RaceConfig,
    pub cars: Vec<CarConfig>,
    #[serde(default)]
    pub operator: Vec<ScriptedCommand>,
    #[serde(default)]
    pub events: Vec<ScriptedEvent>,
    #[serde(default)]
    pub log: LogConfig,
    #[serde(default)]
    pub telemetry: PublisherConfig,
}

fn yes() -> bool {
    true
}

pub const BUNDLED: &[(&str, &str)] = &[
    ("time_trial", include_str!("../scenarios/time_trial.toml")),
    ("oval_60", include_str!("../scenarios/oval_60.toml")),
    ("lane_change", include_str!("../scenarios/lane_change.toml")),
    ("passing_competition", include_str!("../scenarios/passing_competition.toml")),
    ("gnss_degradation", include_str!("../scenarios/gnss_degradation.toml")),
    ("gnss_dual_failure", include_str!("../scenarios/gnss_dual_failure.toml")),
    ("detection_period", include_str!("../scenarios/detection_period.toml")),
    ("season_one_dropout", include_str!("../scenarios/season_one_dropout.toml")),
];

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self, ScenarioError> {
        let sc: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ScenarioError::Unknown(name.to_string()))?;
        Self::from_toml_str(text)
    }

    /// A bundled name, or else a path to a scenario file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ScenarioError> {
        if BUNDLED.iter().any(|(n, _)| *n == name_or_path) {
            return Self::bundled(name_or_path);
        }
        let p = Path::new(name_or_path);
        if p.exists() {
            Self::load(p)
        } else {
            Err(ScenarioError::Unknown(name_or_path.to_string()))
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad(format!("duration {} must be positive", self.duration));
        }
        if self.cars.is_empty() || self.cars.len() > 2 {
            return bad(format!("1 or 2 cars supported, got {}", self.cars.len()));
        }
        let r = &self.race;
        if r.ladder_mph.is_empty() || r.ladder_mph.iter().any(|v| !(*v >= 0.0)) {
            return bad("race.ladder_mph must be a non-empty list of speeds".into());
        }
        if !(r.stop_decel > 0.0 && r.pass_window_laps > 0.0 && r.laps_per_step > 0) {
            return bad("race.stop_decel, pass_window_laps and laps_per_step must be positive".into());
        }
        if r.mode == RaceMode::Passing {
            if self.cars.len() != 2 {
                return bad("passing mode needs exactly two cars".into());
            }
            let roles: Vec<_> = self.cars.iter().map(|c| c.role).collect();
            if !matches!(
                roles.as_slice(),
                [Some(Role::Attacker), Some(Role::Defender)] | [Some(Role::Defender), Some(Role::Attacker)]
            ) {
                return bad("passing mode needs one attacker and one defender".into());
            }
        }
        for (i, c) in self.cars.iter().enumerate() {
            let ctx = |e: String| ScenarioError::Invalid(format!("cars[{i}] ({}): {e}", c.name));
            c.vehicle.validate().map_err(|e| ctx(e.to_string()))?;
            c.controller.validate().map_err(ctx)?;
            c.planner.validate().map_err(ctx)?;
            c.tracker.validate().map_err(ctx)?;
            c.perception.validate().map_err(|e| ctx(e.to_string()))?;
            if !matches!(c.lane, LaneId::Inner | LaneId::Outer) {
                return Err(ctx("lane must be inner or outer".into()));
            }
            if !(c.start_speed >= 0.0) {
                return Err(ctx("start_speed must be non-negative".into()));
            }
        }
        for e in &self.events {
            let ScriptedEvent::LaneChange { car, lane, .. } = *e;
            if car >= self.cars.len() || !matches!(lane, LaneId::Inner | LaneId::Outer) {
                return bad(format!("lane_change event {e:?} names a missing car or lane"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_scenario_parses() {
        for (name, _) in BUNDLED {
            let sc = Scenario::bundled(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(sc.name, *name);
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let text = "name = \"x\"\nduration = 1.0\nbogus_key = 3\n[[cars]]\nname = \"a\"\n";
        let err = Scenario::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("bogus_key"), "{err}");
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn nested_unknown_key_is_named() {
        let text = "name = \"x\"\nduration = 1.0\n[[cars]]\nname = \"a\"\n[cars.planner]\nk_gapp = 1.0\n";
        let err = Scenario::from_toml_str(text).unwrap_err().to_string();
        assert!(err.contains("k_gapp"), "{err}");
    }

    #[test]
    fn passing_mode_needs_both_roles() {
        let text = "name = \"x\"\nduration = 1.0\n[race]\nmode = \"passing\"\n\
                    [[cars]]\nname = \"a\"\nrole = \"attacker\"\n[[cars]]\nname = \"b\"\nrole = \"attacker\"\n";
        assert!(matches!(Scenario::from_toml_str(text), Err(ScenarioError::Invalid(_))));
    }

    #[test]
    fn operator_script_parses_flattened_commands() {
        let text = "name = \"x\"\nduration = 1.0\n[[cars]]\nname = \"a\"\n\
                    [[operator]]\nt = 0.5\nkind = \"set_flag\"\nflag = \"waving_green\"\ncar = \"all\"\n\
                    [[operator]]\nt = 0.7\nseq = 9\nkind = \"emergency_stop\"\n";
        let sc = Scenario::from_toml_str(text).unwrap();
        assert_eq!(
            sc.operator[0].kind,
            CommandKind::SetFlag {
                flag: Flag::WavingGreen,
                car: crate::telemetry::CarSelector::All
            }
        );
        assert_eq!(sc.operator[1].seq, Some(9));
    }
}
