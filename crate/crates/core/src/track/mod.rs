//! Oval track geometry: waypoint-interpolated racelines, lanes and bounds.
//!
//! Travel is counter-clockwise, so the infield is on the left. The inner lane
//! sits a quarter width to the left of the centerline and the outer lane a
//! quarter width to the right.

mod bounds;
mod raceline;
pub mod spline;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bounds::{in_track_bounds, Boundary, TrackBounds};
pub use raceline::{
    build_raceline, LaneId, LookaheadTarget, Projection, Raceline, Station, Waypoint,
};

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("too few waypoints: got {0}, need at least 4")]
    TooFewWaypoints(usize),
    #[error("sample spacing {0} m outside (0.1, 10]")]
    InvalidSampleSpacing(f64),
    #[error("waypoint {0} is not finite")]
    NonFiniteWaypoint(usize),
    #[error("waypoints {0} and its successor are closer than 0.1 m")]
    CoincidentWaypoints(usize),
    #[error("raceline self-intersects between stations {s_a:.2} m and {s_b:.2} m")]
    SelfIntersecting { s_a: f64, s_b: f64 },
    #[error("invalid track config: {0}")]
    InvalidConfig(String),
    #[error("cannot read track file: {0}")]
    Io(String),
    #[error("cannot parse track file: {0}")]
    Parse(String),
}

/// Stadium oval: two straights joined by two semicircles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StadiumSpec {
    pub straight_length: f64,
    pub turn_radius: f64,
    /// Target spacing between generated waypoints.
    #[serde(default = "default_waypoint_spacing")]
    pub waypoint_spacing: f64,
}

fn default_waypoint_spacing() -> f64 {
    20.0
}

fn default_sample_spacing() -> f64 {
    1.0
}

/// Track definition file contents.
///
/// The centerline comes either from `stadium` or from an explicit `centerline`
/// list. Lanes and walls default to offsets of the centerline but can be given
/// explicitly as waypoint lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackConfig {
    #[serde(default)]
    pub name: String,
    pub width: f64,
    #[serde(default = "default_sample_spacing")]
    pub sample_spacing: f64,
    #[serde(default)]
    pub stadium: Option<StadiumSpec>,
    #[serde(default)]
    pub centerline: Option<Vec<Waypoint>>,
    #[serde(default)]
    pub inner_lane: Option<Vec<Waypoint>>,
    #[serde(default)]
    pub outer_lane: Option<Vec<Waypoint>>,
    #[serde(default)]
    pub inner_boundary: Option<Vec<Waypoint>>,
    #[serde(default)]
    pub outer_boundary: Option<Vec<Waypoint>>,
}

impl Default for TrackConfig {
    /// Stadium approximating a 1.5 mile oval: 300 m straights, 190 m turns, 15 m wide.
    fn default() -> Self {
        TrackConfig {
            name: "lvms_stadium".into(),
            width: 15.0,
            sample_spacing: 1.0,
            stadium: Some(StadiumSpec {
                straight_length: 300.0,
                turn_radius: 190.0,
                waypoint_spacing: 20.0,
            }),
            centerline: None,
            inner_lane: None,
            outer_lane: None,
            inner_boundary: None,
            outer_boundary: None,
        }
    }
}

impl TrackConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, TrackError> {
        toml::from_str(text).map_err(|e| TrackError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, TrackError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrackError::Io(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

/// Waypoints around a counter-clockwise stadium whose straights run along x.
///
/// The first waypoint is the middle of the bottom straight at `(0, -radius)`.
/// Straight/turn junctions are always waypoints.
pub fn stadium_waypoints(straight_length: f64, radius: f64, spacing: f64) -> Vec<Waypoint> {
    let half = straight_length / 2.0;
    let pi = std::f64::consts::PI;
    let mut out = Vec::new();
    let mut piece = |len: f64, at: &dyn Fn(f64) -> (f64, f64)| {
        let n = (len / spacing).ceil().max(1.0) as usize;
        for k in 0..n {
            let p = at(len * k as f64 / n as f64);
            out.push(Waypoint::new(p.0, p.1));
        }
    };
    if half > 0.0 {
        piece(half, &|d| (d, -radius));
    }
    piece(pi * radius, &|d| {
        let a = -pi / 2.0 + d / radius;
        (half + radius * a.cos(), radius * a.sin())
    });
    if half > 0.0 {
        piece(straight_length, &|d| (half - d, radius));
    }
    piece(pi * radius, &|d| {
        let a = pi / 2.0 + d / radius;
        (-half + radius * a.cos(), radius * a.sin())
    });
    if half > 0.0 {
        piece(half, &|d| (-half + d, -radius));
    }
    out
}

/// Offsets every sample of `line` by `offset` meters along its left normal.
pub fn offset_points(line: &Raceline, offset: f64) -> Vec<(f64, f64)> {
    let samples = line.samples();
    let n = if line.is_closed() { samples.len() - 1 } else { samples.len() };
    samples[..n]
        .iter()
        .map(|st| (st.x - offset * st.psi.sin(), st.y + offset * st.psi.cos()))
        .collect()
}

/// The complete track: centerline, two lanes and the drivable region.
#[derive(Debug, Clone)]
pub struct Track {
    pub name: String,
    pub centerline: Raceline,
    pub inner_lane: Raceline,
    pub outer_lane: Raceline,
    pub bounds: TrackBounds,
    pub width: f64,
}

impl Track {
    pub fn from_config(cfg: &TrackConfig) -> Result<Track, TrackError> {
        if !(cfg.width.is_finite() && cfg.width > 0.0) {
            return Err(TrackError::InvalidConfig(format!("width {} must be positive", cfg.width)));
        }
        let centre_wps = match (&cfg.stadium, &cfg.centerline) {
            (Some(st), None) => {
                if !(st.turn_radius > cfg.width && st.straight_length >= 0.0 && st.waypoint_spacing > 0.0) {
                    return Err(TrackError::InvalidConfig(
                        "stadium needs turn_radius > width, straight_length >= 0, waypoint_spacing > 0".into(),
                    ));
                }
                stadium_waypoints(st.straight_length, st.turn_radius, st.waypoint_spacing)
            }
            (None, Some(wps)) => wps.clone(),
            _ => {
                return Err(TrackError::InvalidConfig(
                    "exactly one of `stadium` or `centerline` must be given".into(),
                ))
            }
        };
        let centerline = build_raceline(LaneId::Center, &centre_wps, true, cfg.sample_spacing)?;
        let lane = |id: LaneId, explicit: &Option<Vec<Waypoint>>, offset: f64| -> Result<Raceline, TrackError> {
            match explicit {
                Some(wps) => build_raceline(id, wps, true, cfg.sample_spacing),
                None => Raceline::from_dense_points(id, &offset_points(&centerline, offset), true),
            }
        };
        let inner_lane = lane(LaneId::Inner, &cfg.inner_lane, cfg.width / 4.0)?;
        let outer_lane = lane(LaneId::Outer, &cfg.outer_lane, -cfg.width / 4.0)?;
        let wall = |explicit: &Option<Vec<Waypoint>>, offset: f64| -> Result<Boundary, TrackError> {
            match explicit {
                Some(wps) => Ok(Boundary::from_raceline(&build_raceline(
                    LaneId::Center,
                    wps,
                    true,
                    cfg.sample_spacing,
                )?)),
                None => Ok(Boundary::from_points(offset_points(&centerline, offset))),
            }
        };
        let bounds = TrackBounds {
            inner: wall(&cfg.inner_boundary, cfg.width / 2.0)?,
            outer: wall(&cfg.outer_boundary, -cfg.width / 2.0)?,
            width: cfg.width,
        };
        if !bounds.outer_encloses_inner() {
            return Err(TrackError::InvalidConfig("outer boundary does not enclose inner boundary".into()));
        }
        Ok(Track {
            name: cfg.name.clone(),
            centerline,
            inner_lane,
            outer_lane,
            bounds,
            width: cfg.width,
        })
    }

    /// Rejects tracks too narrow for two cars side by side.
    pub fn check_vehicle_width(&self, vehicle_width: f64) -> Result<(), TrackError> {
        if self.width > 2.0 * vehicle_width {
            Ok(())
        } else {
            Err(TrackError::InvalidConfig(format!(
                "track width {} m must exceed twice the vehicle width {} m",
                self.width, vehicle_width
            )))
        }
    }

    pub fn lane(&self, id: LaneId) -> &Raceline {
        match id {
            LaneId::Inner => &self.inner_lane,
            LaneId::Outer => &self.outer_lane,
            LaneId::Center | LaneId::Merge => &self.centerline,
        }
    }

    pub fn length(&self) -> f64 {
        self.centerline.total_length()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn stadium_perimeter() {
        let wps = stadium_waypoints(300.0, 100.0, 50.0);
        let line = build_raceline(LaneId::Center, &wps, true, 1.0).unwrap();
        let expect = 600.0 + 2.0 * PI * 100.0;
        assert!((line.total_length() - expect).abs() / expect < 0.01);
    }

    #[test]
    fn default_track_lanes_and_bounds() {
        let t = Track::from_config(&TrackConfig::default()).unwrap();
        let r = 190.0;
        let l = 600.0 + 2.0 * PI * r;
        assert!((t.length() - l).abs() / l < 1e-3);
        // inner lane is shorter by 2*pi*w/4
        let li = t.inner_lane.total_length();
        assert!((li - (l - 2.0 * PI * 3.75)).abs() < 1.0, "inner {}", li);
        assert!(t.bounds.contains((0.0, -190.0)));
        assert!(!t.bounds.contains((0.0, -190.0 - 17.5)));
        assert!(!t.bounds.contains((0.0, 0.0)));
        let p = t.inner_lane.closest_point(0.0, -190.0);
        assert!((p.lateral + 3.75).abs() < 1e-3);
        t.check_vehicle_width(1.9).unwrap();
    }

    #[test]
    fn config_round_trip_and_unknown_key() {
        let text = toml::to_string(&TrackConfig::default()).unwrap();
        assert_eq!(TrackConfig::from_toml_str(&text).unwrap(), TrackConfig::default());
        let err = TrackConfig::from_toml_str("width = 15.0\nwidht = 3\n").unwrap_err();
        assert!(matches!(err, TrackError::Parse(m) if m.contains("widht")));
    }
}
