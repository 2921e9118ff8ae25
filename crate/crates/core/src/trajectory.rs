use serde::Serialize;

use crate::track::{LaneId, Raceline, Station};

/// Velocity-profiled path handed from planning to control.
#[derive(Debug, Clone)]
pub struct PlannedTrajectory {
    pub path: Raceline,
    /// Target speed at each path sample.
    pub speeds: Vec<f64>,
    pub stamp: f64,
}

/// One point of a [`PlannedTrajectory`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub kappa: f64,
    pub v_target: f64,
    pub s: f64,
}

impl PlannedTrajectory {
    pub fn new(path: Raceline, speeds: Vec<f64>, stamp: f64) -> Self {
        debug_assert_eq!(path.samples().len(), speeds.len());
        PlannedTrajectory { path, speeds, stamp }
    }

    /// Constant-speed trajectory along the given stations.
    pub fn from_stations(
        lane: LaneId,
        stations: &[Station],
        speed: f64,
        stamp: f64,
    ) -> Result<Self, crate::track::TrackError> {
        let path = Raceline::open_from_stations(lane, stations)?;
        let n = path.samples().len();
        Ok(PlannedTrajectory::new(path, vec![speed; n], stamp))
    }

    pub fn lane(&self) -> LaneId {
        self.path.lane()
    }

    pub fn horizon_length(&self) -> f64 {
        self.path.total_length()
    }

    pub fn points(&self) -> impl Iterator<Item = TrajectoryPoint> + '_ {
        self.path
            .samples()
            .iter()
            .zip(&self.speeds)
            .map(|(st, &v)| TrajectoryPoint {
                x: st.x,
                y: st.y,
                psi: st.psi,
                kappa: st.kappa,
                v_target: v,
                s: st.s,
            })
    }

    /// Linearly interpolated target speed at path station `s`.
    pub fn speed_at(&self, s: f64) -> f64 {
        let samples = self.path.samples();
        let s = s.clamp(0.0, self.path.total_length());
        let i = samples.partition_point(|st| st.s <= s).clamp(1, samples.len() - 1);
        let (a, b) = (&samples[i - 1], &samples[i]);
        let t = if b.s > a.s { (s - a.s) / (b.s - a.s) } else { 0.0 };
        self.speeds[i - 1] + t * (self.speeds[i] - self.speeds[i - 1])
    }

    /// Checks non-negative speeds and the lateral-acceleration cap.
    pub fn satisfies_invariants(&self, a_lat_max: f64) -> bool {
        self.points()
            .all(|p| p.v_target >= 0.0 && p.v_target * p.v_target * p.kappa.abs() <= a_lat_max * (1.0 + 1e-9))
    }
}
