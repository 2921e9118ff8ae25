//! Opponent tracking: confidence and bounds filtering, greedy Mahalanobis
//! association, constant-velocity Kalman fusion, and birth/death rules.
//!
//! Detections pass through a timestamp-sorted reorder buffer before fusion,
//! so modest out-of-order delivery does not change the result.

use nalgebra::{Matrix2, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::wrap_angle;
use crate::perception::{Detection, SensorSource};
use crate::track::TrackBounds;

pub type State5 = SVector<f64, 5>;
pub type Cov5 = SMatrix<f64, 5, 5>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("innovation covariance is singular for track {0}")]
    SingularInnovation(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub confidence_threshold: f64,
    /// Mahalanobis distance beyond which a pair is never associated.
    pub association_gate: f64,
    pub birth_hits: u32,
    pub death_timeout: f64,
    /// A tentative track not re-associated within this time is discarded.
    pub tentative_window: f64,
    /// White-noise acceleration spectral density, m^2/s^3.
    pub accel_noise: f64,
    /// Heading random-walk density, rad^2/s.
    pub heading_noise: f64,
    /// Initial velocity standard deviation of a new track.
    pub birth_velocity_sigma: f64,
    pub lidar_heading_sigma: f64,
    pub reorder_window: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            confidence_threshold: 0.5,
            association_gate: 5.0,
            birth_hits: 2,
            death_timeout: 5.0,
            tentative_window: 0.1,
            accel_noise: 60.0,
            heading_noise: 0.5,
            birth_velocity_sigma: 40.0,
            lidar_heading_sigma: 0.05,
            reorder_window: 0.1,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.birth_hits < 1 {
            return Err("birth_hits must be at least 1".into());
        }
        if !(self.death_timeout > 0.0 && self.tentative_window > 0.0) {
            return Err("death_timeout and tentative_window must be positive".into());
        }
        if !(self.association_gate > 0.0 && self.reorder_window >= 0.0) {
            return Err("association_gate must be positive and reorder_window non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackedAgent {
    pub id: u64,
    /// `(x, y, x_dot, y_dot, psi)`.
    pub state: State5,
    pub covariance: Cov5,
    pub status: TrackStatus,
    pub consecutive_hits: u32,
    /// Time of the last associated detection.
    pub last_update: f64,
    /// Time the state refers to.
    pub stamp: f64,
}

impl TrackedAgent {
    pub fn position(&self) -> (f64, f64) {
        (self.state[0], self.state[1])
    }

    pub fn speed(&self) -> f64 {
        self.state[2].hypot(self.state[3])
    }

    pub fn is_confirmed(&self) -> bool {
        self.status == TrackStatus::Confirmed
    }

    /// Copy of the track propagated to time `t` (no-op for `t <= stamp`).
    pub fn predicted_to(&self, t: f64, cfg: &TrackerConfig) -> TrackedAgent {
        let mut out = self.clone();
        predict_track(&mut out, t - self.stamp, cfg);
        out
    }
}

fn position_h() -> SMatrix<f64, 2, 5> {
    SMatrix::<f64, 2, 5>::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0)
}

/// Keeps detections with confidence at least the threshold that lie inside the track.
pub fn filter_detections(dets: &[Detection], cfg: &TrackerConfig, bounds: &TrackBounds) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.confidence >= cfg.confidence_threshold && bounds.contains((d.x, d.y)))
        .cloned()
        .collect()
}

/// `sqrt(v' S^-1 v)` with `v` the position innovation and `S = H P H' + R`.
pub fn mahalanobis(det: &Detection, track: &TrackedAgent) -> Result<f64, TrackerError> {
    let h = position_h();
    let s = h * track.covariance * h.transpose() + det.covariance_matrix();
    let nu = Vector2::new(det.x - track.state[0], det.y - track.state[1]);
    let chol = s.cholesky().ok_or(TrackerError::SingularInnovation(track.id))?;
    Ok(nu.dot(&chol.solve(&nu)).max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    /// `(detection index, track index)`.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Greedy assignment on a precomputed distance matrix (`rows` = detections).
/// Ties break toward lower detection, then lower track index.
pub fn greedy_assign(dist: &[Vec<f64>], n_tracks: usize, gate: f64) -> Association {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, row) in dist.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            if d <= gate {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; dist.len()];
    let mut trk_used = vec![false; n_tracks];
    let mut matches = Vec::new();
    for (_, i, j) in pairs {
        if !det_used[i] && !trk_used[j] {
            det_used[i] = true;
            trk_used[j] = true;
            matches.push((i, j));
        }
    }
    Association {
        matches,
        unmatched_dets: (0..dist.len()).filter(|&i| !det_used[i]).collect(),
        unmatched_tracks: (0..n_tracks).filter(|&j| !trk_used[j]).collect(),
    }
}

/// Greedy Mahalanobis association. Tracks should already be predicted to the detection time.
pub fn associate(dets: &[Detection], tracks: &[TrackedAgent], cfg: &TrackerConfig) -> Association {
    let dist: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| {
            tracks
                .iter()
                .map(|t| mahalanobis(d, t).unwrap_or(f64::INFINITY))
                .collect()
        })
        .collect();
    greedy_assign(&dist, tracks.len(), cfg.association_gate)
}

/// Constant-velocity propagation by `dt` with white-noise acceleration.
pub fn predict_track(track: &mut TrackedAgent, dt: f64, cfg: &TrackerConfig) {
    if !(dt > 0.0) {
        return;
    }
    let mut f = Cov5::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    let q = cfg.accel_noise;
    let (d2, d3) = (dt * dt / 2.0, dt * dt * dt / 3.0);
    let mut qm = Cov5::zeros();
    for (p, v) in [(0, 2), (1, 3)] {
        qm[(p, p)] = q * d3;
        qm[(p, v)] = q * d2;
        qm[(v, p)] = q * d2;
        qm[(v, v)] = q * dt;
    }
    qm[(4, 4)] = cfg.heading_noise * dt;
    track.state = f * track.state;
    track.covariance = f * track.covariance * f.transpose() + qm;
    track.stamp += dt;
}

pub fn predict_tracks(tracks: &mut [TrackedAgent], dt: f64, cfg: &TrackerConfig) {
    for t in tracks {
        predict_track(t, dt, cfg);
    }
}

/// Kalman update with one detection. Heading is only touched by LiDAR detections.
pub fn update_track(track: &TrackedAgent, det: &Detection, cfg: &TrackerConfig) -> TrackedAgent {
    let mut out = track.clone();
    let h = position_h();
    let r = det.covariance_matrix();
    let nu = Vector2::new(det.x - track.state[0], det.y - track.state[1]);
    joseph_update(&mut out.state, &mut out.covariance, &h, &r, &nu);
    if let (SensorSource::Lidar, Some(psi)) = (det.source, det.psi) {
        let h1 = SMatrix::<f64, 1, 5>::new(0.0, 0.0, 0.0, 0.0, 1.0);
        let r1 = SMatrix::<f64, 1, 1>::new(cfg.lidar_heading_sigma.powi(2));
        let nu1 = SMatrix::<f64, 1, 1>::new(wrap_angle(psi - out.state[4]));
        joseph_update(&mut out.state, &mut out.covariance, &h1, &r1, &nu1);
        out.state[4] = wrap_angle(out.state[4]);
    }
    out.consecutive_hits += 1;
    out.last_update = det.timestamp;
    out
}

fn joseph_update<const M: usize>(
    x: &mut State5,
    p: &mut Cov5,
    h: &SMatrix<f64, M, 5>,
    r: &SMatrix<f64, M, M>,
    nu: &SVector<f64, M>,
) {
    let s = h * *p * h.transpose() + r;
    let Some(s_inv) = s.try_inverse() else { return };
    let k = *p * h.transpose() * s_inv;
    *x += k * nu;
    let i_kh = Cov5::identity() - k * h;
    *p = i_kh * *p * i_kh.transpose() + k * r * k.transpose();
    *p = (*p + p.transpose()) * 0.5;
}

/// Starts a tentative track at a detection.
pub fn spawn_track(id: u64, det: &Detection, cfg: &TrackerConfig) -> TrackedAgent {
    let mut p = Cov5::zeros();
    let r = det.covariance_matrix();
    p.fixed_view_mut::<2, 2>(0, 0).copy_from(&r);
    let vv = cfg.birth_velocity_sigma.powi(2);
    p[(2, 2)] = vv;
    p[(3, 3)] = vv;
    let (psi, psi_var) = match (det.source, det.psi) {
        (SensorSource::Lidar, Some(psi)) => (psi, cfg.lidar_heading_sigma.powi(2)),
        _ => (0.0, std::f64::consts::PI.powi(2)),
    };
    p[(4, 4)] = psi_var;
    TrackedAgent {
        id,
        state: State5::new(det.x, det.y, 0.0, 0.0, psi),
        covariance: p,
        status: TrackStatus::Tentative,
        consecutive_hits: 1,
        last_update: det.timestamp,
        stamp: det.timestamp,
    }
}

/// Lifecycle events, reported for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TrackEvent {
    Born { id: u64, t: f64 },
    Confirmed { id: u64, t: f64 },
    Discarded { id: u64, t: f64 },
    Died { id: u64, t: f64 },
}

/// Applies the lifecycle rules at time `now`: drops stale tracks, promotes
/// tentative tracks that reached `birth_hits`, and spawns tracks for `unmatched`.
pub fn lifecycle(
    tracks: Vec<TrackedAgent>,
    unmatched: &[Detection],
    now: f64,
    cfg: &TrackerConfig,
    next_id: &mut u64,
    events: &mut Vec<TrackEvent>,
) -> Vec<TrackedAgent> {
    let mut out = Vec::with_capacity(tracks.len() + unmatched.len());
    for mut t in tracks {
        let silent = now - t.last_update;
        match t.status {
            TrackStatus::Tentative if silent > cfg.tentative_window => {
                events.push(TrackEvent::Discarded { id: t.id, t: now });
                continue;
            }
            TrackStatus::Confirmed if silent > cfg.death_timeout => {
                events.push(TrackEvent::Died { id: t.id, t: now });
                continue;
            }
            TrackStatus::Tentative if t.consecutive_hits >= cfg.birth_hits => {
                t.status = TrackStatus::Confirmed;
                events.push(TrackEvent::Confirmed { id: t.id, t: now });
            }
            _ => {}
        }
        out.push(t);
    }
    for det in unmatched {
        let id = *next_id;
        *next_id += 1;
        let mut t = spawn_track(id, det, cfg);
        events.push(TrackEvent::Born { id, t: det.timestamp });
        if t.consecutive_hits >= cfg.birth_hits {
            t.status = TrackStatus::Confirmed;
            events.push(TrackEvent::Confirmed { id, t: det.timestamp });
        }
        out.push(t);
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TrackerStats {
    pub received: u64,
    pub filtered_out: u64,
    pub late_dropped: u64,
    pub fused: u64,
}

/// Stateful tracker with the reorder buffer.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    bounds: TrackBounds,
    tracks: Vec<TrackedAgent>,
    pending: Vec<(f64, SensorSource, u64, Detection)>,
    arrival: u64,
    next_id: u64,
    fused_until: f64,
    stats: TrackerStats,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, bounds: TrackBounds) -> Self {
        Tracker {
            cfg,
            bounds,
            tracks: Vec::new(),
            pending: Vec::new(),
            arrival: 0,
            next_id: 1,
            fused_until: f64::NEG_INFINITY,
            stats: TrackerStats::default(),
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> &[TrackedAgent] {
        &self.tracks
    }

    pub fn stats(&self) -> TrackerStats {
        self.stats
    }

    /// Queues a detection. Ones older than already-fused data are dropped.
    pub fn ingest(&mut self, det: Detection) {
        self.stats.received += 1;
        if det.timestamp < self.fused_until {
            self.stats.late_dropped += 1;
            return;
        }
        self.arrival += 1;
        self.pending.push((det.timestamp, det.source, self.arrival, det));
    }

    /// Fuses every buffered detection stamped at or before `now - reorder_window`,
    /// one sweep (same source and stamp) at a time, then applies death rules at `now`.
    pub fn process(&mut self, now: f64) -> Vec<TrackEvent> {
        let mut events = Vec::new();
        let horizon = now - self.cfg.reorder_window;
        self.pending
            .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let ready = self.pending.partition_point(|p| p.0 <= horizon);
        let batch: Vec<_> = self.pending.drain(..ready).collect();
        let mut i = 0;
        while i < batch.len() {
            let (t, src) = (batch[i].0, batch[i].1);
            let mut j = i;
            while j < batch.len() && batch[j].0 == t && batch[j].1 == src {
                j += 1;
            }
            let sweep: Vec<Detection> = batch[i..j].iter().map(|p| p.3.clone()).collect();
            self.fuse_sweep(t, &sweep, &mut events);
            self.fused_until = t;
            i = j;
        }
        let tracks = std::mem::take(&mut self.tracks);
        self.tracks = lifecycle(tracks, &[], now, &self.cfg, &mut self.next_id, &mut events);
        events
    }

    fn fuse_sweep(&mut self, t: f64, sweep: &[Detection], events: &mut Vec<TrackEvent>) {
        let kept = filter_detections(sweep, &self.cfg, &self.bounds);
        self.stats.filtered_out += (sweep.len() - kept.len()) as u64;
        // stale tentatives go before they can be matched
        let tracks = std::mem::take(&mut self.tracks);
        let mut tracks = lifecycle(tracks, &[], t, &self.cfg, &mut self.next_id, events);
        for tr in tracks.iter_mut() {
            predict_track(tr, t - tr.stamp, &self.cfg);
        }
        let assoc = associate(&kept, &tracks, &self.cfg);
        for &(di, ti) in &assoc.matches {
            tracks[ti] = update_track(&tracks[ti], &kept[di], &self.cfg);
            self.stats.fused += 1;
        }
        let unmatched: Vec<Detection> = assoc.unmatched_dets.iter().map(|&i| kept[i].clone()).collect();
        self.tracks = lifecycle(tracks, &unmatched, t, &self.cfg, &mut self.next_id, events);
    }

    /// Confirmed tracks only, as published to planning.
    pub fn confirmed(&self) -> impl Iterator<Item = &TrackedAgent> {
        self.tracks.iter().filter(|t| t.is_confirmed())
    }

    /// The confirmed track with the most hits (lowest id on ties), predicted to `now`.
    pub fn best_opponent(&self, now: f64) -> Option<TrackedAgent> {
        self.confirmed()
            .max_by(|a, b| a.consecutive_hits.cmp(&b.consecutive_hits).then(b.id.cmp(&a.id)))
            .map(|t| t.predicted_to(now, &self.cfg))
    }
}

/// Position-only helper for tests and examples: 2x2 covariance from a sigma.
pub fn isotropic(sigma: f64) -> [[f64; 2]; 2] {
    let v = sigma * sigma;
    [[v, 0.0], [0.0, v]]
}

/// Innovation covariance `H P H' + R` for a detection against a track.
pub fn innovation_covariance(det: &Detection, track: &TrackedAgent) -> Matrix2<f64> {
    let h = position_h();
    h * track.covariance * h.transpose() + det.covariance_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{Track, TrackConfig};

    fn det(t: f64, x: f64, y: f64, sigma: f64) -> Detection {
        Detection {
            timestamp: t,
            source: SensorSource::Camera,
            x,
            y,
            psi: None,
            confidence: 0.9,
            covariance: isotropic(sigma),
            spurious: false,
        }
    }

    fn agent(state: [f64; 5], cov: Cov5) -> TrackedAgent {
        TrackedAgent {
            id: 1,
            state: State5::from_row_slice(&state),
            covariance: cov,
            status: TrackStatus::Confirmed,
            consecutive_hits: 2,
            last_update: 0.0,
            stamp: 0.0,
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let mut d = det(0.0, 3.0, 4.0, 0.0);
        d.covariance = [[1.0, 0.0], [0.0, 1.0]];
        let t = agent([0.0; 5], Cov5::zeros());
        assert!((mahalanobis(&d, &t).unwrap() - 5.0).abs() < 1e-12);
        d.covariance = [[4.0, 0.0], [0.0, 1.0]];
        d.x = 2.0;
        d.y = 0.0;
        assert!((mahalanobis(&d, &t).unwrap() - 1.0).abs() < 1e-12);
        d.x = 0.0;
        assert_eq!(mahalanobis(&d, &t).unwrap(), 0.0);
        d.covariance = [[0.0; 2]; 2];
        assert!(mahalanobis(&d, &t).is_err());
    }

    #[test]
    fn greedy_diagonal_and_gate() {
        let a = greedy_assign(&[vec![1.0, 10.0], vec![10.0, 1.0]], 2, 5.0);
        assert_eq!(a.matches, vec![(0, 0), (1, 1)]);
        let a = greedy_assign(&[vec![9.0]], 1, 5.0);
        assert!(a.matches.is_empty());
        assert_eq!(a.unmatched_dets, vec![0]);
        assert_eq!(a.unmatched_tracks, vec![0]);
        // globally smallest first even when it is not the first row's best
        let a = greedy_assign(&[vec![2.0, 3.0], vec![1.0, 4.0]], 2, 5.0);
        assert_eq!(a.matches, vec![(1, 0), (0, 1)]);
    }

    #[test]
    fn predict_examples() {
        let cfg = TrackerConfig::default();
        let mut t = agent([0.0, 0.0, 10.0, 0.0, 0.0], Cov5::identity());
        let before = t.clone();
        predict_track(&mut t, 0.0, &cfg);
        assert_eq!(t, before);
        predict_track(&mut t, 0.5, &cfg);
        assert_eq!((t.state[0], t.state[1]), (5.0, 0.0));
        assert!(t.covariance.trace() > before.covariance.trace());
    }

    #[test]
    fn zero_innovation_update() {
        let cfg = TrackerConfig::default();
        let t = agent([1.0, 2.0, 3.0, 4.0, 0.5], Cov5::identity());
        let u = update_track(&t, &det(0.0, 1.0, 2.0, 1e-3), &cfg);
        assert!((u.state - t.state).norm() < 1e-6);
        assert!(u.covariance.fixed_view::<2, 2>(0, 0).trace() < t.covariance.fixed_view::<2, 2>(0, 0).trace());
        // camera detection leaves heading and its variance alone
        assert_eq!(u.state[4], t.state[4]);
        assert_eq!(u.covariance[(4, 4)], t.covariance[(4, 4)]);
        assert_eq!(u.consecutive_hits, 3);
    }

    #[test]
    fn two_step_velocity_oracle() {
        // scalar CV filter by hand: prior velocity variance V, position noise r
        let cfg = TrackerConfig {
            accel_noise: 0.0,
            ..Default::default()
        };
        let r: f64 = 0.01;
        let d0 = det(0.0, 0.0, 0.0, r.sqrt());
        let t = spawn_track(1, &d0, &cfg);
        let mut t = t;
        predict_track(&mut t, 0.05, &cfg);
        let u = update_track(&t, &det(0.05, 1.0, 0.0, r.sqrt()), &cfg);
        let v = cfg.birth_velocity_sigma.powi(2);
        let dt: f64 = 0.05;
        let pxx = r + v * dt * dt;
        let pvx = v * dt;
        let k_v = pvx / (pxx + r);
        assert!((u.state[2] - k_v * 1.0).abs() < 1e-9);
        assert!(u.state[2] > 19.0 && u.state[2] < 20.0);
    }

    #[test]
    fn lifecycle_birth_confirm_death() {
        let cfg = TrackerConfig::default();
        let mut next = 1;
        let mut ev = Vec::new();
        let tracks = lifecycle(vec![], &[det(0.0, 0.0, 0.0, 0.2)], 0.0, &cfg, &mut next, &mut ev);
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].status, TrackStatus::Tentative);
        let u = update_track(&tracks[0], &det(0.05, 0.0, 0.0, 0.2), &cfg);
        let tracks = lifecycle(vec![u], &[], 0.05, &cfg, &mut next, &mut ev);
        assert_eq!(tracks[0].status, TrackStatus::Confirmed);
        let kept = lifecycle(tracks.clone(), &[], 0.05 + 4.99, &cfg, &mut next, &mut ev);
        assert_eq!(kept.len(), 1);
        let gone = lifecycle(tracks, &[], 0.05 + 5.1, &cfg, &mut next, &mut ev);
        assert!(gone.is_empty());
    }

    #[test]
    fn filtering_by_confidence_and_bounds() {
        let track = Track::from_config(&TrackConfig::default()).unwrap();
        let cfg = TrackerConfig::default();
        let mut a = det(0.0, 0.0, -190.0, 0.2);
        let mut b = a.clone();
        b.y = -190.0 - 17.5;
        let mut c = a.clone();
        c.confidence = 0.4;
        a.confidence = 0.9;
        b.confidence = 0.9;
        let out = filter_detections(&[a.clone(), b, c], &cfg, &track.bounds);
        assert_eq!(out, vec![a]);
    }

    #[test]
    fn reorder_buffer_hides_swapped_delivery() {
        let track = Track::from_config(&TrackConfig::default()).unwrap();
        let cfg = TrackerConfig::default();
        let dets: Vec<Detection> = (0..6).map(|k| det(0.05 * k as f64, 3.0 * k as f64, -190.0, 0.15)).collect();
        let run = |order: &[usize]| {
            let mut tr = Tracker::new(cfg.clone(), track.bounds.clone());
            for &k in order {
                tr.ingest(dets[k].clone());
            }
            tr.process(1.0);
            tr.tracks().to_vec()
        };
        let a = run(&[0, 1, 2, 3, 4, 5]);
        let b = run(&[0, 2, 1, 3, 5, 4]);
        assert_eq!(a.len(), 1);
        assert!((a[0].state - b[0].state).norm() < 1e-6);
    }
}
