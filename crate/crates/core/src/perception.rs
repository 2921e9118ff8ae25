//! Synthetic opponent detections with configurable noise, false positives and dropout.
//!
//! Camera range comes from the pinhole relation `depth = H f / h`: the true
//! depth is turned into a pixel height, corrupted with pixel-space noise and
//! inverted again, so world-space error grows with range.

use nalgebra::{Matrix2, Rotation2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::VehicleState;
use crate::math::wrap_angle;

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("pixel height must be positive, got {0}")]
    NonPositivePixelHeight(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("focal length and object height must be positive")]
    BadOptics,
    #[error("invalid perception config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorSource {
    Lidar,
    Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Sensing instant, not delivery time.
    pub timestamp: f64,
    pub source: SensorSource,
    pub x: f64,
    pub y: f64,
    /// Orientation, LiDAR only.
    pub psi: Option<f64>,
    pub confidence: f64,
    /// Row-major 2x2 position covariance.
    pub covariance: [[f64; 2]; 2],
    /// Ground-truth label for evaluation. Never read by the tracker.
    pub spurious: bool,
}

impl Detection {
    pub fn covariance_matrix(&self) -> Matrix2<f64> {
        let c = self.covariance;
        Matrix2::new(c[0][0], c[0][1], c[1][0], c[1][1])
    }
}

/// Uniform confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfidenceRange {
    pub lo: f64,
    pub hi: f64,
}

impl ConfidenceRange {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.hi > self.lo {
            rng.random_range(self.lo..self.hi)
        } else {
            self.lo
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub enabled: bool,
    pub period: f64,
    pub range: f64,
    /// LiDAR: position sigma. Camera: bearing-induced lateral sigma floor.
    pub position_sigma: f64,
    pub latency: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self::lidar()
    }
}

impl SensorConfig {
    pub fn lidar() -> Self {
        SensorConfig {
            enabled: true,
            period: 0.05,
            range: 100.0,
            position_sigma: 0.15,
            latency: 0.05,
        }
    }

    pub fn camera() -> Self {
        SensorConfig {
            enabled: false,
            period: 1.0 / 30.0,
            range: 200.0,
            position_sigma: 0.2,
            latency: 0.03,
        }
    }
}

/// Optional rear-wing blind spot: detections within `half_angle` of straight behind are lost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlindSpot {
    pub half_angle: f64,
}

fn default_camera() -> SensorConfig {
    SensorConfig::camera()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub lidar: SensorConfig,
    #[serde(default = "default_camera")]
    pub camera: SensorConfig,
    pub false_positive_rate: f64,
    pub dropout_rate: f64,
    /// Radius of the disc around the ego in which false positives appear.
    pub false_positive_radius: f64,
    pub lidar_psi_sigma: f64,
    pub camera_focal_px: f64,
    /// Known opponent height used by the pinhole model.
    pub target_height: f64,
    pub camera_pixel_sigma: f64,
    pub camera_bearing_sigma: f64,
    pub true_confidence: ConfidenceRange,
    pub false_confidence: ConfidenceRange,
    pub blind_spot: Option<BlindSpot>,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            lidar: SensorConfig::lidar(),
            camera: SensorConfig::camera(),
            false_positive_rate: 0.0,
            dropout_rate: 0.0,
            false_positive_radius: 80.0,
            lidar_psi_sigma: 0.02,
            camera_focal_px: 2000.0,
            target_height: 1.2,
            camera_pixel_sigma: 2.0,
            camera_bearing_sigma: 0.002,
            true_confidence: ConfidenceRange { lo: 0.6, hi: 1.0 },
            false_confidence: ConfidenceRange { lo: 0.2, hi: 0.8 },
            blind_spot: None,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        for (name, s) in [("lidar", &self.lidar), ("camera", &self.camera)] {
            if !(s.period > 0.0 && s.range > 0.0 && s.position_sigma >= 0.0 && s.latency >= 0.0) {
                return Err(PerceptionError::InvalidConfig(format!(
                    "{name}: period and range must be positive, sigma and latency non-negative"
                )));
            }
        }
        for (name, r) in [("false_positive_rate", self.false_positive_rate), ("dropout_rate", self.dropout_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(PerceptionError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.camera_focal_px > 0.0 && self.target_height > 0.0) {
            return Err(PerceptionError::BadOptics);
        }
        Ok(())
    }

    pub fn sensor(&self, source: SensorSource) -> &SensorConfig {
        match source {
            SensorSource::Lidar => &self.lidar,
            SensorSource::Camera => &self.camera,
        }
    }
}

/// Depth from pixel height: `H f / h`.
pub fn camera_depth(height_px: f64, f: f64, height_known: f64) -> Result<f64, PerceptionError> {
    if !(height_px > 0.0) {
        return Err(PerceptionError::NonPositivePixelHeight(height_px));
    }
    if !(f > 0.0 && height_known > 0.0) {
        return Err(PerceptionError::BadOptics);
    }
    Ok(height_known * f / height_px)
}

/// Pixel height of an object of height `height_known` at `depth`.
pub fn camera_pixel_height(depth: f64, f: f64, height_known: f64) -> Result<f64, PerceptionError> {
    if !(depth > 0.0) {
        return Err(PerceptionError::NonPositiveDepth(depth));
    }
    if !(f > 0.0 && height_known > 0.0) {
        return Err(PerceptionError::BadOptics);
    }
    Ok(height_known * f / depth)
}

const MIN_VARIANCE: f64 = 1e-6;

fn gaussian<R: Rng>(rng: &mut R, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).map(|n| n.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    }
}

/// True if `target` sits in the ego's rear blind-spot wedge.
pub fn in_blind_spot(ego: &VehicleState, target: (f64, f64), spot: &BlindSpot) -> bool {
    let bearing = (target.1 - ego.y).atan2(target.0 - ego.x) - ego.psi;
    wrap_angle(bearing - std::f64::consts::PI).abs() < spot.half_angle
}

/// One sensor frame. `sim_time` is the delivery instant; detections are stamped
/// `sim_time - latency` and describe the given (sensing-instant) states.
pub fn simulate_frame<R: Rng>(
    ego: &VehicleState,
    opponent: Option<&VehicleState>,
    cfg: &PerceptionConfig,
    source: SensorSource,
    sim_time: f64,
    rng: &mut R,
) -> Vec<Detection> {
    let sensor = cfg.sensor(source);
    let stamp = sim_time - sensor.latency;
    let mut out = Vec::with_capacity(2);

    // fixed draw order keeps streams aligned between runs that differ only in outcomes
    let dropped = rng.random::<f64>() < cfg.dropout_rate;
    let spurious = rng.random::<f64>() < cfg.false_positive_rate;

    if let Some(opp) = opponent {
        let rel = (opp.x - ego.x, opp.y - ego.y);
        let range = rel.0.hypot(rel.1);
        let visible = range <= sensor.range
            && range > 0.0
            && !cfg.blind_spot.is_some_and(|b| in_blind_spot(ego, (opp.x, opp.y), &b));
        if visible && !dropped {
            let det = match source {
                SensorSource::Lidar => lidar_detection(opp, sensor, cfg, stamp, rng),
                SensorSource::Camera => camera_detection(ego, opp, range, sensor, cfg, stamp, rng),
            };
            out.extend(det);
        }
    }

    if spurious {
        let r = cfg.false_positive_radius * rng.random::<f64>().sqrt();
        let theta = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let var = sensor.position_sigma.powi(2).max(MIN_VARIANCE);
        out.push(Detection {
            timestamp: stamp,
            source,
            x: ego.x + r * theta.cos(),
            y: ego.y + r * theta.sin(),
            psi: match source {
                SensorSource::Lidar => Some(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI)),
                SensorSource::Camera => None,
            },
            confidence: cfg.false_confidence.sample(rng),
            covariance: [[var, 0.0], [0.0, var]],
            spurious: true,
        });
    }
    out
}

fn lidar_detection<R: Rng>(
    opp: &VehicleState,
    sensor: &SensorConfig,
    cfg: &PerceptionConfig,
    stamp: f64,
    rng: &mut R,
) -> Option<Detection> {
    let sigma = sensor.position_sigma;
    let var = (sigma * sigma).max(MIN_VARIANCE);
    Some(Detection {
        timestamp: stamp,
        source: SensorSource::Lidar,
        x: opp.x + gaussian(rng, sigma),
        y: opp.y + gaussian(rng, sigma),
        psi: Some(wrap_angle(opp.psi + gaussian(rng, cfg.lidar_psi_sigma))),
        confidence: cfg.true_confidence.sample(rng),
        covariance: [[var, 0.0], [0.0, var]],
        spurious: false,
    })
}

fn camera_detection<R: Rng>(
    ego: &VehicleState,
    opp: &VehicleState,
    range: f64,
    sensor: &SensorConfig,
    cfg: &PerceptionConfig,
    stamp: f64,
    rng: &mut R,
) -> Option<Detection> {
    let (f, h) = (cfg.camera_focal_px, cfg.target_height);
    let px = camera_pixel_height(range, f, h).ok()? + gaussian(rng, cfg.camera_pixel_sigma);
    let depth = camera_depth(px, f, h).ok()?;
    let bearing = (opp.y - ego.y).atan2(opp.x - ego.x) + gaussian(rng, cfg.camera_bearing_sigma);
    // first-order propagation of pixel noise: d(depth)/d(px) = -H f / px^2 = -depth^2 / (H f)
    let sigma_r = (range * range * cfg.camera_pixel_sigma / (h * f)).max(sensor.position_sigma);
    let sigma_t = (range * cfg.camera_bearing_sigma).max(sensor.position_sigma);
    let rot = Rotation2::new(bearing);
    let local = Matrix2::new(sigma_r * sigma_r, 0.0, 0.0, sigma_t * sigma_t);
    let mut cov = rot.matrix() * local * rot.matrix().transpose();
    cov[(0, 0)] = cov[(0, 0)].max(MIN_VARIANCE);
    cov[(1, 1)] = cov[(1, 1)].max(MIN_VARIANCE);
    let sym = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    Some(Detection {
        timestamp: stamp,
        source: SensorSource::Camera,
        x: ego.x + depth * bearing.cos(),
        y: ego.y + depth * bearing.sin(),
        psi: None,
        confidence: cfg.true_confidence.sample(rng),
        covariance: [[cov[(0, 0)], sym], [sym, cov[(1, 1)]]],
        spurious: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quiet() -> PerceptionConfig {
        let mut cfg = PerceptionConfig::default();
        cfg.lidar.position_sigma = 0.0;
        cfg.lidar_psi_sigma = 0.0;
        cfg.camera_pixel_sigma = 0.0;
        cfg.camera_bearing_sigma = 0.0;
        cfg.camera.position_sigma = 0.0;
        cfg
    }

    #[test]
    fn pinhole_examples() {
        assert!((camera_depth(240.0, 2000.0, 1.2).unwrap() - 10.0).abs() < 1e-12);
        assert!((camera_pixel_height(10.0, 2000.0, 1.2).unwrap() - 240.0).abs() < 1e-12);
        for d in [3.0, 17.5, 99.0, 180.0] {
            let h = camera_pixel_height(d, 2000.0, 1.2).unwrap();
            assert!((camera_depth(h, 2000.0, 1.2).unwrap() - d).abs() / d < 1e-9);
        }
        assert!(camera_depth(0.0, 2000.0, 1.2).is_err());
        assert!(camera_pixel_height(-1.0, 2000.0, 1.2).is_err());
        let h10 = camera_pixel_height(10.0, 2000.0, 1.2).unwrap();
        let h20 = camera_pixel_height(20.0, 2000.0, 1.2).unwrap();
        assert!((h10 / h20 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pixel_noise_error_scales_with_range_squared() {
        let err = |d: f64| {
            let h = camera_pixel_height(d, 2000.0, 1.2).unwrap();
            camera_depth(h - 1.0, 2000.0, 1.2).unwrap() - d
        };
        // linearization oracle: delta_depth = d^2 / (H f) per pixel
        let ratio = err(100.0) / err(10.0);
        let lin = (100.0f64 * 100.0) / (10.0 * 10.0);
        assert!((ratio - lin).abs() / lin < 0.1, "ratio {ratio}");
    }

    #[test]
    fn out_of_range_gives_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ego = VehicleState::rolling(0.0, 0.0, 0.0, 30.0);
        let opp = VehicleState::rolling(150.0, 0.0, 0.0, 30.0);
        assert!(simulate_frame(&ego, Some(&opp), &quiet(), SensorSource::Lidar, 1.0, &mut rng).is_empty());
    }

    #[test]
    fn noiseless_detection_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ego = VehicleState::rolling(0.0, 0.0, 0.0, 30.0);
        let opp = VehicleState::rolling(50.0, 0.0, 0.1, 30.0);
        for source in [SensorSource::Lidar, SensorSource::Camera] {
            let dets = simulate_frame(&ego, Some(&opp), &quiet(), source, 2.0, &mut rng);
            assert_eq!(dets.len(), 1);
            assert!((dets[0].x - 50.0).abs() < 1e-9 && dets[0].y.abs() < 1e-9);
            let latency = quiet().sensor(source).latency;
            assert_eq!(dets[0].timestamp, 2.0 - latency);
            assert_eq!(dets[0].psi.is_some(), source == SensorSource::Lidar);
            assert!(dets[0].covariance_matrix().cholesky().is_some());
        }
    }

    #[test]
    fn probability_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = quiet();
        cfg.false_positive_rate = 1.0;
        cfg.dropout_rate = 1.0;
        let ego = VehicleState::rolling(0.0, 0.0, 0.0, 30.0);
        let opp = VehicleState::rolling(20.0, 0.0, 0.0, 30.0);
        for _ in 0..100 {
            let dets = simulate_frame(&ego, Some(&opp), &cfg, SensorSource::Lidar, 0.0, &mut rng);
            assert_eq!(dets.len(), 1);
            assert!(dets[0].spurious);
            assert!(dets[0].x.hypot(dets[0].y) <= 80.0);
        }
    }

    #[test]
    fn empirical_false_positive_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cfg = quiet();
        cfg.false_positive_rate = 0.1;
        let ego = VehicleState::rolling(0.0, 0.0, 0.0, 30.0);
        let n = 10_000;
        let fp: usize = (0..n)
            .map(|_| simulate_frame(&ego, None, &cfg, SensorSource::Lidar, 0.0, &mut rng).len())
            .sum();
        assert!((fp as f64 / n as f64 - 0.1).abs() < 0.02);
    }

    #[test]
    fn blind_spot_drops_rear_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = quiet();
        cfg.blind_spot = Some(BlindSpot { half_angle: 0.3 });
        let ego = VehicleState::rolling(0.0, 0.0, 0.0, 30.0);
        let behind = VehicleState::rolling(-20.0, 1.0, 0.0, 30.0);
        let ahead = VehicleState::rolling(20.0, 1.0, 0.0, 30.0);
        assert!(simulate_frame(&ego, Some(&behind), &cfg, SensorSource::Lidar, 0.0, &mut rng).is_empty());
        assert_eq!(simulate_frame(&ego, Some(&ahead), &cfg, SensorSource::Lidar, 0.0, &mut rng).len(), 1);
    }
}
