//! Evaluation metrics computed from run-log records, and report files.
//!
//! Everything here is a pure function of the records, so a stored log yields
//! exactly the numbers computed during the run.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::log::{LogRecord, RaceEvent};
use crate::perception::SensorSource;
use crate::track::LaneId;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("log has no {0} rows")]
    Empty(&'static str),
}

/// Speed bracket of the cross-track table. Ranges include the upper edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub label: &'static str,
    pub lo: f64,
    pub hi: f64,
}

impl Bracket {
    pub fn contains(&self, v: f64) -> bool {
        v > self.lo && v <= self.hi
    }
}

pub const BRACKETS: [Bracket; 11] = [
    Bracket { label: ">10m/s", lo: 10.0, hi: f64::INFINITY },
    Bracket { label: ">60m/s", lo: 60.0, hi: f64::INFINITY },
    Bracket { label: "55-60m/s", lo: 55.0, hi: 60.0 },
    Bracket { label: "50-55m/s", lo: 50.0, hi: 55.0 },
    Bracket { label: "45-50m/s", lo: 45.0, hi: 50.0 },
    Bracket { label: "40-45m/s", lo: 40.0, hi: 45.0 },
    Bracket { label: "35-40m/s", lo: 35.0, hi: 40.0 },
    Bracket { label: "30-35m/s", lo: 30.0, hi: 35.0 },
    Bracket { label: "25-30m/s", lo: 25.0, hi: 30.0 },
    Bracket { label: "20-25m/s", lo: 20.0, hi: 25.0 },
    Bracket { label: "10-20m/s", lo: 10.0, hi: 20.0 },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketRow {
    pub label: String,
    pub samples: usize,
    /// Mean |CTE|; `None` when the bracket is empty.
    pub mean: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BracketedCte {
    pub car: usize,
    pub rows: Vec<BracketRow>,
}

impl BracketedCte {
    pub fn get(&self, label: &str) -> Option<&BracketRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Mean and max |CTE| per speed bracket over the controller rows of `car`.
pub fn compute_cte_brackets(records: &[LogRecord], car: usize) -> Result<BracketedCte, MetricsError> {
    let mut acc = [(0usize, 0.0f64, 0.0f64); BRACKETS.len()];
    let mut any = false;
    for r in records {
        let LogRecord::Controller(c) = r else { continue };
        if c.car != car {
            continue;
        }
        any = true;
        for (b, a) in BRACKETS.iter().zip(acc.iter_mut()) {
            if b.contains(c.speed) {
                a.0 += 1;
                a.1 += c.cte.abs();
                a.2 = a.2.max(c.cte.abs());
            }
        }
    }
    if !any {
        return Err(MetricsError::Empty("controller"));
    }
    let rows = BRACKETS
        .iter()
        .zip(acc)
        .map(|(b, (n, sum, max))| BracketRow {
            label: b.label.to_string(),
            samples: n,
            mean: (n > 0).then(|| sum / n as f64),
            max: (n > 0).then_some(max),
        })
        .collect();
    Ok(BracketedCte { car, rows })
}

/// CTE summary of the controller rows of `car` accepted by `keep`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CteSummary {
    pub samples: usize,
    pub mean_abs: f64,
    pub max_abs: f64,
}

pub fn cte_summary(
    records: &[LogRecord],
    car: usize,
    keep: impl Fn(&crate::log::ControllerRecord) -> bool,
) -> Option<CteSummary> {
    let (mut n, mut sum, mut max) = (0usize, 0.0, 0.0f64);
    for r in records {
        let LogRecord::Controller(c) = r else { continue };
        if c.car == car && keep(c) {
            n += 1;
            sum += c.cte.abs();
            max = max.max(c.cte.abs());
        }
    }
    (n > 0).then(|| CteSummary {
        samples: n,
        mean_abs: sum / n as f64,
        max_abs: max,
    })
}

/// CTE while following a merge trajectory.
pub fn merge_cte(records: &[LogRecord], car: usize) -> Option<CteSummary> {
    cte_summary(records, car, |c| c.lane == LaneId::Merge)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GgSample {
    pub t: f64,
    pub a_lat: f64,
    pub a_long: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GgStats {
    pub car: usize,
    pub max_abs_lat: f64,
    pub max_abs_long: f64,
    /// Largest combined acceleration magnitude.
    pub max_combined: f64,
    pub samples: Vec<GgSample>,
}

pub fn compute_gg(records: &[LogRecord], car: usize) -> Result<GgStats, MetricsError> {
    let samples: Vec<GgSample> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Plant(p) if p.car == car => Some(GgSample {
                t: p.t,
                a_lat: p.a_lat,
                a_long: p.a_long,
            }),
            _ => None,
        })
        .collect();
    if samples.is_empty() {
        return Err(MetricsError::Empty("plant"));
    }
    let fold = |f: &dyn Fn(&GgSample) -> f64| samples.iter().map(f).fold(0.0f64, f64::max);
    Ok(GgStats {
        car,
        max_abs_lat: fold(&|s| s.a_lat.abs()),
        max_abs_long: fold(&|s| s.a_long.abs()),
        max_combined: fold(&|s| s.a_lat.hypot(s.a_long)),
        samples,
    })
}

pub const PERIOD_BIN_MS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionPeriodStats {
    pub car: usize,
    pub source: SensorSource,
    pub detections: usize,
    pub mean_period: f64,
    pub min_period: f64,
    pub max_period: f64,
    /// Mean delay from sensing instant to delivery.
    pub mean_latency: f64,
    /// `(bin start in ms, count)` with bins of [`PERIOD_BIN_MS`].
    pub histogram: Vec<(f64, usize)>,
}

/// Periods between consecutive true detections of the opponent by `car`.
pub fn detection_periods(
    records: &[LogRecord],
    car: usize,
    source: SensorSource,
) -> Result<DetectionPeriodStats, MetricsError> {
    let dets: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Detection(d) if d.car == car && d.source == source && !d.spurious => Some(d),
            _ => None,
        })
        .collect();
    if dets.len() < 2 {
        return Err(MetricsError::Empty("detection"));
    }
    let periods: Vec<f64> = dets.windows(2).map(|w| w[1].stamp - w[0].stamp).collect();
    let mut histogram: Vec<(f64, usize)> = Vec::new();
    for p in &periods {
        let bin = (p * 1000.0 / PERIOD_BIN_MS + 1e-6).floor() * PERIOD_BIN_MS;
        match histogram.iter_mut().find(|h| h.0 == bin) {
            Some(h) => h.1 += 1,
            None => histogram.push((bin, 1)),
        }
    }
    histogram.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(DetectionPeriodStats {
        car,
        source,
        detections: dets.len(),
        mean_period: periods.iter().sum::<f64>() / periods.len() as f64,
        min_period: periods.iter().copied().fold(f64::INFINITY, f64::min),
        max_period: periods.iter().copied().fold(0.0, f64::max),
        mean_latency: dets.iter().map(|d| d.t - d.stamp).sum::<f64>() / dets.len() as f64,
        histogram,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRow {
    pub t: f64,
    pub passer: usize,
    pub passed: usize,
    pub speed: f64,
    pub bracket: String,
    pub gap: f64,
}

pub fn pass_ledger(records: &[LogRecord]) -> Vec<PassRow> {
    records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Race(rr) => match &rr.event {
                RaceEvent::Pass {
                    passer,
                    passed,
                    speed,
                    bracket,
                    gap,
                } => Some(PassRow {
                    t: rr.t,
                    passer: *passer,
                    passed: *passed,
                    speed: *speed,
                    bracket: bracket.clone(),
                    gap: *gap,
                }),
                _ => None,
            },
            _ => None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationMetrics {
    pub car: usize,
    pub samples: usize,
    pub rmse_position: f64,
    pub rmse_heading: f64,
    pub max_position_error: f64,
    /// Fraction of samples with each unit fully healthy.
    pub unit_a_healthy: f64,
    pub unit_b_healthy: f64,
    pub safe_stop: bool,
}

pub fn localization_metrics(records: &[LogRecord], car: usize) -> Result<LocalizationMetrics, MetricsError> {
    let rows: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Localization(l) if l.car == car => Some(l),
            _ => None,
        })
        .collect();
    if rows.is_empty() {
        return Err(MetricsError::Empty("localization"));
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&&crate::log::LocalizationRecord) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(LocalizationMetrics {
        car,
        samples: rows.len(),
        rmse_position: mean(&|l| l.position_error.powi(2)).sqrt(),
        rmse_heading: mean(&|l| l.heading_error.powi(2)).sqrt(),
        max_position_error: rows.iter().map(|l| l.position_error).fold(0.0, f64::max),
        unit_a_healthy: mean(&|l| l.health.unit_a.healthy() as u8 as f64),
        unit_b_healthy: mean(&|l| l.health.unit_b.healthy() as u8 as f64),
        safe_stop: rows.iter().any(|l| l.health.safe_stop_required),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackerMetrics {
    pub car: usize,
    pub frames: usize,
    pub frames_with_track: usize,
    /// RMSE of the published opponent track against truth.
    pub rmse: f64,
    pub max_false_confirmed: usize,
}

pub fn tracker_metrics(records: &[LogRecord], car: usize) -> Result<TrackerMetrics, MetricsError> {
    let (mut frames, mut with, mut sq, mut max_false) = (0usize, 0usize, 0.0, 0usize);
    for r in records {
        let LogRecord::Tracker(t) = r else { continue };
        if t.car != car {
            continue;
        }
        frames += 1;
        max_false = max_false.max(t.false_confirmed);
        if let Some(b) = &t.best {
            with += 1;
            sq += b.error * b.error;
        }
    }
    if frames == 0 {
        return Err(MetricsError::Empty("tracker"));
    }
    Ok(TrackerMetrics {
        car,
        frames,
        frames_with_track: with,
        rmse: if with > 0 { (sq / with as f64).sqrt() } else { 0.0 },
        max_false_confirmed: max_false,
    })
}

/// Everything the report files carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub cte: Vec<BracketedCte>,
    pub merge_cte: Vec<Option<CteSummary>>,
    pub gg: Vec<GgStats>,
    pub detection: Vec<DetectionPeriodStats>,
    pub localization: Vec<LocalizationMetrics>,
    pub tracker: Vec<TrackerMetrics>,
    pub passes: Vec<PassRow>,
    pub invariant_breaches: usize,
}

pub fn build_report(records: &[LogRecord]) -> Report {
    let (scenario, seed, n) = records
        .iter()
        .find_map(|r| match r {
            LogRecord::Header(h) => Some((h.scenario.clone(), h.seed, h.cars.len())),
            _ => None,
        })
        .unwrap_or_default();
    let cars = 0..n;
    Report {
        scenario,
        seed,
        cte: cars.clone().filter_map(|c| compute_cte_brackets(records, c).ok()).collect(),
        merge_cte: cars.clone().map(|c| merge_cte(records, c)).collect(),
        gg: cars.clone().filter_map(|c| compute_gg(records, c).ok()).collect(),
        detection: cars
            .clone()
            .flat_map(|c| [SensorSource::Lidar, SensorSource::Camera].map(|s| detection_periods(records, c, s).ok()))
            .flatten()
            .collect(),
        localization: cars.clone().filter_map(|c| localization_metrics(records, c).ok()).collect(),
        tracker: cars.filter_map(|c| tracker_metrics(records, c).ok()).collect(),
        passes: pass_ledger(records),
        invariant_breaches: records.iter().filter(|r| matches!(r, LogRecord::Invariant(_))).count(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.4}"))
}

/// Writes `cte_brackets.csv`, `gg.csv`, `detection_periods.csv`, `passes.csv` and `summary.json`.
pub fn write_report(dir: &Path, report: &Report) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut cte = String::from("car,bracket,samples,mean_abs_cte,max_abs_cte\n");
    for b in &report.cte {
        for r in &b.rows {
            let _ = writeln!(cte, "{},{},{},{},{}", b.car, r.label, r.samples, opt(r.mean), opt(r.max));
        }
    }
    std::fs::write(dir.join("cte_brackets.csv"), cte)?;

    let mut gg = String::from("car,t,a_lat,a_long\n");
    for g in &report.gg {
        for s in &g.samples {
            let _ = writeln!(gg, "{},{:.3},{:.4},{:.4}", g.car, s.t, s.a_lat, s.a_long);
        }
    }
    std::fs::write(dir.join("gg.csv"), gg)?;

    let mut det = String::from("car,source,bin_ms,count\n");
    for d in &report.detection {
        let src = match d.source {
            SensorSource::Lidar => "lidar",
            SensorSource::Camera => "camera",
        };
        for (bin, n) in &d.histogram {
            let _ = writeln!(det, "{},{},{},{}", d.car, src, bin, n);
        }
    }
    std::fs::write(dir.join("detection_periods.csv"), det)?;

    let mut passes = String::from("t,passer,passed,speed,bracket,gap\n");
    for p in &report.passes {
        let _ = writeln!(passes, "{:.3},{},{},{:.3},{},{:.2}", p.t, p.passer, p.passed, p.speed, p.bracket, p.gap);
    }
    std::fs::write(dir.join("passes.csv"), passes)?;

    // the summary drops the G-G sample lists, which live in gg.csv
    let mut summary = report.clone();
    for g in summary.gg.iter_mut() {
        g.samples.clear();
    }
    let json = serde_json::to_string_pretty(&summary).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("summary.json"), json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::log::{ControllerRecord, DetectionRecord, PlantRecord};

    fn ctl(car: usize, speed: f64, cte: f64) -> LogRecord {
        LogRecord::Controller(ControllerRecord {
            t: 0.0,
            car,
            cte,
            cte_est: cte,
            speed,
            v_target: speed,
            lane: LaneId::Inner,
            steer: 0.0,
            throttle: 0.0,
            brake: 0.0,
            gear: 1,
            bracket: 0,
            lookahead: 0.0,
            degraded: false,
            stopping: false,
        })
    }

    #[test]
    fn constant_cte_at_fifty() {
        let recs: Vec<_> = (0..20).map(|_| ctl(0, 50.0, -0.5)).collect();
        let b = compute_cte_brackets(&recs, 0).unwrap();
        assert_eq!(b.get(">10m/s").unwrap().mean, Some(0.5));
        // 50 sits on the 45-50 upper edge
        assert_eq!(b.get("45-50m/s").unwrap().mean, Some(0.5));
        assert_eq!(b.get("50-55m/s").unwrap().samples, 0);
        assert_eq!(b.get("50-55m/s").unwrap().mean, None);
    }

    #[test]
    fn slow_rows_fill_no_bracket() {
        let recs: Vec<_> = (0..5).map(|i| ctl(0, i as f64 * 2.0, 1.0)).collect();
        let b = compute_cte_brackets(&recs, 0).unwrap();
        assert!(b.rows.iter().all(|r| r.samples == 0 && r.mean.is_none()));
    }

    #[test]
    fn mixed_fixture_matches_hand_bucketing() {
        let rows = [(12.0, 0.2), (18.0, 0.4), (33.0, 1.0), (61.0, 0.3), (58.0, 0.6), (58.0, 0.8), (9.0, 5.0)];
        let mut recs: Vec<_> = rows.iter().map(|&(v, c)| ctl(0, v, c)).collect();
        recs.push(ctl(1, 58.0, 9.0));
        let b = compute_cte_brackets(&recs, 0).unwrap();
        let m = |l: &str| b.get(l).unwrap().mean;
        assert!((m("10-20m/s").unwrap() - 0.3).abs() < 1e-12);
        assert!((m("30-35m/s").unwrap() - 1.0).abs() < 1e-12);
        assert!((m("55-60m/s").unwrap() - 0.7).abs() < 1e-12);
        assert!((m(">60m/s").unwrap() - 0.3).abs() < 1e-12);
        assert!((m(">10m/s").unwrap() - 3.3 / 6.0).abs() < 1e-12);
        assert_eq!(b.rows.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(), BRACKETS.map(|b| b.label));
    }

    #[test]
    fn empty_log_is_an_error() {
        assert_eq!(compute_cte_brackets(&[], 0), Err(MetricsError::Empty("controller")));
        assert_eq!(compute_gg(&[], 0).unwrap_err(), MetricsError::Empty("plant"));
    }

    #[test]
    fn gg_on_a_circle() {
        // 30 m/s on r = 100 m
        let a = 30.0f64 * 30.0 / 100.0;
        let recs: Vec<_> = (0..10)
            .map(|i| {
                LogRecord::Plant(PlantRecord {
                    t: i as f64 * 0.01,
                    car: 0,
                    x: 0.0,
                    y: 0.0,
                    psi: 0.0,
                    x_dot: 30.0,
                    y_dot: 0.0,
                    psi_dot: 0.3,
                    a_long: 0.0,
                    a_lat: a,
                    gear: 3,
                    traction_lost: false,
                })
            })
            .collect();
        let g = compute_gg(&recs, 0).unwrap();
        assert!((g.max_abs_lat - 9.0).abs() < 1e-12);
        assert_eq!(g.max_abs_long, 0.0);
    }

    #[test]
    fn detection_periods_ignore_spurious() {
        let det = |stamp: f64, spurious: bool| {
            LogRecord::Detection(DetectionRecord {
                t: stamp + 0.05,
                car: 0,
                stamp,
                source: SensorSource::Lidar,
                x: 0.0,
                y: 0.0,
                confidence: 0.9,
                spurious,
            })
        };
        let recs = vec![det(0.0, false), det(0.02, true), det(0.05, false), det(0.2, false)];
        let s = detection_periods(&recs, 0, SensorSource::Lidar).unwrap();
        assert_eq!(s.detections, 3);
        assert!((s.mean_period - 0.1).abs() < 1e-12);
        assert!((s.mean_latency - 0.05).abs() < 1e-12);
        assert_eq!(s.histogram, vec![(50.0, 1), (150.0, 1)]);
    }
}
