//! Minimum-jerk merge from the inner to the outer lane, first as a bare
//! path and then tracked by the controller in the lane-change scenario.

use racestack::executive::World;
use racestack::log::RunLog;
use racestack::metrics::merge_cte;
use racestack::planner::{safe_merge, Window};
use racestack::scenario::Scenario;
use racestack::track::{Track, TrackConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let track = Track::from_config(&TrackConfig::default())?;
    let (v, duration, start) = (50.0, 3.0, 20.0);
    let window = Window { s_from: start, length: 200.0, spacing: 1.0 };
    let merge = safe_merge(
        &track.inner_lane,
        &track.outer_lane,
        start,
        duration,
        v,
        window,
        Some(&track.bounds),
        0.05,
        0.0,
    )?;
    println!("merge path {:.1} m, {} samples", merge.horizon_length(), merge.path.samples().len());
    for p in merge.points().step_by(25) {
        let off = -track.inner_lane.closest_point(p.x, p.y).lateral;
        println!("  s {:>6.1}  offset {:>5.2} m  kappa {:+.5}", p.s, off, p.kappa);
    }

    let sc = Scenario::resolve("lane_change")?;
    let mut world = World::new(&sc, None, None)?;
    let mut log = RunLog::memory();
    world.run(&mut log, false)?;
    if let Some(m) = merge_cte(log.records(), 0) {
        println!(
            "tracked merges: {} samples, mean |cte| {:.3} m, max {:.3} m",
            m.samples, m.mean_abs, m.max_abs
        );
    }
    Ok(())
}
