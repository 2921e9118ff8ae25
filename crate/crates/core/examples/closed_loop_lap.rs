//! Full stack, one car: LQR lateral control and the pedal loop around the
//! 60 m/s oval, with cross-track error broken down by speed bracket.

use racestack::executive::World;
use racestack::log::RunLog;
use racestack::metrics::{compute_cte_brackets, compute_gg};
use racestack::scenario::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sc = Scenario::resolve("oval_60")?;
    let mut world = World::new(&sc, None, None)?;
    let mut log = RunLog::memory();
    let summary = world.run(&mut log, false)?;
    println!(
        "{}: {:.1} s sim in {:.2} s wall, {} lap(s)",
        summary.scenario, summary.sim_time, summary.wall_time, summary.laps[0]
    );

    let cte = compute_cte_brackets(log.records(), 0)?;
    for row in &cte.rows {
        if let (Some(mean), Some(max)) = (row.mean, row.max) {
            println!("{:>9}: {:>6} samples, mean |cte| {mean:.3} m, max {max:.3} m", row.label, row.samples);
        }
    }
    let gg = compute_gg(log.records(), 0)?;
    println!("peak |a_lat| {:.2} m/s^2, peak |a_long| {:.2} m/s^2", gg.max_abs_lat, gg.max_abs_long);
    Ok(())
}
