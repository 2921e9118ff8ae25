//! Two cars alternating attacker and defender roles up the speed ladder.

use racestack::executive::World;
use racestack::log::{LogRecord, RaceEvent, RunLog};
use racestack::metrics::pass_ledger;
use racestack::scenario::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sc = Scenario::resolve("passing_competition")?;
    let mut world = World::new(&sc, None, None)?;
    let mut log = RunLog::memory();
    let summary = world.run(&mut log, false)?;

    for r in log.records() {
        if let LogRecord::Race(e) = r {
            if !matches!(e.event, RaceEvent::Pass { .. }) {
                println!("{:>7.2} s  {:?}", e.t, e.event);
            }
        }
    }
    println!();
    for p in pass_ledger(log.records()) {
        println!(
            "pass at {:>6.1} s: car {} by car {} at {} ({:.1} m/s), gap {:.1} m",
            p.t, p.passed, p.passer, p.bracket, p.speed, p.gap
        );
    }
    println!(
        "\n{:.1} s sim in {:.1} s wall; timeouts {}, breaches {}, min side-by-side separation {:.2} m",
        summary.sim_time,
        summary.wall_time,
        summary.timeouts,
        summary.breaches.len(),
        summary.min_lateral_separation.unwrap_or(f64::NAN)
    );
    Ok(())
}
