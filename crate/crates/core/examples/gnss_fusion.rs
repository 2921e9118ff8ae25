//! Dual-GNSS fusion under degradation, then a full loss of both units.
//!
//! The first run keeps one healthy unit and must never stop; the second
//! loses both and has to latch a controlled stop.

use racestack::executive::World;
use racestack::log::RunLog;
use racestack::metrics::localization_metrics;
use racestack::scenario::Scenario;

fn run(name: &str) -> Result<(), Box<dyn std::error::Error>> {
    let sc = Scenario::resolve(name)?;
    let mut world = World::new(&sc, None, None)?;
    let mut log = RunLog::memory();
    let summary = world.run(&mut log, false)?;
    let m = localization_metrics(log.records(), 0)?;
    println!("{name}:");
    println!(
        "  estimate rate {:.1} Hz, rmse {:.3} m / {:.4} rad, worst {:.3} m",
        summary.localization_rate_hz[0].unwrap_or(0.0),
        m.rmse_position,
        m.rmse_heading,
        m.max_position_error
    );
    println!(
        "  unit A healthy {:.0}% of samples, unit B {:.0}%",
        100.0 * m.unit_a_healthy,
        100.0 * m.unit_b_healthy
    );
    let car = &world.cars[0];
    if let Some(loc) = car.localizer() {
        println!("  {:?}", loc.stats());
    }
    println!(
        "  safe stops {}, final speed {:.2} m/s",
        summary.safe_stops,
        car.truth.x_dot
    );
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run("gnss_degradation")?;
    run("gnss_dual_failure")
}
