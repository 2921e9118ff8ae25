//! Lidar detection cadence with and without sensor dropouts.

use racestack::executive::World;
use racestack::log::RunLog;
use racestack::metrics::detection_periods;
use racestack::perception::SensorSource;
use racestack::scenario::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for name in ["detection_period", "season_one_dropout"] {
        let sc = Scenario::resolve(name)?;
        let mut world = World::new(&sc, None, None)?;
        let mut log = RunLog::memory();
        world.run(&mut log, false)?;
        let d = detection_periods(log.records(), 0, SensorSource::Lidar)?;
        println!(
            "{name}: {} detections, period mean {:.1} ms (min {:.1}, max {:.1}), latency {:.1} ms",
            d.detections,
            d.mean_period * 1e3,
            d.min_period * 1e3,
            d.max_period * 1e3,
            d.mean_latency * 1e3
        );
        for (bin, count) in d.histogram.iter().take(8) {
            println!("  {bin:>5.0} ms | {}", "#".repeat((*count).min(60)));
        }
    }
    Ok(())
}
