//! Writes a run log to disk, reads it back and rebuilds the metrics report.
//! The report depends on the log alone, so both reports must agree.

use std::fs::File;
use std::io::{BufReader, BufWriter};

use racestack::executive::World;
use racestack::log::{read_log, RunLog};
use racestack::metrics::{build_report, write_report};
use racestack::scenario::Scenario;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("racestack_replay");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("lane_change.jsonl");

    let sc = Scenario::resolve("lane_change")?;
    let mut world = World::new(&sc, Some(11), Some(20.0))?;
    let mut log = RunLog::to_writer(Box::new(BufWriter::new(File::create(&path)?)), true);
    world.run(&mut log, false)?;
    log.flush()?;
    let live = build_report(log.records());

    let records = read_log(BufReader::new(File::open(&path)?))?;
    let replayed = build_report(&records);
    println!("{} records in {}", records.len(), path.display());
    println!("live and replayed reports identical: {}", live == replayed);

    write_report(&dir.join("report"), &replayed)?;
    for entry in std::fs::read_dir(dir.join("report"))? {
        println!("  wrote {}", entry?.path().display());
    }
    Ok(())
}
