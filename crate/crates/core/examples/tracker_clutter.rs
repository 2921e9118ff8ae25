//! Tracks an opponent through simulated lidar with false positives and
//! dropouts, and compares the confirmed track against ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use racestack::dynamics::VehicleState;
use racestack::perception::{simulate_frame, PerceptionConfig, SensorSource};
use racestack::track::{Track, TrackConfig};
use racestack::tracker::{Tracker, TrackerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let track = Track::from_config(&TrackConfig::default())?;
    let pcfg = PerceptionConfig {
        false_positive_rate: 0.3,
        dropout_rate: 0.2,
        ..PerceptionConfig::default()
    };
    let mut tracker = Tracker::new(TrackerConfig::default(), track.bounds.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let lane = &track.inner_lane;
    let v = 45.0;
    let at = |s: f64, speed: f64| {
        let p = lane.pose_at(lane.normalize_s(s));
        VehicleState::rolling(p.x, p.y, p.psi, speed)
    };

    let (mut spurious, mut se, mut n) = (0usize, 0.0, 0usize);
    for k in 0..2000u32 {
        let t = k as f64 * pcfg.lidar.period;
        let stamp = t - pcfg.lidar.latency;
        let ego = at(v * stamp, v);
        // opponent 30 m ahead, slowly dropping back
        let opp = at(v * stamp + 30.0 - 0.5 * stamp, v - 0.5);
        for d in simulate_frame(&ego, Some(&opp), &pcfg, SensorSource::Lidar, t, &mut rng) {
            spurious += d.spurious as usize;
            tracker.ingest(d);
        }
        tracker.process(t);
        if let Some(c) = tracker.confirmed().next() {
            let p = c.predicted_to(stamp, tracker.config());
            let e = (p.state[0] - opp.x).hypot(p.state[1] - opp.y);
            se += e * e;
            n += 1;
        }
        if k % 400 == 0 {
            println!("t {t:>6.2} s: {} track(s), {} confirmed", tracker.tracks().len(), tracker.confirmed().count());
        }
    }
    println!("{spurious} spurious detections fed in");
    println!("confirmed in {n} of 2000 frames, position rmse {:.3} m", (se / n.max(1) as f64).sqrt());
    println!("{:?}", tracker.stats());
    Ok(())
}
