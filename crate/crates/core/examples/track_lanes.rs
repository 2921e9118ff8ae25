//! Builds the default stadium oval and queries its lanes.

use racestack::track::{LaneId, Track, TrackConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let track = Track::from_config(&TrackConfig::default())?;
    println!("{}: centerline {:.2} m, width {} m", track.name, track.length(), track.width);

    for id in [LaneId::Inner, LaneId::Center, LaneId::Outer] {
        let lane = track.lane(id);
        // median over the turn samples; the spline rings where straight meets arc
        let mut turn: Vec<f64> = lane.samples().iter().map(|st| st.kappa.abs()).filter(|k| *k > 1e-3).collect();
        turn.sort_by(f64::total_cmp);
        let kappa = turn[turn.len() / 2];
        println!("{id:?}: {:.2} m long, turn radius {:.2} m", lane.total_length(), 1.0 / kappa);
    }

    let c = &track.centerline;
    let start = c.pose_at(0.0);
    println!("start pose ({:.1}, {:.1}) heading {:.3} rad", start.x, start.y, start.psi);

    // project a point 2 m inside the inner lane at the middle of the first straight
    let p = track.inner_lane.pose_at(150.0);
    let (nx, ny) = track.inner_lane.normal_at(150.0);
    let proj = track.inner_lane.closest_point(p.x + 2.0 * nx, p.y + 2.0 * ny);
    println!("projection: s {:.2} m, lateral {:+.2} m", proj.s, proj.lateral);

    // station differences wrap across the start line
    let l = c.total_length();
    println!("delta from s={:.0} to s=5: {:+.2} m", l - 5.0, c.station_delta(l - 5.0, 5.0));
    println!(
        "inside bounds: centre {}, 10 m outside {}",
        track.bounds.contains((start.x, start.y)),
        track.bounds.contains((start.x, start.y - 10.0 - track.width / 2.0))
    );
    Ok(())
}
