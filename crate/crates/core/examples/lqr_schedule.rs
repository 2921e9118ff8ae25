//! Solves the gain schedule and prints each bracket's gain and closed-loop poles.

use nalgebra::DMatrix;

use racestack::control::care::spectral_abscissa;
use racestack::control::lateral::{default_brackets, error_dynamics, GainSchedule};
use racestack::dynamics::VehicleParams;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = VehicleParams::default();
    let schedule = GainSchedule::build(&default_brackets(), &params)?;
    println!("{:>12}  {:>8} {:>8} {:>8} {:>8}  {:>9}", "bracket", "k_e1", "k_e1dot", "k_e2", "k_e2dot", "abscissa");
    for b in schedule.brackets() {
        let v = b.spec.linearization_speed();
        let (a, bv) = error_dynamics(v, &params)?;
        let closed = a - bv * b.k;
        let abscissa = spectral_abscissa(&DMatrix::from_iterator(4, 4, closed.iter().copied()));
        let hi = b.spec.v_high.map_or("inf".to_string(), |h| format!("{h:.0}"));
        println!(
            "{:>5.0}-{:<5} m/s {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {abscissa:>9.3}",
            b.spec.v_low, hi, b.k[0], b.k[1], b.k[2], b.k[3]
        );
    }
    for v in [5.0, 37.5, 70.0] {
        let (i, _) = schedule.gain_for(v);
        println!("{v} m/s uses bracket {i}");
    }
    Ok(())
}
