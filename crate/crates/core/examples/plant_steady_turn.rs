//! Open-loop constant-steer turns on the bicycle model.
//!
//! While the tires stay inside the friction circle the yaw rate settles on
//! the linear steady-state value `u * delta / (L + K * u^2)`. The default car
//! is mildly oversteering (K < 0), so the same steer angle asks for more
//! lateral acceleration the faster it goes until the friction limit is hit.

use racestack::control::longitudinal::raw_pedals;
use racestack::dynamics::{detect_spinout, step, ActuationCommand, VehicleParams, VehicleState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let p = VehicleParams::default();
    let l = p.wheelbase();
    // two tires per axle
    let k_us = p.m / l * (p.l_r / (2.0 * p.c_alpha_f) - p.l_f / (2.0 * p.c_alpha_r));
    println!("understeer gradient K = {k_us:.3e} s^2/m");
    if k_us < 0.0 {
        println!("critical speed {:.1} m/s", (-l / k_us).sqrt());
    }

    let delta = 0.01;
    let dt = 0.001;
    for v in [10.0, 20.0, 30.0, 40.0, 50.0] {
        let mut s = VehicleState::rolling(0.0, 0.0, 0.0, v);
        let mut spun = None;
        for k in 0..8000 {
            let (throttle, brake) = raw_pedals(s.x_dot, v, 0.3, 0.008, 0.5);
            let cmd = ActuationCommand { steer: delta, throttle, brake, gear: 6 };
            s = step(&s, &cmd, &p, dt)?;
            if s.traction_lost {
                spun = Some((k as f64 * dt, detect_spinout(&s, &p)));
                break;
            }
        }
        let u = s.x_dot;
        let oracle = u * delta / (l + k_us * u * u);
        match spun {
            Some((t, spinout)) => println!(
                "{v:>4} m/s: traction lost after {t:.2} s (linear model wants {:.1} m/s^2), spin-out signature {spinout}",
                u * oracle
            ),
            None => println!(
                "{v:>4} m/s: yaw rate {:.4} rad/s, linear steady state {oracle:.4}, a_lat {:.1} m/s^2",
                s.psi_dot, s.a_lat
            ),
        }
    }
    Ok(())
}
