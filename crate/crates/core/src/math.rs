//! Small numeric helpers shared across the stack.

use std::f64::consts::PI;

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Unwraps `a` so that it lies within pi of `reference`.
pub fn unwrap_near(a: f64, reference: f64) -> f64 {
    reference + wrap_angle(a - reference)
}

/// `sin(x) / x` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// Quintic minimum-jerk blend `6u^5 - 15u^4 + 10u^3` on `[0, 1]`, clamped outside.
pub fn quintic_blend(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 + u * (-15.0 + 6.0 * u))
}

/// First derivative of [`quintic_blend`] with respect to `u` (zero outside `[0, 1]`).
pub fn quintic_blend_d1(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        return 0.0;
    }
    30.0 * u * u * (1.0 - u) * (1.0 - u)
}

/// Second derivative of [`quintic_blend`] with respect to `u` (zero outside `[0, 1]`).
pub fn quintic_blend_d2(u: f64) -> f64 {
    if !(0.0..=1.0).contains(&u) {
        return 0.0;
    }
    60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
}

pub const MPH_TO_MPS: f64 = 0.44704;

pub fn mph_to_mps(mph: f64) -> f64 {
    mph * MPH_TO_MPS
}

/// 2D cross product `a x b`.
pub fn cross(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.0 * b.1 - a.1 * b.0
}
