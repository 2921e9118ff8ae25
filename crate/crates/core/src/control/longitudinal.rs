//! Throttle/brake from a P plus feed-forward law, and the gear lookup.

use serde::{Deserialize, Serialize};

/// Rate limiter: moves from `prev` toward `new` by at most `delta`.
pub fn smooth(prev: f64, new: f64, delta: f64) -> f64 {
    new.clamp(prev - delta, prev + delta)
}

/// Unsmoothed pedal split of `k_p (v_target - v) + k_ff v_target`.
pub fn raw_pedals(v: f64, v_target: f64, k_p: f64, k_ff: f64, alpha_brake: f64) -> (f64, f64) {
    let command = k_p * (v_target - v) + k_ff * v_target;
    if command >= 0.0 {
        (command.min(1.0), 0.0)
    } else {
        (0.0, (-alpha_brake * command).min(1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongitudinalGains {
    pub k_p: f64,
    pub k_ff: f64,
    pub alpha_brake: f64,
    pub delta_throttle: f64,
    pub delta_brake: f64,
}

/// Rate-limited pedals. A channel may only rise once the opposite one has fully released,
/// so throttle and brake are never applied together.
pub fn longitudinal_control(
    v: f64,
    v_target: f64,
    g: &LongitudinalGains,
    prev_throttle: f64,
    prev_brake: f64,
) -> (f64, f64) {
    let (want_t, want_b) = raw_pedals(v, v_target.max(0.0), g.k_p, g.k_ff, g.alpha_brake);
    let mut throttle = smooth(prev_throttle, want_t, g.delta_throttle).clamp(0.0, 1.0);
    let mut brake = smooth(prev_brake, want_b, g.delta_brake).clamp(0.0, 1.0);
    if throttle > 0.0 && brake > 0.0 {
        if want_b > 0.0 {
            // releasing throttle first
            throttle = smooth(prev_throttle, 0.0, g.delta_throttle).max(0.0);
            brake = if throttle > 0.0 { 0.0 } else { brake };
        } else {
            brake = smooth(prev_brake, 0.0, g.delta_brake).max(0.0);
            throttle = if brake > 0.0 { 0.0 } else { throttle };
        }
    }
    (throttle, brake)
}

/// Gear lookup with downshift hysteresis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GearTable {
    /// Lower speed bound of gears 2, 3, ... (gear 1 starts at 0).
    pub upshift_speeds: Vec<f64>,
    #[serde(default = "default_hysteresis")]
    pub hysteresis: f64,
}

fn default_hysteresis() -> f64 {
    1.0
}

impl Default for GearTable {
    fn default() -> Self {
        GearTable {
            upshift_speeds: vec![12.0, 22.0, 32.0, 42.0, 52.0],
            hysteresis: 1.0,
        }
    }
}

impl GearTable {
    /// Gear of the interval containing `v`, ignoring hysteresis.
    pub fn lookup(&self, v: f64) -> u8 {
        1 + self.upshift_speeds.iter().filter(|&&s| v >= s).count() as u8
    }

    pub fn is_valid(&self) -> bool {
        self.upshift_speeds.windows(2).all(|w| w[0] < w[1])
            && self.upshift_speeds.first().is_none_or(|&s| s > 0.0)
            && self.hysteresis >= 0.0
    }

    /// Upshifts as soon as `v` enters a higher interval; downshifts only once `v`
    /// is more than `hysteresis` below the current gear's lower bound.
    pub fn select(&self, v: f64, current: u8) -> u8 {
        let target = self.lookup(v);
        if target >= current {
            return target;
        }
        let current = current.min(self.upshift_speeds.len() as u8 + 1);
        let lower = if current >= 2 {
            self.upshift_speeds[current as usize - 2]
        } else {
            0.0
        };
        if v < lower - self.hysteresis {
            self.lookup(v + self.hysteresis).max(target)
        } else {
            current
        }
    }
}

pub fn gear_select(v: f64, table: &GearTable, current: u8) -> u8 {
    table.select(v, current)
}
