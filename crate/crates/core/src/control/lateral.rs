//! Speed-bracketed LQR steering on a lookahead target.

use nalgebra::{DMatrix, Matrix4, RowVector4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::care::{is_hurwitz, solve_care, CareError};
use crate::dynamics::{VehicleParams, VehicleState};
use crate::math::wrap_angle;
use crate::track::LookaheadTarget;

/// Below this speed the error dynamics are singular and steering is held at zero.
pub const MIN_LQR_SPEED: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LateralError {
    #[error("speed {0} m/s below the {MIN_LQR_SPEED} m/s floor of the error dynamics")]
    SpeedTooLow(f64),
    #[error("brackets must cover [0, inf) without gaps or overlap: {0}")]
    BadBrackets(String),
    #[error("bracket [{v_low}, {v_high:?}): {source}")]
    Care {
        v_low: f64,
        v_high: Option<f64>,
        source: CareError,
    },
    #[error("bracket [{v_low}, {v_high:?}) closed loop is not strictly stable")]
    Unstable { v_low: f64, v_high: Option<f64> },
}

/// Error dynamics `(A, B)` at longitudinal speed `v`, state `(e1, e1_dot, e2, e2_dot)`.
pub fn error_dynamics(v: f64, p: &VehicleParams) -> Result<(Matrix4<f64>, Vector4<f64>), LateralError> {
    if !(v > MIN_LQR_SPEED) {
        return Err(LateralError::SpeedTooLow(v));
    }
    let cf = 2.0 * p.c_alpha_f;
    let cr = 2.0 * p.c_alpha_r;
    let (lf, lr, m, iz) = (p.l_f, p.l_r, p.m, p.i_z);
    #[rustfmt::skip]
    let a = Matrix4::new(
        0.0, 1.0, 0.0, 0.0,
        0.0, -(cf + cr) / (m * v), (cf + cr) / m, -(cf * lf - cr * lr) / (m * v),
        0.0, 0.0, 0.0, 1.0,
        0.0, -(lf * cf - lr * cr) / (iz * v), (lf * cf - lr * cr) / iz, -(lf * lf * cf + lr * lr * cr) / (iz * v),
    );
    let b = Vector4::new(0.0, cf / m, 0.0, lf * cf / iz);
    Ok((a, b))
}

/// Tracking errors relative to a lookahead target.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorState {
    pub e1: f64,
    pub e1_dot: f64,
    pub e2: f64,
    pub e2_dot: f64,
}

pub fn error_state(s: &VehicleState, t: &LookaheadTarget) -> ErrorState {
    let (sn, cs) = (-t.psi).sin_cos();
    let e2 = wrap_angle(s.psi - t.psi);
    ErrorState {
        e1: (t.x - s.x) * sn + (t.y - s.y) * cs,
        e1_dot: s.y_dot + s.x_dot * e2,
        e2,
        e2_dot: s.psi_dot - t.psi_dot,
    }
}

impl ErrorState {
    /// State vector in the coordinates of [`error_dynamics`].
    ///
    /// `e1` is the target's offset from the car while `e1_dot` is the car's own
    /// lateral rate, so the position entry is negated to measure both from the path.
    pub fn feedback_vector(&self) -> Vector4<f64> {
        Vector4::new(-self.e1, self.e1_dot, self.e2, self.e2_dot)
    }
}

/// One row of the gain schedule as configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BracketSpec {
    pub v_low: f64,
    /// `None` for an open upper end.
    pub v_high: Option<f64>,
    pub q: [f64; 4],
    pub r: f64,
}

impl BracketSpec {
    /// Linearization speed: the bracket midpoint, or `v_low` when unbounded.
    pub fn linearization_speed(&self) -> f64 {
        match self.v_high {
            Some(h) => 0.5 * (self.v_low + h),
            None => self.v_low,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.v_low && self.v_high.is_none_or(|h| v < h)
    }
}

/// Default schedule: [0,10), [10,20), then 5 m/s brackets up to 60, then [60, inf).
/// Weights move from lateral toward yaw emphasis and R rises with speed.
pub fn default_brackets() -> Vec<BracketSpec> {
    let mut edges = vec![0.0, 10.0, 20.0];
    edges.extend((5..=12).map(|k| 5.0 * k as f64));
    let n = edges.len();
    let q_lo = [1.0, 0.1, 2.0, 0.2];
    let q_hi = [0.5, 0.1, 4.0, 0.4];
    (0..n)
        .map(|i| {
            let t = i as f64 / (n - 1) as f64;
            let mut q = [0.0; 4];
            for j in 0..4 {
                q[j] = q_lo[j] + t * (q_hi[j] - q_lo[j]);
            }
            BracketSpec {
                v_low: edges[i],
                v_high: edges.get(i + 1).copied(),
                q,
                r: 5.0 + t * 10.0,
            }
        })
        .collect()
}

/// A bracket with its solved gain.
#[derive(Debug, Clone)]
pub struct GainBracket {
    pub spec: BracketSpec,
    pub k: RowVector4<f64>,
    pub p: Matrix4<f64>,
}

#[derive(Debug, Clone)]
pub struct GainSchedule {
    brackets: Vec<GainBracket>,
}

impl GainSchedule {
    /// Validates coverage and solves one CARE per bracket.
    pub fn build(specs: &[BracketSpec], params: &VehicleParams) -> Result<Self, LateralError> {
        check_coverage(specs)?;
        let mut brackets = Vec::with_capacity(specs.len());
        for spec in specs {
            if spec.q.iter().any(|q| !(*q >= 0.0)) || !(spec.r > 0.0) {
                return Err(LateralError::BadBrackets(format!(
                    "bracket at {} needs Q >= 0 and R > 0",
                    spec.v_low
                )));
            }
            let v = spec.linearization_speed();
            let (a, b) = error_dynamics(v, params)?;
            let ad = DMatrix::from_iterator(4, 4, a.iter().copied());
            let bd = DMatrix::from_iterator(4, 1, b.iter().copied());
            let qd = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&spec.q));
            let rd = DMatrix::from_element(1, 1, spec.r);
            let sol = solve_care(&ad, &bd, &qd, &rd).map_err(|source| LateralError::Care {
                v_low: spec.v_low,
                v_high: spec.v_high,
                source,
            })?;
            if !is_hurwitz(&(&ad - &bd * &sol.k), 1e-6) {
                return Err(LateralError::Unstable {
                    v_low: spec.v_low,
                    v_high: spec.v_high,
                });
            }
            brackets.push(GainBracket {
                spec: spec.clone(),
                k: RowVector4::from_iterator(sol.k.iter().copied()),
                p: Matrix4::from_iterator(sol.p.iter().copied()),
            });
        }
        Ok(GainSchedule { brackets })
    }

    pub fn brackets(&self) -> &[GainBracket] {
        &self.brackets
    }

    pub fn index_for(&self, v: f64) -> usize {
        let v = v.max(0.0);
        self.brackets
            .iter()
            .position(|b| b.spec.contains(v))
            .unwrap_or(self.brackets.len() - 1)
    }

    pub fn gain_for(&self, v: f64) -> (usize, &RowVector4<f64>) {
        let i = self.index_for(v);
        (i, &self.brackets[i].k)
    }
}

fn check_coverage(specs: &[BracketSpec]) -> Result<(), LateralError> {
    if specs.is_empty() {
        return Err(LateralError::BadBrackets("no brackets".into()));
    }
    if specs[0].v_low != 0.0 {
        return Err(LateralError::BadBrackets("first bracket must start at 0".into()));
    }
    for w in specs.windows(2) {
        match w[0].v_high {
            Some(h) if h == w[1].v_low && h > w[0].v_low => {}
            _ => {
                return Err(LateralError::BadBrackets(format!(
                    "gap or overlap between brackets starting at {} and {}",
                    w[0].v_low, w[1].v_low
                )))
            }
        }
    }
    if specs[specs.len() - 1].v_high.is_some() {
        return Err(LateralError::BadBrackets("last bracket must be unbounded".into()));
    }
    Ok(())
}

/// Lookahead distance law `d = d_base + k_vd * x_dot`.
pub fn lookahead_distance(d_base: f64, k_vd: f64, x_dot: f64) -> f64 {
    d_base + k_vd * x_dot.max(0.0)
}

/// Steering from the scheduled gain: `u = -K e`, clamped to `max_steer`.
pub fn lqr_steer(k: &RowVector4<f64>, e: &ErrorState, max_steer: f64) -> f64 {
    let u = -(k * e.feedback_vector())[0];
    u.clamp(-max_steer, max_steer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_dynamics_structure() {
        let p = VehicleParams::default();
        let (a, b) = error_dynamics(30.0, &p).unwrap();
        assert_eq!(a[(0, 1)], 1.0);
        assert_eq!(a[(2, 3)], 1.0);
        assert_eq!(b[1], 2.0 * p.c_alpha_f / p.m);
        assert_eq!(b[3], 2.0 * p.l_f * p.c_alpha_f / p.i_z);
        let (a2, _) = error_dynamics(60.0, &p).unwrap();
        for (r, c) in [(1, 1), (1, 3), (3, 1), (3, 3)] {
            assert!((a2[(r, c)] - a[(r, c)] / 2.0).abs() < 1e-12);
        }
        for (r, c) in [(1, 2), (3, 2)] {
            assert_eq!(a2[(r, c)], a[(r, c)]);
        }
        assert!(error_dynamics(0.4, &p).is_err());
    }

    #[test]
    fn symmetric_axles_cancel_coupling() {
        let p = VehicleParams {
            l_f: 1.5,
            l_r: 1.5,
            ..Default::default()
        };
        let (a, _) = error_dynamics(25.0, &p).unwrap();
        assert_eq!(a[(1, 3)], 0.0);
        assert_eq!(a[(3, 1)], 0.0);
    }

    #[test]
    fn error_state_examples() {
        let t = LookaheadTarget {
            x: 0.0,
            y: 0.0,
            psi: 0.0,
            psi_dot: 0.0,
            s: 0.0,
        };
        let mut s = VehicleState::rolling(0.0, 2.0, 0.0, 10.0);
        let e = error_state(&s, &t);
        assert_eq!((e.e1, e.e1_dot, e.e2, e.e2_dot), (-2.0, 0.0, 0.0, 0.0));
        s = VehicleState::rolling(0.0, 0.0, 0.1, 50.0);
        let e = error_state(&s, &t);
        assert!(e.e1.abs() < 1e-12);
        assert!((e.e1_dot - 5.0).abs() < 1e-12);
        assert!((e.e2 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn default_schedule_is_stable_and_selects_brackets() {
        let p = VehicleParams::default();
        let sched = GainSchedule::build(&default_brackets(), &p).unwrap();
        assert_eq!(sched.brackets().len(), 11);
        let i = sched.index_for(22.0);
        assert_eq!(sched.brackets()[i].spec.v_low, 20.0);
        assert_eq!(sched.brackets()[i].spec.v_high, Some(25.0));
        assert_eq!(sched.brackets()[sched.index_for(60.0)].spec.v_high, None);
        assert_eq!(sched.index_for(0.0), 0);
    }

    #[test]
    fn coverage_errors() {
        let mut b = default_brackets();
        b[3].v_low += 1.0;
        assert!(matches!(check_coverage(&b), Err(LateralError::BadBrackets(_))));
        let mut b = default_brackets();
        b.last_mut().unwrap().v_high = Some(100.0);
        assert!(check_coverage(&b).is_err());
    }

    #[test]
    fn lookahead_law() {
        assert_eq!(lookahead_distance(10.0, 0.5, 60.0), 40.0);
    }

    #[test]
    fn zero_error_zero_steer() {
        let p = VehicleParams::default();
        let sched = GainSchedule::build(&default_brackets(), &p).unwrap();
        let (_, k) = sched.gain_for(40.0);
        assert_eq!(lqr_steer(k, &ErrorState::default(), p.max_steer), 0.0);
    }
}
