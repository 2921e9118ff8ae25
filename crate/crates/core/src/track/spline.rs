//! Blended circular-arc interpolating spline.
//!
//! Segment `i` runs from waypoint `i` to waypoint `i + 1`. Two circular arcs
//! share that chord: one lies on the circle through waypoints `(i-1, i, i+1)`,
//! the other on the circle through `(i, i+1, i+2)`. The segment is their blend
//! under the quintic weight `6u^5 - 15u^4 + 10u^3`. The weight's first and
//! second derivatives vanish at both ends, so at every waypoint the curve
//! agrees to second order with the circle through that waypoint and its two
//! neighbours. Curvature is therefore continuous (G2), and co-circular or
//! collinear waypoints reproduce their circle or line exactly.

use crate::math::{cross, quintic_blend, quintic_blend_d1, quintic_blend_d2, sinc};

type V2 = (f64, f64);

fn sub(a: V2, b: V2) -> V2 {
    (a.0 - b.0, a.1 - b.1)
}

fn norm(a: V2) -> f64 {
    a.0.hypot(a.1)
}

/// Signed curvature of the circle through three points (positive for a left turn).
pub fn menger_curvature(p: V2, q: V2, r: V2) -> f64 {
    let a = sub(q, p);
    let b = sub(r, q);
    let c = sub(r, p);
    let denom = norm(a) * norm(b) * norm(c);
    if denom <= f64::MIN_POSITIVE {
        return 0.0;
    }
    2.0 * cross(a, b) / denom
}

/// Circular arc of constant signed curvature starting at `origin` with tangent angle `theta0`.
#[derive(Debug, Clone, Copy)]
struct Arc {
    origin: V2,
    theta0: f64,
    kappa: f64,
    length: f64,
}

impl Arc {
    /// Arc from `a` to `b` with the given signed curvature.
    fn through_chord(a: V2, b: V2, kappa: f64) -> Self {
        let d = sub(b, a);
        let c = norm(d);
        let phi = d.1.atan2(d.0);
        let half = (kappa * c / 2.0).clamp(-1.0, 1.0).asin();
        let length = if kappa.abs() < 1e-12 { c } else { 2.0 * half / kappa };
        Arc {
            origin: a,
            theta0: phi - half,
            kappa,
            length,
        }
    }

    fn point(&self, s: f64) -> V2 {
        let mid = self.theta0 + self.kappa * s / 2.0;
        let chord = s * sinc(self.kappa * s / 2.0);
        (self.origin.0 + chord * mid.cos(), self.origin.1 + chord * mid.sin())
    }

    fn tangent(&self, s: f64) -> V2 {
        let th = self.theta0 + self.kappa * s;
        (th.cos(), th.sin())
    }

    /// Position, first and second derivative with respect to the unit parameter `u`.
    fn eval(&self, u: f64) -> (V2, V2, V2) {
        let s = u * self.length;
        let p = self.point(s);
        let t = self.tangent(s);
        let d1 = (self.length * t.0, self.length * t.1);
        let k = self.length * self.length * self.kappa;
        let d2 = (-k * t.1, k * t.0);
        (p, d1, d2)
    }
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    lead: Arc,
    trail: Arc,
}

/// Interpolating G2 spline through a waypoint sequence.
#[derive(Debug, Clone)]
pub struct BlendedArcSpline {
    segments: Vec<Segment>,
}

/// Position and derivatives of the spline at one parameter value.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub pos: V2,
    pub d1: V2,
    pub d2: V2,
}

impl CurvePoint {
    pub fn heading(&self) -> f64 {
        self.d1.1.atan2(self.d1.0)
    }

    pub fn curvature(&self) -> f64 {
        let speed = norm(self.d1);
        cross(self.d1, self.d2) / (speed * speed * speed)
    }

    pub fn speed(&self) -> f64 {
        norm(self.d1)
    }
}

impl BlendedArcSpline {
    /// Builds the spline. Callers validate the waypoints (count, spacing, finiteness).
    pub fn new(points: &[V2], closed: bool) -> Self {
        let n = points.len();
        let seg_count = if closed { n } else { n - 1 };
        let at = |i: isize| -> V2 {
            let idx = i.rem_euclid(n as isize) as usize;
            points[idx]
        };
        // curvature of the circle through the waypoint at index i and its neighbours
        let node_kappa = |i: usize| -> f64 {
            if !closed && (i == 0 || i == n - 1) {
                let j = if i == 0 { 1 } else { n - 2 };
                return menger_curvature(points[j - 1], points[j], points[j + 1]);
            }
            let i = i as isize;
            menger_curvature(at(i - 1), at(i), at(i + 1))
        };
        let segments = (0..seg_count)
            .map(|i| {
                let a = at(i as isize);
                let b = at(i as isize + 1);
                let k_lead = node_kappa(i);
                let k_trail = node_kappa((i + 1) % n);
                Segment {
                    lead: Arc::through_chord(a, b, k_lead),
                    trail: Arc::through_chord(a, b, k_trail),
                }
            })
            .collect();
        BlendedArcSpline { segments }
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Evaluates segment `i` at `u` in `[0, 1]`.
    pub fn eval(&self, i: usize, u: f64) -> CurvePoint {
        let seg = &self.segments[i];
        let (pa, da, dda) = seg.lead.eval(u);
        let (pb, db, ddb) = seg.trail.eval(u);
        let w = quintic_blend(u);
        let w1 = quintic_blend_d1(u);
        let w2 = quintic_blend_d2(u);
        let diff = sub(pb, pa);
        let ddiff = sub(db, da);
        let pos = (pa.0 + w * diff.0, pa.1 + w * diff.1);
        let d1 = (
            da.0 + w1 * diff.0 + w * ddiff.0,
            da.1 + w1 * diff.1 + w * ddiff.1,
        );
        let d2 = (
            dda.0 + w2 * diff.0 + 2.0 * w1 * ddiff.0 + w * (ddb.0 - dda.0),
            dda.1 + w2 * diff.1 + 2.0 * w1 * ddiff.1 + w * (ddb.1 - dda.1),
        );
        CurvePoint { pos, d1, d2 }
    }

    /// Arc length of segment `i` between `u = 0` and `u = upto`.
    pub fn arc_length(&self, i: usize, upto: f64) -> f64 {
        const PANELS: usize = 8;
        let h = upto / PANELS as f64;
        (0..PANELS)
            .map(|p| {
                let a = p as f64 * h;
                GAUSS_8
                    .iter()
                    .map(|&(x, w)| {
                        let u = a + 0.5 * h * (x + 1.0);
                        w * self.eval(i, u).speed()
                    })
                    .sum::<f64>()
                    * 0.5
                    * h
            })
            .sum()
    }

    /// Parameter `u` at which the arc length from the segment start equals `target`.
    pub fn param_at_length(&self, i: usize, target: f64, seg_len: f64) -> f64 {
        if target <= 0.0 {
            return 0.0;
        }
        if target >= seg_len {
            return 1.0;
        }
        let mut lo = 0.0;
        let mut hi = 1.0;
        let mut u = target / seg_len;
        for _ in 0..50 {
            let f = self.arc_length(i, u) - target;
            if f.abs() < 1e-10 {
                break;
            }
            if f > 0.0 {
                hi = u;
            } else {
                lo = u;
            }
            let speed = self.eval(i, u).speed();
            let mut next = u - f / speed;
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            u = next;
        }
        u
    }
}

/// 8-point Gauss-Legendre nodes and weights on `[-1, 1]`.
const GAUSS_8: [(f64, f64); 8] = [
    (-0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
    (-0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (-0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (-0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.183_434_642_495_649_8, 0.362_683_783_378_362),
    (0.525_532_409_916_329, 0.313_706_645_877_887_3),
    (0.796_666_477_413_626_7, 0.222_381_034_453_374_47),
    (0.960_289_856_497_536_3, 0.101_228_536_290_376_26),
];

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn menger_on_circle() {
        let r = 50.0;
        let p = |a: f64| (r * a.cos(), r * a.sin());
        let k = menger_curvature(p(0.0), p(0.3), p(0.9));
        assert!((k - 1.0 / r).abs() < 1e-12);
        let k = menger_curvature(p(0.9), p(0.3), p(0.0));
        assert!((k + 1.0 / r).abs() < 1e-12);
    }

    #[test]
    fn collinear_points_give_a_line() {
        let pts = [(0.0, 0.0), (10.0, 0.0), (20.0, 0.0), (30.0, 0.0)];
        let sp = BlendedArcSpline::new(&pts, false);
        for i in 0..sp.segment_count() {
            for k in 0..=10 {
                let c = sp.eval(i, k as f64 / 10.0);
                assert!(c.pos.1.abs() < 1e-12);
                assert!(c.curvature().abs() < 1e-12);
            }
        }
        assert!((sp.arc_length(1, 1.0) - 10.0).abs() < 1e-10);
    }

    #[test]
    fn quarter_arcs_length() {
        let r = 100.0;
        let pts: Vec<_> = (0..4)
            .map(|k| {
                let a = k as f64 * PI / 2.0;
                (r * a.cos(), r * a.sin())
            })
            .collect();
        let sp = BlendedArcSpline::new(&pts, true);
        let total: f64 = (0..4).map(|i| sp.arc_length(i, 1.0)).sum();
        assert!((total - 2.0 * PI * r).abs() < 1e-8);
    }
}
