use serde::{Deserialize, Serialize};

use super::spline::BlendedArcSpline;
use super::TrackError;
use crate::math::{cross, unwrap_near, wrap_angle};

/// A point in the Local Tangent Plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Waypoint { x, y }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneId {
    Inner,
    Outer,
    Merge,
    /// Track centerline, used for station bookkeeping and bounds.
    Center,
}

/// One arc-length sample of a raceline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub s: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub kappa: f64,
}

/// Target returned by a lookahead query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookaheadTarget {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub psi_dot: f64,
    pub s: f64,
}

/// Result of projecting a position onto a raceline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    /// Signed distance, positive to the left of the direction of travel.
    pub lateral: f64,
}

/// Arc-length parameterized path. Closed racelines repeat their first pose as the last sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Raceline {
    lane: LaneId,
    samples: Vec<Station>,
    total_length: f64,
    closed: bool,
}

const MIN_WAYPOINT_SEPARATION: f64 = 0.1;

/// Builds a raceline by interpolating `waypoints` with the blended-arc spline and
/// resampling each span at (at most) `sample_spacing` meters. Every waypoint is a sample.
pub fn build_raceline(
    lane: LaneId,
    waypoints: &[Waypoint],
    closed: bool,
    sample_spacing: f64,
) -> Result<Raceline, TrackError> {
    let mut pts: Vec<(f64, f64)> = waypoints.iter().map(|w| (w.x, w.y)).collect();
    if closed && pts.len() >= 2 {
        let (f, l) = (pts[0], pts[pts.len() - 1]);
        if (f.0 - l.0).hypot(f.1 - l.1) < 1e-9 {
            pts.pop();
        }
    }
    if pts.len() < 4 {
        return Err(TrackError::TooFewWaypoints(pts.len()));
    }
    if !(sample_spacing > 0.1 && sample_spacing <= 10.0) {
        return Err(TrackError::InvalidSampleSpacing(sample_spacing));
    }
    if let Some(i) = pts.iter().position(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(TrackError::NonFiniteWaypoint(i));
    }
    let n = pts.len();
    let pairs = if closed { n } else { n - 1 };
    for i in 0..pairs {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        if (b.0 - a.0).hypot(b.1 - a.1) <= MIN_WAYPOINT_SEPARATION {
            return Err(TrackError::CoincidentWaypoints(i));
        }
    }

    let spline = BlendedArcSpline::new(&pts, closed);
    let mut samples = Vec::new();
    let mut s0 = 0.0;
    let mut prev_psi: Option<f64> = None;
    let mut push = |s: f64, c: super::spline::CurvePoint, samples: &mut Vec<Station>| {
        let raw = c.heading();
        let psi = match prev_psi {
            Some(p) => unwrap_near(raw, p),
            None => raw,
        };
        prev_psi = Some(psi);
        samples.push(Station {
            s,
            x: c.pos.0,
            y: c.pos.1,
            psi,
            kappa: c.curvature(),
        });
    };
    for i in 0..spline.segment_count() {
        let len = spline.arc_length(i, 1.0);
        let count = (len / sample_spacing).ceil().max(1.0) as usize;
        for j in 0..count {
            let target = len * j as f64 / count as f64;
            let u = spline.param_at_length(i, target, len);
            push(s0 + target, spline.eval(i, u), &mut samples);
        }
        s0 += len;
    }
    // closing sample: exact copy of the first pose for closed lines, final waypoint otherwise
    let last_seg = spline.segment_count() - 1;
    let end = spline.eval(last_seg, 1.0);
    if closed {
        let first = samples[0];
        let psi = unwrap_near(first.psi, prev_psi.unwrap_or(first.psi));
        samples.push(Station {
            s: s0,
            x: first.x,
            y: first.y,
            psi,
            kappa: first.kappa,
        });
    } else {
        push(s0, end, &mut samples);
    }

    let line = Raceline {
        lane,
        samples,
        total_length: s0,
        closed,
    };
    if let Some((a, b)) = line.find_self_intersection() {
        return Err(TrackError::SelfIntersecting { s_a: a, s_b: b });
    }
    Ok(line)
}

impl Raceline {
    /// Builds a raceline from already dense, ordered points. Heading and curvature are
    /// estimated with central differences; stations follow the polyline length.
    pub fn from_dense_points(
        lane: LaneId,
        points: &[(f64, f64)],
        closed: bool,
    ) -> Result<Raceline, TrackError> {
        if points.len() < 4 {
            return Err(TrackError::TooFewWaypoints(points.len()));
        }
        let mut pts = points.to_vec();
        if closed {
            let (f, l) = (pts[0], pts[pts.len() - 1]);
            if (f.0 - l.0).hypot(f.1 - l.1) < 1e-9 {
                pts.pop();
            }
        }
        let n = pts.len();
        let idx = |i: isize| -> (f64, f64) {
            if closed {
                pts[i.rem_euclid(n as isize) as usize]
            } else {
                pts[i.clamp(0, n as isize - 1) as usize]
            }
        };
        let mut samples = Vec::with_capacity(n + 1);
        let mut s = 0.0;
        let mut prev_psi: Option<f64> = None;
        for i in 0..n {
            if i > 0 {
                let (a, b) = (pts[i - 1], pts[i]);
                let d = (b.0 - a.0).hypot(b.1 - a.1);
                if d <= 1e-9 {
                    return Err(TrackError::CoincidentWaypoints(i - 1));
                }
                s += d;
            }
            let ii = i as isize;
            let (p0, p1, p2) = (idx(ii - 1), pts[i], idx(ii + 1));
            let dir = (p2.0 - p0.0, p2.1 - p0.1);
            let raw = dir.1.atan2(dir.0);
            let psi = prev_psi.map_or(raw, |p| unwrap_near(raw, p));
            prev_psi = Some(psi);
            let kappa = if !closed && (i == 0 || i == n - 1) {
                0.0
            } else {
                super::spline::menger_curvature(p0, p1, p2)
            };
            samples.push(Station {
                s,
                x: p1.0,
                y: p1.1,
                psi,
                kappa,
            });
        }
        if !closed {
            // one-sided curvature at the ends
            samples[0].kappa = samples[1].kappa;
            samples[n - 1].kappa = samples[n - 2].kappa;
        } else {
            let (a, b) = (pts[n - 1], pts[0]);
            s += (b.0 - a.0).hypot(b.1 - a.1);
            let first = samples[0];
            let psi = unwrap_near(first.psi, prev_psi.unwrap_or(first.psi));
            samples.push(Station { s, psi, ..first });
        }
        Ok(Raceline {
            lane,
            samples,
            total_length: s,
            closed,
        })
    }

    /// Open path through the given stations, keeping their heading and curvature.
    /// Stations are re-numbered from zero by cumulative polyline length.
    pub fn open_from_stations(lane: LaneId, stations: &[Station]) -> Result<Raceline, TrackError> {
        if stations.len() < 2 {
            return Err(TrackError::TooFewWaypoints(stations.len()));
        }
        let mut samples = Vec::with_capacity(stations.len());
        let mut s = 0.0;
        let mut prev_psi: Option<f64> = None;
        for (i, st) in stations.iter().enumerate() {
            if i > 0 {
                let p = &stations[i - 1];
                let d = (st.x - p.x).hypot(st.y - p.y);
                if d <= 1e-9 {
                    return Err(TrackError::CoincidentWaypoints(i - 1));
                }
                s += d;
            }
            let psi = prev_psi.map_or(st.psi, |p| unwrap_near(st.psi, p));
            prev_psi = Some(psi);
            samples.push(Station { s, psi, ..*st });
        }
        Ok(Raceline {
            lane,
            samples,
            total_length: s,
            closed: false,
        })
    }

    pub fn lane(&self) -> LaneId {
        self.lane
    }

    pub fn with_lane(mut self, lane: LaneId) -> Self {
        self.lane = lane;
        self
    }

    pub fn samples(&self) -> &[Station] {
        &self.samples
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Normalizes a station into `[0, L)` for closed lines, clamps into `[0, L]` otherwise.
    pub fn normalize_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_length)
        } else {
            s.clamp(0.0, self.total_length)
        }
    }

    /// Index `i` such that `samples[i].s <= s < samples[i + 1].s`.
    fn segment_index(&self, s: f64) -> usize {
        let n = self.samples.len();
        match self
            .samples
            .binary_search_by(|st| st.s.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        }
    }

    /// Interpolated pose at station `s` (wrapped or clamped as appropriate).
    pub fn pose_at(&self, s: f64) -> Station {
        let s = self.normalize_s(s);
        let i = self.segment_index(s);
        let (a, b) = (self.samples[i], self.samples[i + 1]);
        let span = b.s - a.s;
        let t = if span > 0.0 { ((s - a.s) / span).clamp(0.0, 1.0) } else { 0.0 };
        Station {
            s,
            x: a.x + t * (b.x - a.x),
            y: a.y + t * (b.y - a.y),
            psi: wrap_angle(a.psi + t * (b.psi - a.psi)),
            kappa: a.kappa + t * (b.kappa - a.kappa),
        }
    }

    /// Projects `(x, y)` onto the raceline: nearest sample first, then an analytic
    /// projection onto the two polyline segments adjacent to it.
    pub fn closest_point(&self, x: f64, y: f64) -> Projection {
        let n = self.samples.len();
        // closed lines: the final sample duplicates the first
        let unique = if self.closed { n - 1 } else { n };
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (i, st) in self.samples[..unique].iter().enumerate() {
            let d2 = (st.x - x).powi(2) + (st.y - y).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        self.refine_projection(best, x, y)
    }

    /// Like [`closest_point`](Self::closest_point) but only scans samples within
    /// `window` meters of station `hint`. Falls back to a full scan on open lines
    /// when the hint window clips an end.
    pub fn closest_point_near(&self, x: f64, y: f64, hint: f64, window: f64) -> Projection {
        let n = self.samples.len();
        let unique = if self.closed { n - 1 } else { n };
        let spacing = self.total_length / (unique.max(2) - 1) as f64;
        let reach = (window / spacing).ceil() as isize + 1;
        if 2 * reach as usize >= unique {
            return self.closest_point(x, y);
        }
        let centre = self.segment_index(self.normalize_s(hint)) as isize;
        let mut best = centre.rem_euclid(unique as isize) as usize;
        let mut best_d2 = f64::INFINITY;
        for k in -reach..=reach {
            let i = centre + k;
            let i = if self.closed {
                i.rem_euclid(unique as isize) as usize
            } else if i < 0 || i >= unique as isize {
                continue;
            } else {
                i as usize
            };
            let st = &self.samples[i];
            let d2 = (st.x - x).powi(2) + (st.y - y).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        self.refine_projection(best, x, y)
    }

    fn refine_projection(&self, best: usize, x: f64, y: f64) -> Projection {
        let n = self.samples.len();
        let mut candidates: Vec<(usize, usize)> = Vec::with_capacity(2);
        if best + 1 < n {
            candidates.push((best, best + 1));
        }
        if best > 0 {
            candidates.push((best - 1, best));
        } else if self.closed {
            candidates.push((n - 2, n - 1));
        }
        let mut out = Projection {
            s: self.samples[best].s,
            lateral: 0.0,
        };
        let mut out_d = f64::INFINITY;
        for (ia, ib) in candidates {
            let (a, b) = (self.samples[ia], self.samples[ib]);
            let seg = (b.x - a.x, b.y - a.y);
            let len2 = seg.0 * seg.0 + seg.1 * seg.1;
            let rel = (x - a.x, y - a.y);
            let t = if len2 > 0.0 {
                ((rel.0 * seg.0 + rel.1 * seg.1) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let px = a.x + t * seg.0;
            let py = a.y + t * seg.1;
            let d = (x - px).hypot(y - py);
            if d < out_d {
                out_d = d;
                let side = cross(seg, (x - px, y - py));
                out = Projection {
                    s: self.normalize_s(a.s + t * (b.s - a.s)),
                    lateral: if side >= 0.0 { d } else { -d },
                };
            }
        }
        out
    }

    /// Point `d` meters ahead of the projection of `(x, y)`. `psi_dot` is the
    /// curvature there times `ref_speed`.
    pub fn lookahead(&self, x: f64, y: f64, d: f64, ref_speed: f64) -> LookaheadTarget {
        let proj = self.closest_point(x, y);
        self.lookahead_from(proj.s, d, ref_speed)
    }

    pub fn lookahead_from(&self, s: f64, d: f64, ref_speed: f64) -> LookaheadTarget {
        let st = self.pose_at(s + d);
        LookaheadTarget {
            x: st.x,
            y: st.y,
            psi: st.psi,
            psi_dot: st.kappa * ref_speed,
            s: st.s,
        }
    }

    /// Signed station difference `to - from`, wrapped into `(-L/2, L/2]` on closed lines.
    pub fn station_delta(&self, from: f64, to: f64) -> f64 {
        let d = to - from;
        if !self.closed {
            return d;
        }
        let l = self.total_length;
        let mut w = d.rem_euclid(l);
        if w > l / 2.0 {
            w -= l;
        }
        w
    }

    /// Left-hand normal at station `s`.
    pub fn normal_at(&self, s: f64) -> (f64, f64) {
        let psi = self.pose_at(s).psi;
        (-psi.sin(), psi.cos())
    }

    /// Returns the stations of the first pair of non-adjacent crossing polyline segments.
    fn find_self_intersection(&self) -> Option<(f64, f64)> {
        let pts = &self.samples;
        let m = pts.len() - 1;
        let mut segs: Vec<(f64, f64, f64, f64, usize)> = (0..m)
            .map(|i| {
                let (a, b) = (pts[i], pts[i + 1]);
                (a.x.min(b.x), a.x.max(b.x), a.y.min(b.y), a.y.max(b.y), i)
            })
            .collect();
        segs.sort_by(|p, q| p.0.total_cmp(&q.0));
        for (k, &(_, hx, ly, hy, i)) in segs.iter().enumerate() {
            for &(lx2, _, ly2, hy2, j) in &segs[k + 1..] {
                if lx2 > hx {
                    break;
                }
                if ly2 > hy || hy2 < ly {
                    continue;
                }
                let adjacent = i.abs_diff(j) <= 1 || (self.closed && i.abs_diff(j) == m - 1);
                if adjacent {
                    continue;
                }
                if segments_cross(
                    (pts[i].x, pts[i].y),
                    (pts[i + 1].x, pts[i + 1].y),
                    (pts[j].x, pts[j].y),
                    (pts[j + 1].x, pts[j + 1].y),
                ) {
                    return Some((pts[i].s, pts[j].s));
                }
            }
        }
        None
    }
}

fn segments_cross(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| cross((b.0 - a.0, b.1 - a.1), (c.0 - a.0, c.1 - a.1));
    let d1 = d(q1, q2, p1);
    let d2 = d(q1, q2, p2);
    let d3 = d(p1, p2, q1);
    let d4 = d(p1, p2, q2);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}
