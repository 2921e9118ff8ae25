use super::raceline::Raceline;

/// Closed polygonal boundary with a cached bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Boundary {
    vertices: Vec<(f64, f64)>,
    min: (f64, f64),
    max: (f64, f64),
}

const ON_EDGE_TOL: f64 = 1e-9;

impl Boundary {
    pub fn from_points(mut vertices: Vec<(f64, f64)>) -> Self {
        if vertices.len() >= 2 {
            let (f, l) = (vertices[0], vertices[vertices.len() - 1]);
            if (f.0 - l.0).hypot(f.1 - l.1) < 1e-9 {
                vertices.pop();
            }
        }
        let mut min = (f64::INFINITY, f64::INFINITY);
        let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &vertices {
            min = (min.0.min(v.0), min.1.min(v.1));
            max = (max.0.max(v.0), max.1.max(v.1));
        }
        Boundary { vertices, min, max }
    }

    pub fn from_raceline(line: &Raceline) -> Self {
        Self::from_points(line.samples().iter().map(|s| (s.x, s.y)).collect())
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    /// Strict interior test. Points on an edge (within 1e-9 m) are outside.
    pub fn strictly_contains(&self, p: (f64, f64)) -> bool {
        if p.0 <= self.min.0 || p.0 >= self.max.0 || p.1 <= self.min.1 || p.1 >= self.max.1 {
            return false;
        }
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if point_segment_distance(p, a, b) <= ON_EDGE_TOL {
                return false;
            }
            if (a.1 > p.1) != (b.1 > p.1) {
                let x_cross = a.0 + (p.1 - a.1) / (b.1 - a.1) * (b.0 - a.0);
                if p.0 < x_cross {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Signed polygon area, positive for counter-clockwise vertex order.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                a.0 * b.1 - b.0 * a.1
            })
            .sum::<f64>()
            / 2.0
    }
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let ab = (b.0 - a.0, b.1 - a.1);
    let ap = (p.0 - a.0, p.1 - a.1);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * ab.0).hypot(p.1 - a.1 - t * ab.1)
}

/// Drivable region between two closed boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackBounds {
    pub inner: Boundary,
    pub outer: Boundary,
    pub width: f64,
}

impl TrackBounds {
    /// True iff `pos` is strictly inside the outer boundary and strictly outside the inner one.
    pub fn contains(&self, pos: (f64, f64)) -> bool {
        if !self.outer.strictly_contains(pos) {
            return false;
        }
        // on-edge points of the inner wall count as outside the track
        let on_inner_edge = {
            let v = self.inner.vertices();
            let n = v.len();
            (0..n).any(|i| point_segment_distance(pos, v[i], v[(i + 1) % n]) <= ON_EDGE_TOL)
        };
        !on_inner_edge && !self.inner.strictly_contains(pos)
    }

    /// Checks that every inner vertex lies strictly inside the outer boundary.
    pub fn outer_encloses_inner(&self) -> bool {
        self.inner
            .vertices()
            .iter()
            .all(|&v| self.outer.strictly_contains(v))
    }
}

pub fn in_track_bounds(bounds: &TrackBounds, pos: (f64, f64)) -> bool {
    bounds.contains(pos)
}
