//! Small 2D geometry helpers: vectors, polylines with arclength lookup, and
//! oriented-box overlap tests.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the cross product; positive when `o` is to the left.
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        self.sub(o).norm()
    }

    pub fn unit_from_angle(theta: f64) -> Vec2 {
        Vec2::new(theta.cos(), theta.sin())
    }

    /// Left-hand normal (90 degrees counterclockwise).
    pub fn left(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    /// Rotate by `theta` radians.
    pub fn rot(self, theta: f64) -> Vec2 {
        let (s, c) = theta.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Normalize an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// Piecewise-linear curve with cached cumulative arclength.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Polyline {
    pts: Vec<Vec2>,
    cum: Vec<f64>,
}

impl Polyline {
    pub fn new(pts: Vec<Vec2>) -> Self {
        assert!(pts.len() >= 2, "polyline needs at least two points");
        let mut cum = Vec::with_capacity(pts.len());
        let mut acc = 0.0;
        cum.push(0.0);
        for w in pts.windows(2) {
            acc += w[0].dist(w[1]);
            cum.push(acc);
        }
        Self { pts, cum }
    }

    pub fn length(&self) -> f64 {
        *self.cum.last().unwrap()
    }

    pub fn points(&self) -> &[Vec2] {
        &self.pts
    }

    fn segment_at(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        // binary search over cumulative lengths
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.pts.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.pts.len() - 2),
        };
        let seg_len = (self.cum[i + 1] - self.cum[i]).max(1e-12);
        ((i), ((s - self.cum[i]) / seg_len).clamp(0.0, 1.0))
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, t) = self.segment_at(s);
        let a = self.pts[i];
        let b = self.pts[i + 1];
        a.add(b.sub(a).scale(t))
    }

    pub fn heading_at(&self, s: f64) -> f64 {
        let (i, _) = self.segment_at(s);
        let d = self.pts[i + 1].sub(self.pts[i]);
        d.y.atan2(d.x)
    }

    /// Project `p` onto the curve. Returns (arclength, signed lateral offset),
    /// lateral positive to the left of travel.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let (s, lat, _) = self.project_full(p);
        (s, lat)
    }

    /// Like `project`, additionally returning the Euclidean distance to the
    /// closest curve point (differs from |lateral| when the projection clamps
    /// to an endpoint).
    pub fn project_full(&self, p: Vec2) -> (f64, f64, f64) {
        let mut best = (0.0, f64::INFINITY, 0.0);
        for i in 0..self.pts.len() - 1 {
            let a = self.pts[i];
            let b = self.pts[i + 1];
            let ab = b.sub(a);
            let len2 = ab.dot(ab).max(1e-12);
            let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
            let q = a.add(ab.scale(t));
            let d = p.dist(q);
            if d < best.1 {
                let s = self.cum[i] + t * len2.sqrt();
                let dir = ab.scale(1.0 / len2.sqrt());
                best = (s, d, dir.cross(p.sub(q)));
            }
        }
        (best.0, best.2, best.1)
    }
}

/// Oriented bounding box described by center, yaw, and half extents.
#[derive(Debug, Clone, Copy)]
pub struct Obb {
    pub center: Vec2,
    pub yaw: f64,
    pub half_len: f64,
    pub half_wid: f64,
}

impl Obb {
    fn axes(&self) -> (Vec2, Vec2) {
        let fwd = Vec2::unit_from_angle(self.yaw);
        (fwd, fwd.left())
    }

    fn corners(&self) -> [Vec2; 4] {
        let (f, l) = self.axes();
        let a = f.scale(self.half_len);
        let b = l.scale(self.half_wid);
        [
            self.center.add(a).add(b),
            self.center.add(a).sub(b),
            self.center.sub(a).sub(b),
            self.center.sub(a).add(b),
        ]
    }

    /// Separating-axis overlap test for two oriented rectangles.
    pub fn overlaps(&self, other: &Obb) -> bool {
        let (a1, a2) = self.axes();
        let (b1, b2) = other.axes();
        for axis in [a1, a2, b1, b2] {
            let (min_a, max_a) = project_corners(&self.corners(), axis);
            let (min_b, max_b) = project_corners(&other.corners(), axis);
            if max_a < min_b || max_b < min_a {
                return false;
            }
        }
        true
    }
}

fn project_corners(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in corners {
        let v = c.dot(axis);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = wrap_angle(0.7 * k as f64);
            assert!(a > -std::f64::consts::PI && a <= std::f64::consts::PI);
        }
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    #[test]
    fn polyline_roundtrip() {
        let p = Polyline::new(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(10.0, 0.0),
            Vec2::new(10.0, 10.0),
        ]);
        assert!((p.length() - 20.0).abs() < 1e-12);
        let q = p.point_at(15.0);
        assert!((q.x - 10.0).abs() < 1e-9 && (q.y - 5.0).abs() < 1e-9);
        let (s, lat) = p.project(Vec2::new(9.0, -2.0));
        assert!((s - 9.0).abs() < 1e-9);
        assert!((lat - -2.0).abs() < 1e-9);
    }

    #[test]
    fn obb_disjoint_and_identical() {
        let a = Obb { center: Vec2::new(0.0, 0.0), yaw: 0.3, half_len: 2.4, half_wid: 0.9 };
        let b = Obb { center: Vec2::new(50.0, 0.0), yaw: 1.2, half_len: 2.4, half_wid: 0.9 };
        assert!(!a.overlaps(&b));
        assert!(a.overlaps(&a));
    }

    #[test]
    fn obb_overlap_symmetric_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10_000 {
            let mk = |rng: &mut ChaCha8Rng| Obb {
                center: Vec2::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0)),
                yaw: rng.random_range(-3.2..3.2),
                half_len: rng.random_range(0.2..3.0),
                half_wid: rng.random_range(0.2..2.0),
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(a.overlaps(&b), b.overlaps(&a));
        }
    }
}
