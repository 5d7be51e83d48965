//! Planar geometry: points, integer rectangles, quadrilaterals and 2-D affine
//! maps. Coordinates are `(x, y)` = (column, row) in pixels, with the origin
//! at the centre of the top-left pixel.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

pub fn centroid(points: &[Point]) -> Point {
    let n = points.len().max(1) as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    Point::new(sx / n, sy / n)
}

/// Axis-aligned integer rectangle; `x`, `y` may be negative for windows that
/// extend past the image border.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub const fn new(x: i64, y: i64, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn right(&self) -> i64 {
        self.x + self.w as i64
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h as i64
    }

    /// Intersection with `[0, width) × [0, height)`; `None` when empty.
    pub fn clip(&self, width: usize, height: usize) -> Option<Rect> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = self.right().min(width as i64);
        let y1 = self.bottom().min(height as i64);
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, (x1 - x0) as usize, (y1 - y0) as usize))
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x >= 0 && self.y >= 0 && self.right() <= width as i64 && self.bottom() <= height as i64
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x as f64 - 0.5
            && p.y >= self.y as f64 - 0.5
            && p.x < self.right() as f64 - 0.5
            && p.y < self.bottom() as f64 - 0.5
    }

    pub fn contains_pixel(&self, x: i64, y: i64) -> bool {
        x >= self.x && y >= self.y && x < self.right() && y < self.bottom()
    }

    /// Outer corners (pixel edges), clockwise from top-left.
    pub fn quad(&self) -> Quad {
        let (x0, y0) = (self.x as f64 - 0.5, self.y as f64 - 0.5);
        let (x1, y1) = (self.right() as f64 - 0.5, self.bottom() as f64 - 0.5);
        Quad([Point::new(x0, y0), Point::new(x1, y0), Point::new(x1, y1), Point::new(x0, y1)])
    }
}

/// Convex quadrilateral, e.g. a rotated crop window mapped back to the
/// source image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quad(pub [Point; 4]);

impl Quad {
    pub fn transformed(&self, t: &Affine2) -> Quad {
        Quad(self.0.map(|p| t.apply(p)))
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.0)
    }

    /// Point-in-convex-polygon test (either winding).
    pub fn contains(&self, p: Point) -> bool {
        let mut sign = 0.0f64;
        for i in 0..4 {
            let a = self.0[i];
            let b = self.0[(i + 1) % 4];
            let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
            if cross != 0.0 {
                if sign == 0.0 {
                    sign = cross.signum();
                } else if cross.signum() != sign {
                    return false;
                }
            }
        }
        true
    }

    pub fn bounding_rect(&self) -> Rect {
        let xs = self.0.iter().map(|p| p.x);
        let ys = self.0.iter().map(|p| p.y);
        let x0 = xs.clone().fold(f64::INFINITY, f64::min).floor() as i64;
        let x1 = xs.fold(f64::NEG_INFINITY, f64::max).ceil() as i64;
        let y0 = ys.clone().fold(f64::INFINITY, f64::min).floor() as i64;
        let y1 = ys.fold(f64::NEG_INFINITY, f64::max).ceil() as i64;
        Rect::new(x0, y0, (x1 - x0 + 1).max(0) as usize, (y1 - y0 + 1).max(0) as usize)
    }
}

/// `p ↦ A p + t`, stored row-major as `[[a, b, tx], [c, d, ty]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 3]; 2],
}

impl Default for Affine2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Affine2 {
    pub const fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy]],
        }
    }

    /// Rotation by `angle` radians about `center`. With y pointing down,
    /// positive angles turn clockwise on screen.
    pub fn rotation_about(center: Point, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let lin = Self {
            m: [[c, -s, 0.0], [s, c, 0.0]],
        };
        Self::translation(center.x, center.y)
            .then_after(&lin)
            .then_after(&Self::translation(-center.x, -center.y))
    }

    pub fn scale_about(center: Point, sx: f64, sy: f64) -> Self {
        let lin = Self {
            m: [[sx, 0.0, 0.0], [0.0, sy, 0.0]],
        };
        Self::translation(center.x, center.y)
            .then_after(&lin)
            .then_after(&Self::translation(-center.x, -center.y))
    }

    /// `self ∘ inner`: applies `inner` first, then `self`.
    pub fn then_after(&self, inner: &Affine2) -> Affine2 {
        let a = &self.m;
        let b = &inner.m;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            row[0] = a[r][0] * b[0][0] + a[r][1] * b[1][0];
            row[1] = a[r][0] * b[0][1] + a[r][1] * b[1][1];
            row[2] = a[r][0] * b[0][2] + a[r][1] * b[1][2] + a[r][2];
        }
        Affine2 { m }
    }

    /// Applies `self` first, then `outer`.
    pub fn then(&self, outer: &Affine2) -> Affine2 {
        outer.then_after(self)
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        Point::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        )
    }

    pub fn determinant(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return None;
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Some(Affine2 {
            m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]],
        })
    }

    /// Rotation angle of the linear part, in radians.
    pub fn rotation_angle(&self) -> f64 {
        self.m[1][0].atan2(self.m[0][0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_clip() {
        let r = Rect::new(-5, 3, 10, 10);
        assert_eq!(r.clip(20, 8), Some(Rect::new(0, 3, 5, 5)));
        assert_eq!(Rect::new(30, 0, 4, 4).clip(20, 20), None);
    }

    #[test]
    fn affine_inverse_and_rotation() {
        let t = Affine2::rotation_about(Point::new(3.0, 4.0), 0.7).then(&Affine2::translation(2.0, -1.0));
        let inv = t.inverse().unwrap();
        let p = Point::new(-1.5, 9.25);
        let q = inv.apply(t.apply(p));
        assert!(p.dist(q) < 1e-12);
        assert!((t.rotation_angle() - 0.7).abs() < 1e-12);
        let c = Affine2::rotation_about(Point::new(3.0, 4.0), 1.1).apply(Point::new(3.0, 4.0));
        assert!(c.dist(Point::new(3.0, 4.0)) < 1e-12);
    }

    #[test]
    fn quad_contains() {
        let q = Rect::new(0, 0, 4, 4).quad();
        assert!(q.contains(Point::new(1.0, 1.0)));
        assert!(!q.contains(Point::new(5.0, 1.0)));
        let r = q.transformed(&Affine2::rotation_about(Point::new(1.5, 1.5), 0.5));
        assert!(r.contains(Point::new(1.5, 1.5)));
    }
}
