//! Small 2D geometric primitives shared by the mesh and the discretisations.

use nalgebra::{Point2, Vector2};

pub type Point = Point2<f64>;
pub type Vec2 = Vector2<f64>;

/// Counter-clockwise 90 degree rotation.
pub fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

/// z-component of the cross product of two planar vectors.
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// A triangle given by its three vertices.
#[derive(Clone, Copy, Debug)]
pub struct Triangle {
    pub v: [Point; 3],
}

impl Triangle {
    pub fn new(a: Point, b: Point, c: Point) -> Self {
        Self { v: [a, b, c] }
    }

    /// Signed area (positive for counter-clockwise orientation).
    pub fn signed_area(&self) -> f64 {
        0.5 * cross(self.v[1] - self.v[0], self.v[2] - self.v[0])
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn centroid(&self) -> Point {
        Point::from((self.v[0].coords + self.v[1].coords + self.v[2].coords) / 3.0)
    }

    /// Longest side, which is also the diameter of the triangle.
    pub fn diameter(&self) -> f64 {
        let e0 = (self.v[1] - self.v[0]).norm();
        let e1 = (self.v[2] - self.v[1]).norm();
        let e2 = (self.v[0] - self.v[2]).norm();
        e0.max(e1).max(e2)
    }

    /// Radius of the inscribed circle, `2 * area / perimeter`.
    pub fn inradius(&self) -> f64 {
        let p = (self.v[1] - self.v[0]).norm()
            + (self.v[2] - self.v[1]).norm()
            + (self.v[0] - self.v[2]).norm();
        2.0 * self.area() / p
    }

    /// Barycentric coordinates of `x` with respect to the triangle.
    pub fn barycentric(&self, x: Point) -> [f64; 3] {
        let det = cross(self.v[1] - self.v[0], self.v[2] - self.v[0]);
        let l1 = cross(x - self.v[0], self.v[2] - self.v[0]) / det;
        let l2 = cross(self.v[1] - self.v[0], x - self.v[0]) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Containment test with an absolute tolerance on the barycentric
    /// coordinates (points on edges count as inside).
    pub fn contains(&self, x: Point, tol: f64) -> bool {
        let b = self.barycentric(x);
        b.iter().all(|&l| l >= -tol)
    }

    /// Gradients of the three barycentric (P1 nodal) basis functions.
    pub fn barycentric_gradients(&self) -> [Vec2; 3] {
        let det = cross(self.v[1] - self.v[0], self.v[2] - self.v[0]);
        // grad lambda_i is perpendicular to the opposite edge.
        let g = |a: Point, b: Point| perp(b - a) / det;
        [
            g(self.v[1], self.v[2]),
            g(self.v[2], self.v[0]),
            g(self.v[0], self.v[1]),
        ]
    }

    /// Map barycentric coordinates to a physical point.
    pub fn point_at(&self, b: [f64; 3]) -> Point {
        Point::from(b[0] * self.v[0].coords + b[1] * self.v[1].coords + b[2] * self.v[2].coords)
    }
}

/// Area of a simple polygon (shoelace formula); vertices in loop order.
pub fn polygon_area(pts: &[Point]) -> f64 {
    let n = pts.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        s += cross(a.coords, b.coords);
    }
    0.5 * s.abs()
}

/// Centroid of a simple polygon.
pub fn polygon_centroid(pts: &[Point]) -> Point {
    let n = pts.len();
    let mut a2 = 0.0;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for i in 0..n {
        let p = pts[i];
        let q = pts[(i + 1) % n];
        let w = cross(p.coords, q.coords);
        a2 += w;
        cx += (p.x + q.x) * w;
        cy += (p.y + q.y) * w;
    }
    Point::new(cx / (3.0 * a2), cy / (3.0 * a2))
}

/// Maximum pairwise distance between the vertices of a polygon.
pub fn polygon_diameter(pts: &[Point]) -> f64 {
    let mut d = 0.0f64;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            d = d.max((pts[j] - pts[i]).norm());
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_triangle_geometry() {
        let t = Triangle::new(
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        );
        assert!((t.area() - 0.5).abs() < 1e-15);
        assert!((t.diameter() - 2f64.sqrt()).abs() < 1e-15);
        // r = 2A/P = 1/(2 + sqrt 2)
        assert!((t.inradius() - 1.0 / (2.0 + 2f64.sqrt())).abs() < 1e-15);
        let g = t.barycentric_gradients();
        assert!((g[1] - Vec2::new(1.0, 0.0)).norm() < 1e-15);
        assert!((g[2] - Vec2::new(0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn barycentric_roundtrip() {
        let t = Triangle::new(
            Point::new(0.2, -0.1),
            Point::new(1.3, 0.4),
            Point::new(0.5, 1.7),
        );
        let x = Point::new(0.6, 0.5);
        let b = t.barycentric(x);
        assert!((t.point_at(b) - x).norm() < 1e-14);
        assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn polygon_area_square() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 1.0),
            Point::new(0.0, 1.0),
        ];
        assert!((polygon_area(&pts) - 2.0).abs() < 1e-14);
        let c = polygon_centroid(&pts);
        assert!((c - Point::new(1.0, 0.5)).norm() < 1e-14);
    }
}
