//! Gauss quadrature on triangles.
//!
//! Rules are stored in barycentric coordinates with weights summing to 1;
//! physical weights are obtained by multiplying with the triangle area.
//! Every integrand assembled by the discretisations is piecewise polynomial
//! on the cells or diamonds, so exactness of the chosen degree is exactness
//! of the integral.

use crate::geom::{Point, Triangle};

/// A symmetric Gauss rule on the reference triangle.
#[derive(Clone, Debug)]
pub struct TriRule {
    /// Barycentric coordinates of the nodes.
    pub nodes: Vec<[f64; 3]>,
    /// Weights normalised to sum to 1.
    pub weights: Vec<f64>,
    /// Polynomial degree integrated exactly.
    pub degree: usize,
}

impl TriRule {
    /// Rule exact for polynomials up to `degree` (supported: 1, 2, 4, 5).
    /// Requests between the supported degrees round up.
    pub fn of_degree(degree: usize) -> Self {
        match degree {
            0 | 1 => Self {
                nodes: vec![[1.0 / 3.0; 3]],
                weights: vec![1.0],
                degree: 1,
            },
            2 => {
                let a = 2.0 / 3.0;
                let b = 1.0 / 6.0;
                Self {
                    nodes: vec![[a, b, b], [b, a, b], [b, b, a]],
                    weights: vec![1.0 / 3.0; 3],
                    degree: 2,
                }
            }
            3 | 4 => {
                // 6-point Strang rule, degree 4.
                let a1 = 0.816847572980459;
                let b1 = 0.091576213509771;
                let a2 = 0.108103018168070;
                let b2 = 0.445948490915965;
                let w1 = 0.109951743655322;
                let w2 = 0.223381589678011;
                Self {
                    nodes: vec![
                        [a1, b1, b1],
                        [b1, a1, b1],
                        [b1, b1, a1],
                        [a2, b2, b2],
                        [b2, a2, b2],
                        [b2, b2, a2],
                    ],
                    weights: vec![w1, w1, w1, w2, w2, w2],
                    degree: 4,
                }
            }
            _ => {
                // 7-point rule, degree 5.
                let s = 0.101286507323456;
                let t = 0.470142064105115;
                let u = 0.125939180544827;
                let v = 0.132394152788506;
                Self {
                    nodes: vec![
                        [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                        [1.0 - 2.0 * s, s, s],
                        [s, 1.0 - 2.0 * s, s],
                        [s, s, 1.0 - 2.0 * s],
                        [1.0 - 2.0 * t, t, t],
                        [t, 1.0 - 2.0 * t, t],
                        [t, t, 1.0 - 2.0 * t],
                    ],
                    weights: vec![0.225, u, u, u, v, v, v],
                    degree: 5,
                }
            }
        }
    }

    /// Physical nodes and weights on a given triangle.
    pub fn on(&self, tri: &Triangle) -> impl Iterator<Item = (Point, f64)> + '_ {
        let area = tri.area();
        let tri = *tri;
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(move |(b, w)| (tri.point_at(*b), w * area))
    }

    /// Integrate a function over a triangle.
    pub fn integrate(&self, tri: &Triangle, f: impl Fn(Point) -> f64) -> f64 {
        self.on(tri).map(|(x, w)| w * f(x)).sum()
    }
}

/// Uniformly subdivide a triangle into `n*n` congruent sub-triangles.
/// Used by oracle-style quadrature over non-polynomial integrands.
pub fn subdivide(tri: &Triangle, n: usize) -> Vec<Triangle> {
    let mut out = Vec::with_capacity(n * n);
    let p = |i: usize, j: usize| {
        let l1 = i as f64 / n as f64;
        let l2 = j as f64 / n as f64;
        tri.point_at([1.0 - l1 - l2, l1, l2])
    };
    for i in 0..n {
        for j in 0..(n - i) {
            out.push(Triangle::new(p(i, j), p(i + 1, j), p(i, j + 1)));
            if j + i + 1 < n {
                out.push(Triangle::new(p(i + 1, j), p(i + 1, j + 1), p(i, j + 1)));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point;

    fn unit_tri() -> Triangle {
        Triangle::new(
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        )
    }

    /// Exact value of the integral of x^a y^b over the reference triangle.
    fn monomial_exact(a: u32, b: u32) -> f64 {
        // a! b! / (a+b+2)!
        let fact = |k: u32| (1..=k).map(f64::from).product::<f64>().max(1.0);
        fact(a) * fact(b) / fact(a + b + 2)
    }

    #[test]
    fn rules_integrate_monomials_exactly() {
        for deg in [1usize, 2, 4, 5] {
            let rule = TriRule::of_degree(deg);
            for a in 0..=deg as u32 {
                for b in 0..=(deg as u32 - a) {
                    let got = rule.integrate(&unit_tri(), |p| p.x.powi(a as i32) * p.y.powi(b as i32));
                    let want = monomial_exact(a, b);
                    assert!(
                        (got - want).abs() < 1e-14,
                        "degree {deg} rule failed on x^{a} y^{b}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn subdivision_tiles_area() {
        let tri = Triangle::new(
            Point::new(0.1, 0.2),
            Point::new(1.4, 0.3),
            Point::new(0.6, 1.1),
        );
        for n in [1, 2, 5] {
            let parts = subdivide(&tri, n);
            assert_eq!(parts.len(), n * n);
            let sum: f64 = parts.iter().map(Triangle::area).sum();
            assert!((sum - tri.area()).abs() < 1e-13 * tri.area());
        }
    }
}
