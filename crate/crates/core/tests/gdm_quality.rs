//! Quality functionals of the gradient-discretisation abstraction:
//! hand-evaluated oracles on tiny custom GDs, independent quadrature
//! oracles for the norms, and empirical refinement trends.

use std::f64::consts::PI;
use std::sync::Arc;

use gdellam::fe::P1Gd;
use gdellam::gdm::{
    self, DofVector, FnH1, FnHdiv, FnScalar, GdMatrices, GradientDiscretisation, Piece,
    ScalarField,
};
use gdellam::geom::{Point, Triangle, Vec2};
use gdellam::hmm::HmmGd;
use gdellam::mesh::{PolytopalMesh, Rect};
use gdellam::quadrature::{subdivide, TriRule};

/// A one-dof GD with `Pi v = v` (constant) and zero gradient on the unit
/// square split into two triangles.
struct OneDofGd {
    tris: Vec<Triangle>,
}

impl OneDofGd {
    fn unit() -> Self {
        let a = Point::new(0.0, 0.0);
        let b = Point::new(1.0, 0.0);
        let c = Point::new(1.0, 1.0);
        let d = Point::new(0.0, 1.0);
        Self {
            tris: vec![Triangle::new(a, b, c), Triangle::new(a, c, d)],
        }
    }
}

impl GradientDiscretisation for OneDofGd {
    fn dof_count(&self) -> usize {
        1
    }
    fn piece_count(&self) -> usize {
        self.tris.len()
    }
    fn piece(&self, ip: usize) -> Piece {
        Piece { tri: self.tris[ip], cell: ip }
    }
    fn pi_basis(&self, _ip: usize, _x: Point, out: &mut Vec<(usize, f64)>) {
        out.push((0, 1.0));
    }
    fn grad_basis(&self, _ip: usize, _x: Point, _out: &mut Vec<(usize, Vec2)>) {}
    fn locate_piece(&self, x: Point) -> Option<usize> {
        (0..self.tris.len()).find(|&i| self.tris[i].contains(x, 1e-12))
    }
    fn interpolate_initial(&self, f: &dyn ScalarField) -> DofVector {
        DofVector(vec![f.value(Point::new(0.5, 0.5))])
    }
    fn interpolate_smooth(&self, f: &dyn ScalarField) -> DofVector {
        self.interpolate_initial(f)
    }
}

/// Wraps a GD with both reconstructions scaled by a constant factor.
struct ScaledGd<'a> {
    inner: &'a dyn GradientDiscretisation,
    factor: f64,
}

impl GradientDiscretisation for ScaledGd<'_> {
    fn dof_count(&self) -> usize {
        self.inner.dof_count()
    }
    fn piece_count(&self) -> usize {
        self.inner.piece_count()
    }
    fn piece(&self, ip: usize) -> Piece {
        self.inner.piece(ip)
    }
    fn pi_basis(&self, ip: usize, x: Point, out: &mut Vec<(usize, f64)>) {
        let mut tmp = Vec::new();
        self.inner.pi_basis(ip, x, &mut tmp);
        out.extend(tmp.into_iter().map(|(i, v)| (i, self.factor * v)));
    }
    fn grad_basis(&self, ip: usize, x: Point, out: &mut Vec<(usize, Vec2)>) {
        let mut tmp = Vec::new();
        self.inner.grad_basis(ip, x, &mut tmp);
        out.extend(tmp.into_iter().map(|(i, v)| (i, self.factor * v)));
    }
    fn locate_piece(&self, x: Point) -> Option<usize> {
        self.inner.locate_piece(x)
    }
    fn interpolate_initial(&self, f: &dyn ScalarField) -> DofVector {
        self.inner.interpolate_initial(f)
    }
    fn interpolate_smooth(&self, f: &dyn ScalarField) -> DofVector {
        self.inner.interpolate_smooth(f)
    }
}

/// Wraps a GD with permuted dof indices.
struct PermutedGd<'a> {
    inner: &'a dyn GradientDiscretisation,
    perm: Vec<usize>,
}

impl GradientDiscretisation for PermutedGd<'_> {
    fn dof_count(&self) -> usize {
        self.inner.dof_count()
    }
    fn piece_count(&self) -> usize {
        self.inner.piece_count()
    }
    fn piece(&self, ip: usize) -> Piece {
        self.inner.piece(ip)
    }
    fn pi_basis(&self, ip: usize, x: Point, out: &mut Vec<(usize, f64)>) {
        let mut tmp = Vec::new();
        self.inner.pi_basis(ip, x, &mut tmp);
        out.extend(tmp.into_iter().map(|(i, v)| (self.perm[i], v)));
    }
    fn grad_basis(&self, ip: usize, x: Point, out: &mut Vec<(usize, Vec2)>) {
        let mut tmp = Vec::new();
        self.inner.grad_basis(ip, x, &mut tmp);
        out.extend(tmp.into_iter().map(|(i, v)| (self.perm[i], v)));
    }
    fn locate_piece(&self, x: Point) -> Option<usize> {
        self.inner.locate_piece(x)
    }
    fn interpolate_initial(&self, f: &dyn ScalarField) -> DofVector {
        self.inner.interpolate_initial(f)
    }
    fn interpolate_smooth(&self, f: &dyn ScalarField) -> DofVector {
        self.inner.interpolate_smooth(f)
    }
}

fn hmm(n: usize) -> HmmGd {
    HmmGd::build(Arc::new(PolytopalMesh::cartesian(n, n, Rect::UNIT).unwrap())).unwrap()
}

fn p1(n: usize) -> P1Gd {
    P1Gd::build(Arc::new(PolytopalMesh::triangulated(n, n, Rect::UNIT).unwrap())).unwrap()
}

#[test]
fn one_dof_gd_has_unit_coercivity_constant() {
    // Hand evaluation of the Rayleigh quotient: Pi v = v on the unit
    // square, grad = 0, so |Pi v| = |v| and |v|_D = |int v| = |v|; the
    // quotient is |Omega|^{-1/2} = 1.
    let gd = OneDofGd::unit();
    let m = GdMatrices::build(&gd, 2);
    let c = m.coercivity_constant().unwrap();
    assert!((c - 1.0).abs() < 1e-8, "{c}");
}

#[test]
fn norm_of_zero_vector_is_zero() {
    let gd = hmm(2);
    let m = GdMatrices::build(&gd, 4);
    assert_eq!(m.gd_norm(&DofVector::zeros(gd.dof_count())).unwrap(), 0.0);
}

#[test]
fn norm_rejects_size_mismatch() {
    let gd = hmm(2);
    let m = GdMatrices::build(&gd, 4);
    assert!(m.gd_norm(&DofVector::zeros(3)).is_err());
}

#[test]
fn gd_norm_matches_independent_quadrature_oracle() {
    // The Gram-based norm against pointwise evaluation on a subdivided
    // high-order rule (an independent integration path).
    let gd = hmm(3);
    let n = gd.dof_count();
    let v = DofVector((0..n).map(|i| ((i * 37 % 19) as f64) / 7.0 - 1.0).collect());
    let m = GdMatrices::build(&gd, 4);
    let fast = m.gd_norm(&v).unwrap();

    let rule = TriRule::of_degree(5);
    let mut grad_sq = 0.0;
    let mut mean = 0.0;
    for ip in 0..gd.piece_count() {
        for sub in subdivide(&gd.piece(ip).tri, 3) {
            for (x, w) in rule.on(&sub) {
                grad_sq += w * gdm::eval_grad_in_piece(&gd, &v, ip, x).norm_squared();
                mean += w * gdm::eval_pi_in_piece(&gd, &v, ip, x);
            }
        }
    }
    let oracle = (grad_sq + mean * mean).sqrt();
    assert!((fast - oracle).abs() < 1e-10 * oracle.max(1.0), "{fast} vs {oracle}");
}

#[test]
fn gd_norm_homogeneity() {
    let gd = p1(3);
    let m = GdMatrices::build(&gd, 4);
    let n = gd.dof_count();
    for seed in 0..5u64 {
        let v = DofVector(
            (0..n)
                .map(|i| (((i as u64 + 1) * (seed + 3) * 2654435761) % 1000) as f64 / 500.0 - 1.0)
                .collect(),
        );
        let alpha = -2.75;
        let lhs = m.gd_norm(&v.scale(alpha)).unwrap();
        let rhs = alpha.abs() * m.gd_norm(&v).unwrap();
        assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
    }
}

#[test]
fn reconstruction_linearity_on_random_vectors() {
    let gd = hmm(2);
    let n = gd.dof_count();
    let u = DofVector((0..n).map(|i| ((i * 11 % 23) as f64) / 9.0).collect());
    let v = DofVector((0..n).map(|i| ((i * 29 % 31) as f64) / 11.0).collect());
    let (a, b) = (1.7, -0.4);
    let combo = u.scale(a).axpy(b, &v);
    for ip in 0..gd.piece_count() {
        let x = gd.piece(ip).tri.centroid();
        let lhs = gdm::eval_pi_in_piece(&gd, &combo, ip, x);
        let rhs = a * gdm::eval_pi_in_piece(&gd, &u, ip, x)
            + b * gdm::eval_pi_in_piece(&gd, &v, ip, x);
        assert!((lhs - rhs).abs() < 1e-12);
        let gl = gdm::eval_grad_in_piece(&gd, &combo, ip, x);
        let gr = gdm::eval_grad_in_piece(&gd, &u, ip, x) * a
            + gdm::eval_grad_in_piece(&gd, &v, ip, x) * b;
        assert!((gl - gr).norm() < 1e-12);
    }
}

#[test]
fn coercivity_constant_is_scaling_invariant() {
    // Scaling Pi and Grad jointly leaves the quotient unchanged.
    let gd = p1(2);
    let m1 = GdMatrices::build(&gd, 4).coercivity_constant().unwrap();
    let scaled = ScaledGd { inner: &gd, factor: 2.0 };
    let m2 = GdMatrices::build(&scaled, 4).coercivity_constant().unwrap();
    assert!((m1 - m2).abs() < 1e-7 * m1, "{m1} vs {m2}");
}

#[test]
fn coercivity_constant_is_permutation_invariant() {
    let gd = hmm(2);
    let n = gd.dof_count();
    let perm: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % n).collect();
    {
        // Check it is a permutation.
        let mut seen = vec![false; n];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
    }
    let c1 = GdMatrices::build(&gd, 4).coercivity_constant().unwrap();
    let permuted = PermutedGd { inner: &gd, perm };
    let c2 = GdMatrices::build(&permuted, 4).coercivity_constant().unwrap();
    assert!((c1 - c2).abs() < 1e-7 * c1, "{c1} vs {c2}");
}

#[test]
fn coercivity_bounded_across_refinements() {
    // The discrete Poincare-Wirtinger constants of a refinement family
    // stay bounded (coercivity of the family).
    for build in [|n| GdMatrices::build(&p1(n), 4), |n| GdMatrices::build(&hmm(n), 4)] {
        let cs: Vec<f64> = [4usize, 8, 16]
            .iter()
            .map(|&n| build(n).coercivity_constant().unwrap())
            .collect();
        let cmax = cs.iter().cloned().fold(0.0f64, f64::max);
        let cmin = cs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            cmax / cmin < 1.2,
            "coercivity constants vary too much: {cs:?}"
        );
    }
}

#[test]
fn consistency_defect_zero_for_reconstructed_pairs() {
    // Exactness detection: if (phi, grad phi) is the reconstruction pair
    // of some dof vector, the defect vanishes.
    let gd = hmm(2);
    let v = gd.affine_interpolant(Vec2::new(1.0, -2.0), 0.3);
    let m = GdMatrices::build(&gd, 4);
    let v_ref = v.clone();
    let gd_ref = &gd;
    let phi = FnH1 {
        value: move |x: Point| {
            let ip = gd_ref.locate_piece(x).unwrap();
            gdm::eval_pi_in_piece(gd_ref, &v_ref, ip, x)
        },
        gradient: |_x: Point| Vec2::new(1.0, -2.0),
    };
    let s = m.consistency_defect(&gd, &phi).unwrap();
    assert!(s < 1e-10, "{s}");
}

#[test]
fn consistency_defect_of_zero_field_is_zero() {
    let gd = p1(2);
    let m = GdMatrices::build(&gd, 4);
    let phi = FnH1 { value: |_| 0.0, gradient: |_| Vec2::zeros() };
    assert!(m.consistency_defect(&gd, &phi).unwrap() < 1e-12);
}

#[test]
fn consistency_defect_decreases_under_refinement() {
    let phi = FnH1 {
        value: |p: Point| (PI * p.x).cos() * (PI * p.y).cos(),
        gradient: |p: Point| {
            Vec2::new(
                -PI * (PI * p.x).sin() * (PI * p.y).cos(),
                -PI * (PI * p.x).cos() * (PI * p.y).sin(),
            )
        },
    };
    let s: Vec<f64> = [4usize, 8, 16]
        .iter()
        .map(|&n| {
            let gd = hmm(n);
            let m = GdMatrices::build(&gd, 4);
            m.consistency_defect(&gd, &phi).unwrap()
        })
        .collect();
    assert!(s[0] > s[1] && s[1] > s[2], "{s:?}");
}

#[test]
fn conformity_defect_zero_cases() {
    let gd = hmm(3);
    let m = GdMatrices::build(&gd, 4);
    let zero = FnHdiv { value: |_| Vec2::zeros(), divergence: |_| 0.0 };
    assert!(m.conformity_defect(&gd, &zero).unwrap() < 1e-12);
}

#[test]
fn conformity_defect_vanishes_for_conforming_p1() {
    // Discrete Stokes formula is exact for the conforming GD when the
    // field has zero normal trace; high-order subdivided quadrature keeps
    // the integration error of the trig field below the tolerance.
    let gd = p1(8);
    let m = GdMatrices::build_with(&gd, 5, 4);
    let psi = FnHdiv {
        value: |p: Point| {
            Vec2::new(
                (PI * p.x).sin() * (PI * p.y).cos(),
                (PI * p.x).cos() * (PI * p.y).sin(),
            )
        },
        divergence: |p: Point| 2.0 * PI * (PI * p.x).cos() * (PI * p.y).cos(),
    };
    let w = m.conformity_defect(&gd, &psi).unwrap();
    assert!(w < 1e-8, "{w}");
}

#[test]
fn conformity_defect_decreases_for_hmm() {
    // Divergence-free field with zero normal trace (a curl).
    let psi = FnHdiv {
        value: |p: Point| {
            Vec2::new(
                PI * (PI * p.x).sin() * (PI * p.y).cos(),
                -PI * (PI * p.x).cos() * (PI * p.y).sin(),
            )
        },
        divergence: |_| 0.0,
    };
    let w: Vec<f64> = [4usize, 8, 16]
        .iter()
        .map(|&n| {
            let gd = hmm(n);
            let m = GdMatrices::build(&gd, 4);
            m.conformity_defect(&gd, &psi).unwrap()
        })
        .collect();
    assert!(w[0] > w[1] && w[1] > w[2], "{w:?}");
}

#[test]
fn interpolants_reproduce_prescribed_values() {
    // P1 nodal interpolation reproduces affine fields exactly; the hybrid
    // initial interpolant is bounded by the sup of the data.
    let gd = p1(3);
    let slope = Vec2::new(0.4, -0.9);
    let v = gd.interpolate_smooth(&FnScalar(move |p: Point| slope.dot(&p.coords) + 1.0));
    for ip in 0..gd.piece_count() {
        let x = gd.piece(ip).tri.centroid();
        let got = gdm::eval_pi_in_piece(&gd, &v, ip, x);
        assert!((got - (slope.dot(&x.coords) + 1.0)).abs() < 1e-13);
    }
    let hybrid = hmm(3);
    let data = FnScalar(|p: Point| (4.0 * p.x).sin());
    let iv = hybrid.interpolate_initial(&data);
    let bound = 1.0 + 1e-12;
    for ip in 0..hybrid.piece_count() {
        let x = hybrid.piece(ip).tri.centroid();
        assert!(gdm::eval_pi_in_piece(&hybrid, &iv, ip, x).abs() <= bound);
    }
}

#[test]
fn space_time_reconstruction_conventions() {
    // Pi uses the right endpoint on (t_n, t_{n+1}], Pi~ the left.
    let gd = hmm(1);
    let times = gdm::TimeSteps::uniform(1.0, 2);
    let n = gd.dof_count();
    let field = gdm::SpaceTimeField::new(vec![
        DofVector::constant(n, 0.0),
        DofVector::constant(n, 1.0),
        DofVector::constant(n, 2.0),
    ]);
    let x = Point::new(0.5, 0.5);
    assert_eq!(field.eval_pi(&gd, &times, x, 0.25).unwrap(), 1.0);
    assert_eq!(field.eval_pi(&gd, &times, x, 0.5).unwrap(), 1.0);
    assert_eq!(field.eval_pi(&gd, &times, x, 0.75).unwrap(), 2.0);
    assert_eq!(field.eval_pi_tilde(&gd, &times, x, 0.25).unwrap(), 0.0);
    assert_eq!(field.eval_pi_tilde(&gd, &times, x, 0.75).unwrap(), 1.0);
    // Step-ratio bound of uniform steps is 1.
    assert!((times.step_ratio_bound() - 1.0).abs() < 1e-15);
}
