//! Finite-element gradient discretisations on conforming triangulations:
//! the P1 conforming GD (nodal dofs, piecewise-linear reconstruction) for
//! the concentration equation and the lowest-order Raviart-Thomas mixed GD
//! for the pressure equation.
//!
//! The RT0 mixed GD has cell-constant dofs; its reconstructed gradient is
//! the unique field with `A grad z` in the flux space `V_{h,0}` (RT0,
//! continuous normal components, zero normal trace on the boundary) such
//! that `int w . grad z = -int z div w` for all `w` in `V_{h,0}`. Because
//! the tensor depends on the current concentration, this discretisation is
//! rebuilt every time step.

use std::sync::Arc;

use nalgebra::Matrix2;
use thiserror::Error;

use crate::darcy::{DarcyField, Provenance};
use crate::gdm::{DofVector, GradientDiscretisation, Piece, ScalarField};
use crate::geom::{Point, Triangle, Vec2};
use crate::hmm::TensorField;
use crate::linalg::{self, LinearOperator, SolverConfig, SparseMatrix};
use crate::mesh::{Location, PolytopalMesh};
use crate::quadrature::TriRule;

#[derive(Debug, Error)]
pub enum FeError {
    #[error("cell {0} is not a triangle; a conforming triangulation is required")]
    NotTriangulation(usize),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

fn cell_triangle(mesh: &PolytopalMesh, k: usize) -> Result<Triangle, FeError> {
    let verts = &mesh.cell(k).verts;
    if verts.len() != 3 {
        return Err(FeError::NotTriangulation(k));
    }
    Ok(Triangle::new(
        mesh.vertex(verts[0]),
        mesh.vertex(verts[1]),
        mesh.vertex(verts[2]),
    ))
}

/// P1 conforming gradient discretisation: one dof per vertex, continuous
/// piecewise-linear reconstruction, elementwise-constant gradient.
pub struct P1Gd {
    mesh: Arc<PolytopalMesh>,
    tris: Vec<Triangle>,
}

impl P1Gd {
    pub fn build(mesh: Arc<PolytopalMesh>) -> Result<Self, FeError> {
        let tris = (0..mesh.cell_count())
            .map(|k| cell_triangle(&mesh, k))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { mesh, tris })
    }

    pub fn mesh(&self) -> &Arc<PolytopalMesh> {
        &self.mesh
    }

    pub fn nodal(&self, f: impl Fn(Point) -> f64) -> DofVector {
        DofVector(
            (0..self.mesh.vertex_count())
                .map(|v| f(self.mesh.vertex(v)))
                .collect(),
        )
    }
}

impl GradientDiscretisation for P1Gd {
    fn dof_count(&self) -> usize {
        self.mesh.vertex_count()
    }

    fn piece_count(&self) -> usize {
        self.tris.len()
    }

    fn piece(&self, ip: usize) -> Piece {
        Piece { tri: self.tris[ip], cell: ip }
    }

    fn pi_basis(&self, ip: usize, x: Point, out: &mut Vec<(usize, f64)>) {
        let b = self.tris[ip].barycentric(x);
        for (i, &v) in self.mesh.cell(ip).verts.iter().enumerate() {
            out.push((v, b[i]));
        }
    }

    fn grad_basis(&self, ip: usize, _x: Point, out: &mut Vec<(usize, Vec2)>) {
        let g = self.tris[ip].barycentric_gradients();
        for (i, &v) in self.mesh.cell(ip).verts.iter().enumerate() {
            out.push((v, g[i]));
        }
    }

    fn locate_piece(&self, x: Point) -> Option<usize> {
        match self.mesh.locate(x) {
            Location::Cell(k) => Some(k),
            Location::Outside => None,
        }
    }

    fn interpolate_initial(&self, f: &dyn ScalarField) -> DofVector {
        self.nodal(|x| f.value(x))
    }

    fn interpolate_smooth(&self, f: &dyn ScalarField) -> DofVector {
        self.nodal(|x| f.value(x))
    }
}

/// Lowest-order Raviart-Thomas mixed gradient discretisation for a given
/// SPD tensor field (frozen at element centroids).
pub struct Rt0MixedGd {
    mesh: Arc<PolytopalMesh>,
    tris: Vec<Triangle>,
    /// Tensor per cell, evaluated at the centroid.
    tensors: Vec<Matrix2<f64>>,
    /// Internal face -> flux dof index.
    face_dof: Vec<Option<usize>>,
    /// Flux dof -> face id.
    dof_face: Vec<usize>,
    /// Weighted RT0 mass matrix `M_ij = int w_i . A^{-1} w_j`.
    mass: SparseMatrix,
    /// Divergence coupling `B[i][K] = int_K div w_i` stored per dof as
    /// (cell, value) pairs (at most two cells per internal face).
    div_b: Vec<[(usize, f64); 2]>,
    inner: SolverConfig,
}

/// RT0 basis function of face `f` restricted to cell `k`:
/// `w(x) = s |f| (x - p_opp) / (2 |K|)` with `s = +-1` the orientation of
/// the global face normal relative to `k`.
fn rt0_basis(tri: &Triangle, opp: usize, sign: f64, length: f64) -> impl Fn(Point) -> Vec2 {
    let p = tri.v[opp];
    let coeff = sign * length / (2.0 * tri.area());
    move |x: Point| coeff * (x - p)
}

impl Rt0MixedGd {
    pub fn build(
        mesh: Arc<PolytopalMesh>,
        tensor: &dyn TensorField,
        inner: SolverConfig,
    ) -> Result<Self, FeError> {
        let tris = (0..mesh.cell_count())
            .map(|k| cell_triangle(&mesh, k))
            .collect::<Result<Vec<_>, _>>()?;
        let tensors: Vec<Matrix2<f64>> = (0..mesh.cell_count())
            .map(|k| tensor.tensor(k, tris[k].centroid()))
            .collect();
        let mut face_dof = vec![None; mesh.face_count()];
        let mut dof_face = Vec::new();
        for (f, face) in mesh.faces().iter().enumerate() {
            if !face.is_boundary() {
                face_dof[f] = Some(dof_face.len());
                dof_face.push(f);
            }
        }
        let ndofs = dof_face.len();
        // Assemble the A^{-1}-weighted RT0 mass matrix cell by cell.
        let quad = TriRule::of_degree(2);
        let mut trip = Vec::new();
        let mut div_b = vec![[(usize::MAX, 0.0); 2]; ndofs];
        for k in 0..mesh.cell_count() {
            let tri = &tris[k];
            let ainv = tensors[k].try_inverse().expect("SPD tensor");
            let cell = mesh.cell(k);
            // Local dofs: internal faces of this triangle.
            let mut local: Vec<(usize, Box<dyn Fn(Point) -> Vec2>)> = Vec::new();
            for (i, &f) in cell.faces.iter().enumerate() {
                let Some(dof) = face_dof[f] else { continue };
                let face = mesh.face(f);
                // Local face i joins loop vertices i and i+1; the opposite
                // vertex is i+2 (mod 3).
                let opp = (i + 2) % 3;
                let sign = if face.cells.0 == k { 1.0 } else { -1.0 };
                let w = rt0_basis(tri, opp, sign, face.length);
                let slot = if div_b[dof][0].0 == usize::MAX { 0 } else { 1 };
                div_b[dof][slot] = (k, sign * face.length);
                local.push((dof, Box::new(w)));
            }
            for (ia, wa) in local.iter().enumerate() {
                for wb in local.iter().skip(ia) {
                    let v = quad.integrate(tri, |x| (ainv * wa.1(x)).dot(&wb.1(x)));
                    trip.push((wa.0, wb.0, v));
                    if wa.0 != wb.0 {
                        trip.push((wb.0, wa.0, v));
                    }
                }
            }
        }
        let mass = SparseMatrix::assemble(ndofs, &trip)?;
        Ok(Self {
            mesh,
            tris,
            tensors,
            face_dof,
            dof_face,
            mass,
            div_b,
            inner,
        })
    }

    pub fn mesh(&self) -> &Arc<PolytopalMesh> {
        &self.mesh
    }

    pub fn cell_count(&self) -> usize {
        self.mesh.cell_count()
    }

    pub fn flux_dof_count(&self) -> usize {
        self.dof_face.len()
    }

    pub fn tensor(&self, cell: usize) -> Matrix2<f64> {
        self.tensors[cell]
    }

    /// `B z` with `(B z)_i = sum_K z_K int_K div w_i`.
    pub fn apply_b(&self, z: &[f64]) -> Vec<f64> {
        self.div_b
            .iter()
            .map(|slots| {
                slots
                    .iter()
                    .filter(|(k, _)| *k != usize::MAX)
                    .map(|&(k, v)| v * z[k])
                    .sum()
            })
            .collect()
    }

    /// `B^T sigma` per cell.
    pub fn apply_bt(&self, sigma: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.mesh.cell_count()];
        for (i, slots) in self.div_b.iter().enumerate() {
            for &(k, v) in slots.iter().filter(|(k, _)| *k != usize::MAX) {
                out[k] += v * sigma[i];
            }
        }
        out
    }

    /// Flux coefficients of `A grad z`: `sigma = -M^{-1} B z`. The
    /// reconstructed gradient is `A^{-1} sum_i sigma_i w_i`.
    pub fn gradient_fluxes(&self, z: &[f64]) -> Result<Vec<f64>, FeError> {
        if self.flux_dof_count() == 0 {
            return Ok(Vec::new());
        }
        let b = self.apply_b(z);
        let minus_b: Vec<f64> = b.iter().map(|v| -v).collect();
        let (sigma, _) = linalg::solve_spd(&self.mass, &minus_b, &self.inner)?;
        Ok(sigma)
    }

    /// Evaluate `U = A grad z = sum sigma_i w_i` inside a cell.
    pub fn eval_flux_field(&self, sigma: &[f64], cell: usize, x: Point) -> Vec2 {
        let mut u = Vec2::zeros();
        let tri = &self.tris[cell];
        for (i, &f) in self.mesh.cell(cell).faces.iter().enumerate() {
            let Some(dof) = self.face_dof[f] else { continue };
            let face = self.mesh.face(f);
            let sign = if face.cells.0 == cell { 1.0 } else { -1.0 };
            let w = rt0_basis(tri, (i + 2) % 3, sign, face.length);
            u += sigma[dof] * w(x);
        }
        u
    }

    /// Evaluate the reconstructed gradient `grad z = A^{-1} U` in a cell.
    pub fn eval_gradient(&self, sigma: &[f64], cell: usize, x: Point) -> Vec2 {
        let ainv = self.tensors[cell].try_inverse().expect("SPD tensor");
        ainv * self.eval_flux_field(sigma, cell, x)
    }

    /// Residual of the dual defining relation
    /// `int w_j . grad z + int z div w_j` for every basis function, i.e.
    /// `M sigma + B z` (should vanish to solver tolerance).
    pub fn dual_relation_residual(&self, z: &[f64], sigma: &[f64]) -> f64 {
        let ms = self.mass.apply_vec(sigma);
        let bz = self.apply_b(z);
        ms.iter()
            .zip(&bz)
            .map(|(a, b)| (a + b).abs())
            .fold(0.0, f64::max)
    }

    /// Solve the pressure gradient scheme: find zero-mean `p` with
    /// `int A grad p . grad z = sum_K rhs_K z_K` for all cell vectors `z`,
    /// i.e. the Schur complement system `B^T M^{-1} B p = rhs`.
    /// Returns `(p, sigma)` with `sigma` the flux coefficients of
    /// `A grad p`.
    pub fn solve_pressure(
        &self,
        rhs: &[f64],
        outer: &SolverConfig,
    ) -> Result<(Vec<f64>, Vec<f64>, linalg::ZeroMeanSolve), FeError> {
        let op = SchurOperator { rt0: self };
        let m: Vec<f64> = (0..self.mesh.cell_count())
            .map(|k| self.mesh.cell(k).area)
            .collect();
        let solve = linalg::solve_zero_mean(&op, rhs, &m, outer)?;
        let p = solve.x.clone();
        let sigma = self.gradient_fluxes(&p)?;
        Ok((p, sigma, solve))
    }

    /// The Darcy velocity `u = -A grad p` as an H(div) tracking field on
    /// the triangulation (already conforming; per-triangle RT0).
    pub fn darcy_field(&self, sigma: &[f64]) -> DarcyField {
        // Outward fluxes of u = -U per triangle edge; the basis function of
        // face f carries total flux |f|, so the edge flux of U is
        // sigma |f| in the global orientation.
        let mut tri_fluxes = Vec::with_capacity(self.mesh.cell_count());
        for k in 0..self.mesh.cell_count() {
            let cell = self.mesh.cell(k);
            let mut fluxes = [0.0; 3];
            for (i, &f) in cell.faces.iter().enumerate() {
                let flux = match self.face_dof[f] {
                    Some(dof) => {
                        let face = self.mesh.face(f);
                        let sign = if face.cells.0 == k { 1.0 } else { -1.0 };
                        -sign * sigma[dof] * face.length
                    }
                    None => 0.0,
                };
                fluxes[i] = flux;
            }
            tri_fluxes.push(fluxes);
        }
        DarcyField::from_triangulation(self.mesh.clone(), &tri_fluxes, Provenance::ConformingRt0)
    }
}

/// Schur complement `B^T M^{-1} B` applied with an inner CG solve.
struct SchurOperator<'a> {
    rt0: &'a Rt0MixedGd,
}

impl LinearOperator for SchurOperator<'_> {
    fn dim(&self) -> usize {
        self.rt0.mesh.cell_count()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let bx = self.rt0.apply_b(x);
        if bx.is_empty() {
            out.fill(0.0);
            return;
        }
        let (y, _) = linalg::solve_spd(&self.rt0.mass, &bx, &self.rt0.inner)
            .expect("RT0 mass matrix is SPD");
        let bty = self.rt0.apply_bt(&y);
        out.copy_from_slice(&bty);
    }
    fn preconditioner_diagonal(&self) -> Vec<f64> {
        // diag(B^T diag(M)^{-1} B) as a cheap spd surrogate.
        let md = self.rt0.mass.diagonal();
        let mut d = vec![0.0; self.rt0.mesh.cell_count()];
        for (i, slots) in self.rt0.div_b.iter().enumerate() {
            for &(k, v) in slots.iter().filter(|(k, _)| *k != usize::MAX) {
                d[k] += v * v / md[i].max(1e-300);
            }
        }
        d.iter_mut().for_each(|v| {
            if !(*v > 0.0) {
                *v = 1.0;
            }
        });
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gdm::{self, GdMatrices};
    use crate::hmm::ConstTensor;
    use crate::mesh::Rect;
    use nalgebra::DMatrix;

    fn p1(nx: usize, ny: usize) -> P1Gd {
        let mesh = Arc::new(PolytopalMesh::triangulated(nx, ny, Rect::UNIT).unwrap());
        P1Gd::build(mesh).unwrap()
    }

    #[test]
    fn p1_rejects_quads() {
        let mesh = Arc::new(PolytopalMesh::cartesian(2, 2, Rect::UNIT).unwrap());
        assert!(matches!(P1Gd::build(mesh), Err(FeError::NotTriangulation(_))));
    }

    #[test]
    fn p1_reference_triangle_gradient() {
        // Single triangle (0,0), (1,0), (0,1); v = (0,0,1) gives grad (0,1).
        let mesh = Arc::new(
            PolytopalMesh::from_cells(
                vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)],
                vec![vec![0, 1, 2]],
                Vec::new(),
            )
            .unwrap(),
        );
        let gd = P1Gd::build(mesh).unwrap();
        let v = DofVector(vec![0.0, 0.0, 1.0]);
        let g = gdm::eval_grad_in_piece(&gd, &v, 0, Point::new(0.25, 0.25));
        assert!((g - Vec2::new(0.0, 1.0)).norm() < 1e-14);
    }

    #[test]
    fn p1_affine_reproduction() {
        let gd = p1(3, 2);
        let slope = Vec2::new(0.7, -1.3);
        let v = gd.nodal(|p| slope.dot(&p.coords) + 0.5);
        for ip in 0..gd.piece_count() {
            let x = gd.piece(ip).tri.centroid();
            let val = gdm::eval_pi_in_piece(&gd, &v, ip, x);
            assert!((val - (slope.dot(&x.coords) + 0.5)).abs() < 1e-13);
            let g = gdm::eval_grad_in_piece(&gd, &v, ip, x);
            assert!((g - slope).norm() < 1e-12);
        }
    }

    #[test]
    fn p1_norm_of_ones_is_domain_area() {
        let gd = p1(2, 2);
        let m = GdMatrices::build(&gd, 4);
        let v = DofVector::constant(gd.dof_count(), 1.0);
        assert!((m.gd_norm(&v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rt0_gradient_of_constants_vanishes() {
        let mesh = Arc::new(PolytopalMesh::triangulated(2, 2, Rect::UNIT).unwrap());
        let rt0 = Rt0MixedGd::build(
            mesh,
            &ConstTensor(Matrix2::identity()),
            SolverConfig::default(),
        )
        .unwrap();
        let z = vec![2.5; rt0.cell_count()];
        let sigma = rt0.gradient_fluxes(&z).unwrap();
        assert!(sigma.iter().all(|s| s.abs() < 1e-12));
    }

    #[test]
    fn rt0_dual_relation_holds() {
        let mesh = Arc::new(PolytopalMesh::triangulated(3, 2, Rect::UNIT).unwrap());
        let a = Matrix2::new(2.0, 0.3, 0.3, 1.0);
        let inner = SolverConfig { tol: 1e-13, ..SolverConfig::default() };
        let rt0 = Rt0MixedGd::build(mesh, &ConstTensor(a), inner).unwrap();
        let z: Vec<f64> = (0..rt0.cell_count())
            .map(|k| ((k * 17 % 7) as f64) - 3.0)
            .collect();
        let sigma = rt0.gradient_fluxes(&z).unwrap();
        let res = rt0.dual_relation_residual(&z, &sigma);
        let scale = sigma.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1.0);
        assert!(res < 1e-11 * scale, "residual {res}");
    }

    #[test]
    fn rt0_matches_dense_saddle_oracle() {
        // Independent oracle: assemble the full mixed saddle system
        // [M B; B^T 0] densely (with a mean constraint row) and solve by LU.
        let mesh = Arc::new(PolytopalMesh::triangulated(2, 1, Rect::UNIT).unwrap());
        let inner = SolverConfig { tol: 1e-13, ..SolverConfig::default() };
        let rt0 = Rt0MixedGd::build(
            mesh.clone(),
            &ConstTensor(Matrix2::identity()),
            inner,
        )
        .unwrap();
        let nc = rt0.cell_count();
        let nf = rt0.flux_dof_count();
        assert_eq!(nc, 4);
        assert_eq!(nf, 3);
        // rhs: integrals of q over cells for q = x - 1/2 (zero mean).
        let quad = TriRule::of_degree(2);
        let rhs: Vec<f64> = (0..nc)
            .map(|k| quad.integrate(&cell_triangle(&mesh, k).unwrap(), |p| p.x - 0.5))
            .collect();
        let outer = SolverConfig { tol: 1e-12, ..SolverConfig::default() };
        let (p, sigma, _) = rt0.solve_pressure(&rhs, &outer).unwrap();

        // Dense assembly: unknowns (sigma_0..nf-1, p_0..nc-1, lambda).
        let n = nf + nc + 1;
        let mut dense = DMatrix::<f64>::zeros(n, n);
        for (i, j, v) in rt0.mass.rows() {
            dense[(i, j)] = v;
        }
        for (i, slots) in rt0.div_b.iter().enumerate() {
            for &(k, v) in slots.iter().filter(|(k, _)| *k != usize::MAX) {
                dense[(i, nf + k)] = v;
                dense[(nf + k, i)] = v;
            }
        }
        for k in 0..nc {
            dense[(nf + k, nf + nc)] = mesh.cell(k).area;
            dense[(nf + nc, nf + k)] = mesh.cell(k).area;
        }
        let mut b = DMatrix::<f64>::zeros(n, 1);
        for k in 0..nc {
            b[(nf + k, 0)] = -rhs[k];
        }
        let sol = dense.lu().solve(&b).expect("dense saddle solvable");
        for i in 0..nf {
            assert!((sigma[i] - sol[(i, 0)]).abs() < 1e-9, "sigma[{i}]");
        }
        for k in 0..nc {
            assert!((p[k] - sol[(nf + k, 0)]).abs() < 1e-9, "p[{k}]");
        }
    }

    #[test]
    fn rt0_darcy_zero_and_scaling_invariance() {
        let mesh = Arc::new(PolytopalMesh::triangulated(4, 4, Rect::UNIT).unwrap());
        let inner = SolverConfig { tol: 1e-13, ..SolverConfig::default() };
        let outer = SolverConfig { tol: 1e-12, ..SolverConfig::default() };
        let quad = TriRule::of_degree(4);
        let q = |p: Point| (std::f64::consts::PI * p.x).cos();
        let rhs: Vec<f64> = (0..mesh.cell_count())
            .map(|k| quad.integrate(&cell_triangle(&mesh, k).unwrap(), q))
            .collect();

        // Zero sources give the zero velocity.
        let rt0 = Rt0MixedGd::build(mesh.clone(), &ConstTensor(Matrix2::identity()), inner).unwrap();
        let (_, sigma0, _) = rt0.solve_pressure(&vec![0.0; mesh.cell_count()], &outer).unwrap();
        assert!(sigma0.iter().all(|s| s.abs() < 1e-12));

        // Scaling the tensor with fixed sources leaves the velocity
        // (the flux coefficients of A grad p) invariant and divides the
        // pressure by the same factor: a consequence of the dual relation,
        // which couples A grad p to the data independently of A.
        let (p1, s1, _) = rt0.solve_pressure(&rhs, &outer).unwrap();
        let lambda = 7.3;
        let rt0_scaled = Rt0MixedGd::build(
            mesh.clone(),
            &ConstTensor(lambda * Matrix2::identity()),
            inner,
        )
        .unwrap();
        let (p2, s2, _) = rt0_scaled.solve_pressure(&rhs, &outer).unwrap();
        let scale = s1.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        for i in 0..s1.len() {
            assert!((s1[i] - s2[i]).abs() < 1e-8 * scale.max(1.0), "dof {i}");
        }
        let pscale = p1.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        for k in 0..p1.len() {
            assert!((p1[k] - lambda * p2[k]).abs() < 1e-8 * pscale, "cell {k}");
        }
    }

    #[test]
    fn rt0_darcy_field_is_hdiv_with_bounded_divergence() {
        let mesh = Arc::new(PolytopalMesh::triangulated(4, 4, Rect::UNIT).unwrap());
        let inner = SolverConfig { tol: 1e-13, ..SolverConfig::default() };
        let outer = SolverConfig { tol: 1e-12, ..SolverConfig::default() };
        let quad = TriRule::of_degree(4);
        // Bounded source with zero mean: q = cos(pi x) cos(pi y), |q| <= 1.
        let q = |p: Point| {
            (std::f64::consts::PI * p.x).cos() * (std::f64::consts::PI * p.y).cos()
        };
        let rhs: Vec<f64> = (0..mesh.cell_count())
            .map(|k| quad.integrate(&cell_triangle(&mesh, k).unwrap(), q))
            .collect();
        let rt0 = Rt0MixedGd::build(mesh.clone(), &ConstTensor(Matrix2::identity()), inner).unwrap();
        let (_, sigma, _) = rt0.solve_pressure(&rhs, &outer).unwrap();
        let field = rt0.darcy_field(&sigma);
        let diag = field.validate();
        assert!(diag.normal_jump <= 1e-11 * diag.flux_scale.max(1.0));
        assert!(diag.boundary_trace <= 1e-12);
        // |div u| <= M_div with M_div = sup|q| = 1 (up to solver tol).
        assert!(diag.max_divergence <= 1.0 + 1e-9, "{}", diag.max_divergence);
    }
}
