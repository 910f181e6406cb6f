//! H(div) Darcy velocities that are piecewise RT0 on a triangulated
//! sub-mesh: either reconstructed from finite-volume face fluxes on the
//! diamond sub-mesh, or handed over directly from the conforming RT0
//! discretisation.
//!
//! The reconstruction prescribes, per cell `K`,
//! - a constant divergence `(1/|K|) sum_sigma F_{K,sigma}` on all of `K`,
//! - the normal trace `|sigma| u . n_{K,sigma} = F_{K,sigma}` on each face,
//!
//! which leaves the fluxes through the internal sub-faces (the spokes
//! joining the cell point to the vertices) underdetermined by exactly a
//! one-dimensional circulation around the cell point. The minimal-l2
//! selection fixes it: a particular solution is obtained by accumulating
//! the per-diamond balance equations around the cell and the circulation
//! component is projected out. This closed form is the exact minimal-l2
//! solution of the local system and is linear in the fluxes.

use std::sync::Arc;

use thiserror::Error;

use crate::geom::{Point, Triangle, Vec2};
use crate::hmm::FluxSet;
use crate::mesh::{Location, PolytopalMesh};
use crate::quadrature::TriRule;

#[derive(Debug, Error)]
pub enum DarcyError {
    #[error("fluxes are not conservative: residual {residual:.3e} on face {face} exceeds tolerance {tol:.3e}")]
    NotConservative { face: usize, residual: f64, tol: f64 },
    #[error("boundary face {face} carries flux {flux:.3e} beyond tolerance {tol:.3e}")]
    BoundaryFlux { face: usize, flux: f64, tol: f64 },
    #[error("flux set has {got} cells, mesh has {want}")]
    CellCountMismatch { got: usize, want: usize },
}

/// Where a velocity field came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    ReconstructedFromFluxes,
    ConformingRt0,
}

/// Which sub-mesh the tracking triangles form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SubmeshKind {
    /// Diamonds of a polytopal mesh: edge 1 of each triangle is a mesh
    /// face, edges 0 and 2 are internal spokes.
    Diamonds,
    /// The cells of a triangulation: every edge is a mesh face.
    Elements,
}

/// Neighbour of a tracking triangle across one of its edges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeNeighbor {
    Tri(usize),
    Boundary,
}

/// One triangle of the tracking sub-mesh with its RT0 velocity
/// `u(x) = a + b x`, outward edge fluxes, and adjacency. Edge `i` joins
/// vertices `i` and `i+1` of the (counter-clockwise) triangle.
#[derive(Clone, Debug)]
pub struct TrackTri {
    pub tri: Triangle,
    pub cell: usize,
    pub a: Vec2,
    pub b: f64,
    pub edge_flux: [f64; 3],
    pub neighbor: [EdgeNeighbor; 3],
}

impl TrackTri {
    pub fn velocity(&self, x: Point) -> Vec2 {
        self.a + self.b * x.coords
    }

    pub fn divergence(&self) -> f64 {
        2.0 * self.b
    }

    pub fn edge(&self, i: usize) -> (Point, Point) {
        (self.tri.v[i], self.tri.v[(i + 1) % 3])
    }

    /// Outward unit normal of edge `i`.
    pub fn edge_normal(&self, i: usize) -> Vec2 {
        let (a, b) = self.edge(i);
        let t = (b - a) / (b - a).norm();
        Vec2::new(t.y, -t.x)
    }

    pub fn edge_length(&self, i: usize) -> f64 {
        let (a, b) = self.edge(i);
        (b - a).norm()
    }
}

/// Validation record for a velocity field.
#[derive(Clone, Copy, Debug)]
pub struct DarcyDiagnostics {
    /// Max |u.n| mismatch across internal edges.
    pub normal_jump: f64,
    /// Max |u.n| on the domain boundary.
    pub boundary_trace: f64,
    /// Max |div u| over the field.
    pub max_divergence: f64,
    /// L2 norm of the field.
    pub l2_norm: f64,
    /// Largest |edge flux|, the natural residual scale.
    pub flux_scale: f64,
    /// Worst wrap-around residual of the local spoke systems
    /// (reconstructed fields only; a rank/consistency sanity value).
    pub closure_residual: f64,
}

/// Piecewise-RT0 H(div) velocity on a triangulated sub-mesh.
#[derive(Clone, Debug)]
pub struct DarcyField {
    mesh: Arc<PolytopalMesh>,
    tris: Vec<TrackTri>,
    /// Range of triangle indices of each cell.
    cell_range: Vec<(usize, usize)>,
    provenance: Provenance,
    kind: SubmeshKind,
    /// Worst wrap-around residual of the per-cell spoke systems; the
    /// cyclic balance equations are consistent up to rounding because the
    /// prescribed divergence is defined from the same flux sums (the
    /// nullspace is exactly the one-dimensional circulation).
    closure_residual: f64,
}

/// RT0 coefficients from the three outward edge fluxes of a triangle:
/// `u(x) = sum_e flux_e (x - p_opp(e)) / (2 |T|)`.
fn rt0_from_fluxes(tri: &Triangle, fluxes: [f64; 3]) -> (Vec2, f64) {
    let two_area = 2.0 * tri.area();
    let mut a = Vec2::zeros();
    let mut b = 0.0;
    for e in 0..3 {
        let opp = tri.v[(e + 2) % 3];
        a -= fluxes[e] / two_area * opp.coords;
        b += fluxes[e] / two_area;
    }
    (a, b)
}

impl DarcyField {
    /// Reconstruct from finite-volume face fluxes. Preconditions (checked):
    /// conservativity across internal faces and zero flux on boundary
    /// faces, to `tol` relative to the flux scale.
    pub fn reconstruct(
        mesh: Arc<PolytopalMesh>,
        fluxes: &FluxSet,
        tol: f64,
    ) -> Result<Self, DarcyError> {
        if fluxes.cell_count() != mesh.cell_count() {
            return Err(DarcyError::CellCountMismatch {
                got: fluxes.cell_count(),
                want: mesh.cell_count(),
            });
        }
        let scale = fluxes.scale().max(1e-300);
        // Conservativity / boundary checks, then a symmetrised per-face
        // value so the reconstructed normal traces match exactly.
        let mut face_flux = vec![0.0; mesh.face_count()];
        for (f, face) in mesh.faces().iter().enumerate() {
            let k = face.cells.0;
            let ik = mesh.cell(k).faces.iter().position(|&g| g == f).unwrap();
            let fk = fluxes.flux(k, ik);
            match face.cells.1 {
                Some(l) => {
                    let il = mesh.cell(l).faces.iter().position(|&g| g == f).unwrap();
                    let fl = fluxes.flux(l, il);
                    let residual = (fk + fl).abs();
                    if residual > tol * scale {
                        return Err(DarcyError::NotConservative { face: f, residual, tol: tol * scale });
                    }
                    face_flux[f] = 0.5 * (fk - fl);
                }
                None => {
                    if fk.abs() > tol * scale {
                        return Err(DarcyError::BoundaryFlux { face: f, flux: fk, tol: tol * scale });
                    }
                    face_flux[f] = 0.0;
                }
            }
        }

        Ok(Self::build_on_diamonds(mesh, &face_flux))
    }

    /// Wrap a per-triangle RT0 field on a triangulation (cells are the
    /// tracking triangles; `tri_fluxes[k][i]` is the outward flux of cell
    /// `k` through its local face `i`).
    pub fn from_triangulation(
        mesh: Arc<PolytopalMesh>,
        tri_fluxes: &[[f64; 3]],
        provenance: Provenance,
    ) -> Self {
        let mut tris = Vec::with_capacity(mesh.cell_count());
        let mut cell_range = Vec::with_capacity(mesh.cell_count());
        for k in 0..mesh.cell_count() {
            let cell = mesh.cell(k);
            let tri = Triangle::new(
                mesh.vertex(cell.verts[0]),
                mesh.vertex(cell.verts[1]),
                mesh.vertex(cell.verts[2]),
            );
            let (a, b) = rt0_from_fluxes(&tri, tri_fluxes[k]);
            let mut neighbor = [EdgeNeighbor::Boundary; 3];
            for (i, &f) in cell.faces.iter().enumerate() {
                if let Some(l) = mesh.face(f).neighbor(k) {
                    neighbor[i] = EdgeNeighbor::Tri(l);
                }
            }
            tris.push(TrackTri {
                tri,
                cell: k,
                a,
                b,
                edge_flux: tri_fluxes[k],
                neighbor,
            });
            cell_range.push((k, k + 1));
        }
        Self {
            mesh,
            tris,
            cell_range,
            provenance,
            kind: SubmeshKind::Elements,
            closure_residual: 0.0,
        }
    }

    /// Constant velocity on every triangle of the diamond sub-mesh; a test
    /// helper (such a field has nonzero normal trace on the boundary).
    pub fn constant(mesh: Arc<PolytopalMesh>, u: Vec2) -> Self {
        let face_flux: Vec<f64> = mesh
            .faces()
            .iter()
            .map(|f| f.length * u.dot(&f.outward_normal(f.cells.0)))
            .collect();
        Self::build_on_diamonds(mesh, &face_flux)
    }

    /// Same construction as `reconstruct` without the conservativity and
    /// boundary preconditions; face values are taken from the first
    /// incident cell. Used for synthetic test fields.
    pub fn reconstruct_unchecked(mesh: Arc<PolytopalMesh>, fluxes: &FluxSet) -> Self {
        let mut face_flux = vec![0.0; mesh.face_count()];
        for (f, face) in mesh.faces().iter().enumerate() {
            let k = face.cells.0;
            let ik = mesh.cell(k).faces.iter().position(|&g| g == f).unwrap();
            face_flux[f] = fluxes.flux(k, ik);
        }
        Self::build_on_diamonds(mesh, &face_flux)
    }

    /// Minimal-l2 diamond reconstruction from per-face fluxes oriented
    /// outward from the first incident cell.
    fn build_on_diamonds(mesh: Arc<PolytopalMesh>, face_flux: &[f64]) -> Self {
        let mut tris = Vec::with_capacity(mesh.diamond_count());
        let mut cell_range = Vec::with_capacity(mesh.cell_count());
        let mut closure_residual = 0.0f64;
        // Global triangle index of diamond (k, i).
        let mut offsets = Vec::with_capacity(mesh.cell_count() + 1);
        offsets.push(0usize);
        for k in 0..mesh.cell_count() {
            offsets.push(offsets[k] + mesh.cell(k).faces.len());
        }
        for k in 0..mesh.cell_count() {
            let cell = mesh.cell(k);
            let nf = cell.faces.len();
            // Outward flux through face i, seen from K.
            let f_out: Vec<f64> = (0..nf)
                .map(|i| {
                    let fid = cell.faces[i];
                    if mesh.face(fid).cells.0 == k {
                        face_flux[fid]
                    } else {
                        -face_flux[fid]
                    }
                })
                .collect();
            let div = f_out.iter().sum::<f64>() / cell.area;
            // Spoke fluxes: g[i] crosses the spoke to vertex i from diamond
            // i-1 into diamond i. The per-diamond balance
            // F_i + g[i+1] - g[i] = div |D_i| determines g up to a constant
            // circulation; the mean-zero choice is the minimal-l2 one.
            let mut g = vec![0.0; nf];
            for i in 0..nf.saturating_sub(1) {
                let d_area = mesh.diamond(k, i).area();
                g[i + 1] = g[i] + div * d_area - f_out[i];
            }
            // Wrap-around consistency of the cyclic system.
            let wrap = g[nf - 1] + div * mesh.diamond(k, nf - 1).area() - f_out[nf - 1] - g[0];
            closure_residual = closure_residual.max(wrap.abs());
            let mean = g.iter().sum::<f64>() / nf as f64;
            g.iter_mut().for_each(|v| *v -= mean);

            for i in 0..nf {
                let tri = mesh.diamond(k, i);
                // Edge 0: spoke to vertex i (outward = -g[i]);
                // edge 1: the mesh face (outward = f_out[i]);
                // edge 2: spoke to vertex i+1 (outward = +g[(i+1) % nf]).
                let e_fluxes = [-g[i], f_out[i], g[(i + 1) % nf]];
                let (a, b) = rt0_from_fluxes(&tri, e_fluxes);
                let fid = cell.faces[i];
                let outer = match mesh.face(fid).neighbor(k) {
                    Some(l) => {
                        let il = mesh.cell(l).faces.iter().position(|&gf| gf == fid).unwrap();
                        EdgeNeighbor::Tri(offsets[l] + il)
                    }
                    None => EdgeNeighbor::Boundary,
                };
                tris.push(TrackTri {
                    tri,
                    cell: k,
                    a,
                    b,
                    edge_flux: e_fluxes,
                    neighbor: [
                        EdgeNeighbor::Tri(offsets[k] + (i + nf - 1) % nf),
                        outer,
                        EdgeNeighbor::Tri(offsets[k] + (i + 1) % nf),
                    ],
                });
            }
            cell_range.push((offsets[k], offsets[k + 1]));
        }
        Self {
            mesh,
            tris,
            cell_range,
            provenance: Provenance::ReconstructedFromFluxes,
            kind: SubmeshKind::Diamonds,
            closure_residual,
        }
    }

    pub fn mesh(&self) -> &Arc<PolytopalMesh> {
        &self.mesh
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn tris(&self) -> &[TrackTri] {
        &self.tris
    }

    pub fn tri(&self, i: usize) -> &TrackTri {
        &self.tris[i]
    }

    pub fn cell_tris(&self, cell: usize) -> std::ops::Range<usize> {
        let (a, b) = self.cell_range[cell];
        a..b
    }

    /// Triangle containing a point (nearest-centroid fallback for points on
    /// internal sub-edges).
    pub fn locate(&self, x: Point) -> Option<usize> {
        match self.mesh.locate(x) {
            Location::Cell(k) => self.locate_in_cell(k, x),
            Location::Outside => None,
        }
    }

    /// Triangle of a known cell containing a point.
    pub fn locate_in_cell(&self, cell: usize, x: Point) -> Option<usize> {
        let range = self.cell_tris(cell);
        for it in range.clone() {
            if self.tris[it].tri.contains(x, 1e-12) {
                return Some(it);
            }
        }
        range.min_by(|&a, &b| {
            let da = (self.tris[a].tri.centroid() - x).norm();
            let db = (self.tris[b].tri.centroid() - x).norm();
            da.partial_cmp(&db).unwrap()
        })
    }

    pub fn velocity(&self, x: Point) -> Option<Vec2> {
        self.locate(x).map(|it| self.tris[it].velocity(x))
    }

    /// The mesh face crossed by stepping over edge `edge` of tracking
    /// triangle `tri`, if that edge lies on a mesh face (diamond spokes
    /// return `None`).
    pub fn crossed_face(&self, tri: usize, edge: usize) -> Option<usize> {
        let t = &self.tris[tri];
        match self.kind {
            SubmeshKind::Elements => Some(self.mesh.cell(t.cell).faces[edge]),
            SubmeshKind::Diamonds => {
                if edge == 1 {
                    let local = tri - self.cell_range[t.cell].0;
                    Some(self.mesh.cell(t.cell).faces[local])
                } else {
                    None
                }
            }
        }
    }

    /// Per-cell divergence (constant by construction).
    pub fn cell_divergence(&self, cell: usize) -> f64 {
        let it = self.cell_range[cell].0;
        self.tris[it].divergence()
    }

    /// L2 norm over the domain (exact degree-2 quadrature).
    pub fn l2_norm(&self) -> f64 {
        let quad = TriRule::of_degree(2);
        let mut s = 0.0;
        for t in &self.tris {
            s += quad.integrate(&t.tri, |x| t.velocity(x).norm_squared());
        }
        s.max(0.0).sqrt()
    }

    pub fn max_velocity(&self) -> f64 {
        // RT0 velocities attain their max norm at triangle vertices.
        self.tris
            .iter()
            .flat_map(|t| t.tri.v.iter().map(move |&v| t.velocity(v).norm()))
            .fold(0.0, f64::max)
    }

    /// Max |div| over the field.
    pub fn max_divergence(&self) -> f64 {
        self.tris.iter().map(|t| t.divergence().abs()).fold(0.0, f64::max)
    }

    /// Validate the H(div) structure by direct evaluation: normal-trace
    /// continuity across internal edges, zero trace on the boundary,
    /// divergence bound and L2 norm.
    pub fn validate(&self) -> DarcyDiagnostics {
        let mut normal_jump = 0.0f64;
        let mut boundary_trace = 0.0f64;
        let mut flux_scale = 0.0f64;
        for (it, t) in self.tris.iter().enumerate() {
            for e in 0..3 {
                flux_scale = flux_scale.max(t.edge_flux[e].abs());
                let (p0, p1) = t.edge(e);
                let mid = Point::from((p0.coords + p1.coords) * 0.5);
                let n = t.edge_normal(e);
                let un = t.velocity(mid).dot(&n);
                match t.neighbor[e] {
                    EdgeNeighbor::Boundary => {
                        boundary_trace = boundary_trace.max(un.abs());
                    }
                    EdgeNeighbor::Tri(jt) => {
                        if jt > it {
                            let un_j = self.tris[jt].velocity(mid).dot(&n);
                            normal_jump = normal_jump.max((un - un_j).abs());
                        }
                    }
                }
            }
        }
        DarcyDiagnostics {
            normal_jump,
            boundary_trace,
            max_divergence: self.max_divergence(),
            l2_norm: self.l2_norm(),
            flux_scale,
            closure_residual: self.closure_residual,
        }
    }

    /// Measured constant of the local energy bound
    /// `|u|^2_{L2(K)} <= R (diam(K)^2 / |K|) sum_sigma F_{K,sigma}^2`.
    pub fn energy_bound_constant(&self) -> f64 {
        let quad = TriRule::of_degree(2);
        let mut worst = 0.0f64;
        for k in 0..self.mesh.cell_count() {
            let cell = self.mesh.cell(k);
            let pts: Vec<Point> = cell.verts.iter().map(|&v| self.mesh.vertex(v)).collect();
            let diam = crate::geom::polygon_diameter(&pts);
            let mut energy = 0.0;
            let mut flux_sq = 0.0;
            for it in self.cell_tris(k) {
                let t = &self.tris[it];
                energy += quad.integrate(&t.tri, |x| t.velocity(x).norm_squared());
                flux_sq += t.edge_flux[1] * t.edge_flux[1];
            }
            if flux_sq > 0.0 {
                worst = worst.max(energy / (diam * diam / cell.area * flux_sq));
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{ConstTensor, HmmGd};
    use crate::mesh::Rect;
    use crate::gdm::GradientDiscretisation;
    use nalgebra::Matrix2;

    #[test]
    fn zero_fluxes_give_zero_field() {
        let mesh = Arc::new(PolytopalMesh::cartesian(2, 2, Rect::UNIT).unwrap());
        let fluxes = FluxSet::new(vec![vec![0.0; 4]; 4]);
        let field = DarcyField::reconstruct(mesh, &fluxes, 1e-10).unwrap();
        for t in field.tris() {
            assert_eq!(t.a, Vec2::zeros());
            assert_eq!(t.b, 0.0);
        }
    }

    #[test]
    fn constant_field_reproduced_on_unit_square() {
        // Fluxes of u0 = (1, 0) on one unit cell: +-1 on the vertical
        // faces, 0 on the horizontal ones. The minimal-l2 reconstruction
        // returns exactly u0 with zero divergence.
        let mesh = Arc::new(PolytopalMesh::cartesian(1, 1, Rect::UNIT).unwrap());
        let u0 = Vec2::new(1.0, 0.0);
        let per: Vec<f64> = (0..4)
            .map(|i| {
                let f = mesh.face(mesh.cell(0).faces[i]);
                f.length * u0.dot(&f.outward_normal(0))
            })
            .collect();
        let field = DarcyField::reconstruct_unchecked(mesh, &FluxSet::new(vec![per]));
        for t in field.tris() {
            let x = t.tri.centroid();
            assert!((t.velocity(x) - u0).norm() < 1e-13, "{:?}", t.velocity(x));
            assert!(t.divergence().abs() < 1e-13);
        }
    }

    #[test]
    fn prescribed_face_traces_and_cell_divergence() {
        // For a conservative flux set the reconstruction reproduces the
        // face fluxes pointwise along each face and carries the prescribed
        // cell-constant divergence.
        let mesh = Arc::new(PolytopalMesh::cartesian(4, 4, Rect::UNIT).unwrap());
        // Conservative by construction: one value per face, zero on the
        // boundary, signs per side.
        let face_value: Vec<f64> = (0..mesh.face_count())
            .map(|f| {
                if mesh.face(f).is_boundary() {
                    0.0
                } else {
                    ((f * 29 % 13) as f64) / 5.0 - 1.0
                }
            })
            .collect();
        let per_cell: Vec<Vec<f64>> = (0..mesh.cell_count())
            .map(|k| {
                mesh.cell(k)
                    .faces
                    .iter()
                    .map(|&f| {
                        if mesh.face(f).cells.0 == k {
                            face_value[f]
                        } else {
                            -face_value[f]
                        }
                    })
                    .collect()
            })
            .collect();
        let fluxes = FluxSet::new(per_cell);
        let field = DarcyField::reconstruct(mesh.clone(), &fluxes, 1e-10).unwrap();
        for k in 0..mesh.cell_count() {
            let expected_div: f64 =
                fluxes.cell_fluxes(k).iter().sum::<f64>() / mesh.cell(k).area;
            assert!(
                (field.cell_divergence(k) - expected_div).abs()
                    < 1e-12 * expected_div.abs().max(1.0)
            );
            for (i, it) in field.cell_tris(k).enumerate() {
                let t = field.tri(it);
                // |sigma| u . n = F along the whole face.
                let (p0, p1) = t.edge(1);
                let n_out = t.edge_normal(1);
                let len = t.edge_length(1);
                for s in [0.25, 0.5, 0.75] {
                    let x = Point::from(p0.coords * (1.0 - s) + p1.coords * s);
                    let got = len * t.velocity(x).dot(&n_out);
                    let want = fluxes.flux(k, i);
                    assert!(
                        (got - want).abs() < 1e-12 * want.abs().max(1.0),
                        "cell {k} face {i}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn reconstruction_is_linear() {
        let mesh = Arc::new(PolytopalMesh::cartesian(3, 3, Rect::UNIT).unwrap());
        let gd = HmmGd::build(mesh.clone()).unwrap();
        let tensor = ConstTensor(Matrix2::identity());
        let n = gd.dof_count();
        let p1 = crate::gdm::DofVector((0..n).map(|i| ((i * 7 % 11) as f64) / 3.0).collect());
        let p2 = crate::gdm::DofVector((0..n).map(|i| ((i * 5 % 17) as f64) / 4.0).collect());
        let f1 = gd.fluxes(&tensor, &p1);
        let f2 = gd.fluxes(&tensor, &p2);
        let combo = gd.fluxes(&tensor, &p1.axpy(2.5, &p2));
        let field1 = DarcyField::reconstruct_unchecked(mesh.clone(), &f1);
        let field2 = DarcyField::reconstruct_unchecked(mesh.clone(), &f2);
        let field_combo = DarcyField::reconstruct_unchecked(mesh.clone(), &combo);
        let scale = field_combo.max_velocity().max(1.0);
        for it in 0..field1.tris().len() {
            let x = field1.tri(it).tri.centroid();
            let lin = field1.tri(it).velocity(x) + 2.5 * field2.tri(it).velocity(x);
            let direct = field_combo.tri(it).velocity(x);
            assert!((lin - direct).norm() < 1e-12 * scale);
        }
    }

    #[test]
    fn hdiv_continuity_of_reconstruction() {
        let mesh = Arc::new(PolytopalMesh::cartesian(3, 2, Rect::new(0.0, 0.0, 1.5, 1.0)).unwrap());
        let gd = HmmGd::build(mesh.clone()).unwrap();
        let tensor = ConstTensor(Matrix2::new(1.0, 0.2, 0.2, 2.0));
        let n = gd.dof_count();
        let p = crate::gdm::DofVector((0..n).map(|i| (i as f64).sin()).collect());
        let fluxes = gd.fluxes(&tensor, &p);
        let field = DarcyField::reconstruct_unchecked(mesh, &fluxes);
        let diag = field.validate();
        assert!(
            diag.normal_jump <= 1e-11 * diag.flux_scale.max(1.0),
            "jump {} scale {}",
            diag.normal_jump,
            diag.flux_scale
        );
    }

    #[test]
    fn rejects_nonconservative_input() {
        let mesh = Arc::new(PolytopalMesh::cartesian(2, 1, Rect::UNIT).unwrap());
        // Nonzero flux only on one side of the internal face.
        let mut per = vec![vec![0.0; 4]; 2];
        let internal = (0..mesh.face_count())
            .find(|&f| !mesh.face(f).is_boundary())
            .unwrap();
        let k = mesh.face(internal).cells.0;
        let ik = mesh.cell(k).faces.iter().position(|&g| g == internal).unwrap();
        per[k][ik] = 1.0;
        match DarcyField::reconstruct(mesh, &FluxSet::new(per), 1e-10) {
            Err(DarcyError::NotConservative { .. }) => {}
            other => panic!("expected conservativity error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_boundary_flux() {
        let mesh = Arc::new(PolytopalMesh::cartesian(1, 1, Rect::UNIT).unwrap());
        let per = vec![vec![1.0, 0.0, 0.0, 0.0]];
        match DarcyField::reconstruct(mesh, &FluxSet::new(per), 1e-10) {
            Err(DarcyError::BoundaryFlux { .. }) => {}
            other => panic!("expected boundary flux error, got {other:?}"),
        }
    }
}
