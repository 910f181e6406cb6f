//! Polytopal meshes in 2D: polygonal cells, straight faces, a chosen point
//! inside each cell, and the diamond sub-mesh (triangles joining each face
//! to the cell point) on which the hybrid discretisations and the velocity
//! reconstruction live.
//!
//! A mesh is immutable after construction and every constructor validates:
//! - each internal face has exactly two incident cells, boundary faces one;
//! - cells are star-shaped with respect to their cell point (all
//!   face-to-point distances positive);
//! - the closed-polygon identity `sum |sigma| n_{K,sigma} = 0` per cell;
//! - cell areas tile the domain area computed from the boundary.
//!
//! Non-conforming (hanging-node) configurations are supported as long as
//! every hanging vertex is listed in the loops of all incident cells, so
//! that faces derived from consecutive loop vertices match exactly.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geom::{self, cross, Point, Triangle, Vec2};

pub mod format;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("mesh file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid mesh topology: {0}")]
    Topology(String),
    #[error("cell {cell} is not star-shaped with respect to its cell point (face {face}, distance {dist:.3e})")]
    NotStarShaped { cell: usize, face: usize, dist: f64 },
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("geometric consistency check failed: {0}")]
    Inconsistent(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A polygonal cell: vertex loop (counter-clockwise), cell point, area and
/// the global ids of its faces in loop order (face `i` joins loop vertices
/// `i` and `i+1`).
#[derive(Clone, Debug)]
pub struct Cell {
    pub verts: Vec<usize>,
    pub point: Point,
    pub area: f64,
    pub faces: Vec<usize>,
}

/// A straight face: endpoint vertex ids, length, center of mass, incident
/// cells (second entry `None` on the boundary) and the unit normal oriented
/// outward from the first incident cell.
#[derive(Clone, Debug)]
pub struct Face {
    pub verts: [usize; 2],
    pub length: f64,
    pub center: Point,
    pub cells: (usize, Option<usize>),
    pub normal: Vec2,
}

impl Face {
    pub fn is_boundary(&self) -> bool {
        self.cells.1.is_none()
    }

    /// The cell on the other side of the face, if any.
    pub fn neighbor(&self, cell: usize) -> Option<usize> {
        if self.cells.0 == cell {
            self.cells.1
        } else {
            Some(self.cells.0)
        }
    }

    /// Outward unit normal seen from `cell`.
    pub fn outward_normal(&self, cell: usize) -> Vec2 {
        if self.cells.0 == cell {
            self.normal
        } else {
            -self.normal
        }
    }
}

/// Mesh regularity measures: the regularity parameter (max face count plus
/// worst diamond diameter-to-inradius ratio) and the mesh size.
#[derive(Clone, Copy, Debug)]
pub struct MeshQuality {
    pub regularity: f64,
    pub h_max: f64,
}

/// Result of point location.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Cell(usize),
    Outside,
}

/// Axis-aligned rectangle used by the structured generators.
#[derive(Clone, Copy, Debug)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub const UNIT: Rect = Rect { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }
}

#[derive(Clone, Debug)]
pub struct PolytopalMesh {
    vertices: Vec<Point>,
    cells: Vec<Cell>,
    faces: Vec<Face>,
    /// d_{K,sigma} indexed like `cells[k].faces`.
    distances: Vec<Vec<f64>>,
    domain_area: f64,
}

impl PolytopalMesh {
    /// Build a mesh from vertex coordinates and cell loops. Cell points
    /// default to centroids; entries of `points` may override them.
    pub fn from_cells(
        vertices: Vec<Point>,
        cell_loops: Vec<Vec<usize>>,
        points: Vec<Option<Point>>,
    ) -> Result<Self, MeshError> {
        if cell_loops.is_empty() {
            return Err(MeshError::Topology("mesh has no cells".into()));
        }
        let mut cells = Vec::with_capacity(cell_loops.len());
        for (k, mut loop_) in cell_loops.into_iter().enumerate() {
            if loop_.len() < 3 {
                return Err(MeshError::Topology(format!(
                    "cell {k} has fewer than 3 vertices"
                )));
            }
            for &v in &loop_ {
                if v >= vertices.len() {
                    return Err(MeshError::Topology(format!(
                        "cell {k} references missing vertex {v}"
                    )));
                }
            }
            let pts: Vec<Point> = loop_.iter().map(|&v| vertices[v]).collect();
            let mut signed = 0.0;
            for i in 0..pts.len() {
                let a = pts[i];
                let b = pts[(i + 1) % pts.len()];
                signed += cross(a.coords, b.coords);
            }
            if signed < 0.0 {
                loop_.reverse();
            }
            let pts: Vec<Point> = loop_.iter().map(|&v| vertices[v]).collect();
            let area = geom::polygon_area(&pts);
            if !(area > 0.0) {
                return Err(MeshError::Degenerate(format!("cell {k} has zero area")));
            }
            let point = points.get(k).copied().flatten().unwrap_or_else(|| geom::polygon_centroid(&pts));
            cells.push(Cell {
                verts: loop_,
                point,
                area,
                faces: Vec::new(),
            });
        }

        // Derive faces by matching vertex pairs of consecutive loop entries.
        let mut face_of: HashMap<(usize, usize), usize> = HashMap::new();
        let mut faces: Vec<Face> = Vec::new();
        for k in 0..cells.len() {
            let loop_ = cells[k].verts.clone();
            let n = loop_.len();
            for i in 0..n {
                let (a, b) = (loop_[i], loop_[(i + 1) % n]);
                if a == b {
                    return Err(MeshError::Topology(format!(
                        "cell {k} repeats vertex {a} consecutively"
                    )));
                }
                let key = (a.min(b), a.max(b));
                let fid = match face_of.get(&key) {
                    Some(&fid) => {
                        let face = &mut faces[fid];
                        if face.cells.1.is_some() {
                            return Err(MeshError::Topology(format!(
                                "face between vertices {a} and {b} is shared by more than two cells"
                            )));
                        }
                        face.cells.1 = Some(k);
                        fid
                    }
                    None => {
                        let pa = vertices[a];
                        let pb = vertices[b];
                        let length = (pb - pa).norm();
                        if !(length > 0.0) {
                            return Err(MeshError::Degenerate(format!(
                                "face between vertices {a} and {b} has zero length"
                            )));
                        }
                        // Outward normal for the first incident cell: the
                        // loop is counter-clockwise so the outward direction
                        // is the edge direction rotated by -90 degrees.
                        let t = (pb - pa) / length;
                        let normal = Vec2::new(t.y, -t.x);
                        faces.push(Face {
                            verts: [a, b],
                            length,
                            center: Point::from((pa.coords + pb.coords) * 0.5),
                            cells: (k, None),
                            normal,
                        });
                        face_of.insert(key, faces.len() - 1);
                        faces.len() - 1
                    }
                };
                cells[k].faces.push(fid);
            }
        }

        // Star-shapedness: orthogonal distance from the cell point to each
        // face line must be positive with the outward orientation.
        let mut distances = Vec::with_capacity(cells.len());
        for (k, cell) in cells.iter().enumerate() {
            let mut d_k = Vec::with_capacity(cell.faces.len());
            for (i, &fid) in cell.faces.iter().enumerate() {
                let face = &faces[fid];
                let n_out = face.outward_normal(k);
                let a = vertices[face.verts[0]];
                let d = (a - cell.point).dot(&n_out);
                if !(d > 0.0) {
                    return Err(MeshError::NotStarShaped { cell: k, face: i, dist: d });
                }
                d_k.push(d);
            }
            distances.push(d_k);
        }

        let mesh = Self {
            domain_area: 0.0,
            vertices,
            cells,
            faces,
            distances,
        };
        mesh.validate()
    }

    fn validate(mut self) -> Result<Self, MeshError> {
        // Closed-polygon identity per cell.
        for (k, cell) in self.cells.iter().enumerate() {
            let mut sum = Vec2::zeros();
            let mut perim = 0.0;
            for &fid in &cell.faces {
                let f = &self.faces[fid];
                sum += f.length * f.outward_normal(k);
                perim += f.length;
            }
            if sum.norm() > 1e-12 * perim {
                return Err(MeshError::Inconsistent(format!(
                    "cell {k}: sum |sigma| n_sigma = {:.3e} exceeds 1e-12 * perimeter",
                    sum.norm()
                )));
            }
        }
        // Domain area from the boundary (Gauss divergence of x/2) must match
        // the sum of cell areas.
        let mut boundary_area = 0.0;
        for f in &self.faces {
            if f.is_boundary() {
                let n_out = f.outward_normal(f.cells.0);
                boundary_area += 0.5 * f.length * f.center.coords.dot(&n_out);
            }
        }
        let cell_area: f64 = self.cells.iter().map(|c| c.area).sum();
        if (boundary_area - cell_area).abs() > 1e-12 * cell_area {
            return Err(MeshError::Inconsistent(format!(
                "cell areas sum to {cell_area:.15e} but the boundary encloses {boundary_area:.15e}"
            )));
        }
        // Diamond areas tile each cell.
        for k in 0..self.cells.len() {
            let tiled: f64 = (0..self.cells[k].faces.len())
                .map(|i| self.diamond(k, i).area())
                .sum();
            if (tiled - self.cells[k].area).abs() > 1e-12 * self.cells[k].area {
                return Err(MeshError::Inconsistent(format!(
                    "cell {k}: diamond areas {tiled:.15e} do not tile the cell area {:.15e}",
                    self.cells[k].area
                )));
            }
        }
        self.domain_area = cell_area;
        Ok(self)
    }

    /// Conforming Cartesian mesh of a rectangle; cell points at centroids.
    pub fn cartesian(nx: usize, ny: usize, domain: Rect) -> Result<Self, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::Topology("cell counts must be at least 1".into()));
        }
        if !(domain.x1 > domain.x0) || !(domain.y1 > domain.y0) {
            return Err(MeshError::Degenerate("domain rectangle is degenerate".into()));
        }
        let dx = (domain.x1 - domain.x0) / nx as f64;
        let dy = (domain.y1 - domain.y0) / ny as f64;
        let vid = |i: usize, j: usize| j * (nx + 1) + i;
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(Point::new(domain.x0 + i as f64 * dx, domain.y0 + j as f64 * dy));
            }
        }
        let mut loops = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                loops.push(vec![vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]);
            }
        }
        Self::from_cells(vertices, loops, Vec::new())
    }

    /// Conforming triangulation of a rectangle: each Cartesian cell is split
    /// along its south-west to north-east diagonal.
    pub fn triangulated(nx: usize, ny: usize, domain: Rect) -> Result<Self, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::Topology("cell counts must be at least 1".into()));
        }
        if !(domain.x1 > domain.x0) || !(domain.y1 > domain.y0) {
            return Err(MeshError::Degenerate("domain rectangle is degenerate".into()));
        }
        let dx = (domain.x1 - domain.x0) / nx as f64;
        let dy = (domain.y1 - domain.y0) / ny as f64;
        let vid = |i: usize, j: usize| j * (nx + 1) + i;
        let mut vertices = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                vertices.push(Point::new(domain.x0 + i as f64 * dx, domain.y0 + j as f64 * dy));
            }
        }
        let mut loops = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                loops.push(vec![vid(i, j), vid(i + 1, j), vid(i + 1, j + 1)]);
                loops.push(vec![vid(i, j), vid(i + 1, j + 1), vid(i, j + 1)]);
            }
        }
        Self::from_cells(vertices, loops, Vec::new())
    }

    /// Load a mesh from the `polymesh 2d` text format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MeshError> {
        let text = std::fs::read_to_string(path)?;
        format::parse(&text)
    }

    /// Serialise to the `polymesh 2d` text format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("polymesh 2d\n");
        for v in &self.vertices {
            writeln!(out, "v {:.17e} {:.17e}", v.x, v.y).unwrap();
        }
        for c in &self.cells {
            out.push('c');
            for &v in &c.verts {
                write!(out, " {v}").unwrap();
            }
            writeln!(out, " @ {:.17e} {:.17e}", c.point.x, c.point.y).unwrap();
        }
        out
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertex(&self, v: usize) -> Point {
        self.vertices[v]
    }

    pub fn cell(&self, k: usize) -> &Cell {
        &self.cells[k]
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn face(&self, f: usize) -> &Face {
        &self.faces[f]
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn domain_area(&self) -> f64 {
        self.domain_area
    }

    pub fn internal_face_count(&self) -> usize {
        self.faces.iter().filter(|f| !f.is_boundary()).count()
    }

    /// Orthogonal distance from the cell point of `k` to its `i`-th face.
    pub fn distance(&self, k: usize, i: usize) -> f64 {
        self.distances[k][i]
    }

    /// Diamond `D_{K,sigma}`: triangle joining the `i`-th face of cell `k`
    /// to the cell point. Vertices are ordered (cell point, a, b) with
    /// a -> b the counter-clockwise orientation of the loop, so the triangle
    /// is counter-clockwise as well.
    pub fn diamond(&self, k: usize, i: usize) -> Triangle {
        let cell = &self.cells[k];
        let n = cell.verts.len();
        let a = self.vertices[cell.verts[i]];
        let b = self.vertices[cell.verts[(i + 1) % n]];
        Triangle::new(cell.point, a, b)
    }

    /// Number of diamonds (one per cell-face incidence).
    pub fn diamond_count(&self) -> usize {
        self.cells.iter().map(|c| c.faces.len()).sum()
    }

    /// Iterate over `(cell, local face index, global face id)`.
    pub fn cell_faces(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .flat_map(|(k, c)| c.faces.iter().enumerate().map(move |(i, &f)| (k, i, f)))
    }

    /// Mesh regularity parameter and mesh size. The regularity parameter is
    /// the maximal number of faces of a cell plus the worst ratio of diamond
    /// diameter to diamond inradius; it is invariant under rigid motions and
    /// uniform scalings.
    pub fn quality(&self) -> MeshQuality {
        let max_faces = self.cells.iter().map(|c| c.faces.len()).max().unwrap_or(0) as f64;
        let mut worst = 0.0f64;
        let mut h_max = 0.0f64;
        for (k, cell) in self.cells.iter().enumerate() {
            for i in 0..cell.faces.len() {
                let d = self.diamond(k, i);
                worst = worst.max(d.diameter() / d.inradius());
            }
            let pts: Vec<Point> = cell.verts.iter().map(|&v| self.vertices[v]).collect();
            h_max = h_max.max(geom::polygon_diameter(&pts));
        }
        MeshQuality {
            regularity: max_faces + worst,
            h_max,
        }
    }

    /// Locate the cell containing a point. Points on faces resolve to the
    /// lowest incident cell id (cells are scanned in id order with an
    /// inclusive containment test); points outside the domain return
    /// [`Location::Outside`].
    pub fn locate(&self, x: Point) -> Location {
        for k in 0..self.cells.len() {
            if self.cell_contains(k, x) {
                return Location::Cell(k);
            }
        }
        Location::Outside
    }

    /// Inclusive containment test via the diamond triangles.
    pub fn cell_contains(&self, k: usize, x: Point) -> bool {
        let cell = &self.cells[k];
        // Cheap bounding-box rejection first.
        let mut lo = cell.point;
        let mut hi = cell.point;
        for &v in &cell.verts {
            let p = self.vertices[v];
            lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
            hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
        }
        let tol = 1e-12 * (hi - lo).norm().max(1.0);
        if x.x < lo.x - tol || x.x > hi.x + tol || x.y < lo.y - tol || x.y > hi.y + tol {
            return false;
        }
        (0..cell.faces.len()).any(|i| self.diamond(k, i).contains(x, 1e-12))
    }
}
