//! Report emission: bit-stable CSV tables (fixed column order, 17
//! significant digits) and legacy ASCII VTK snapshots.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::darcy::DarcyField;
use crate::gdm::{self, DofVector, GradientDiscretisation};
use crate::mesh::PolytopalMesh;
use crate::scheme::RunHistory;

use super::{ConvergenceReport, InvariantLedger, QualityRow};

fn fmt(v: f64) -> String {
    // One digit before the point plus 16 after: 17 significant digits.
    format!("{v:.16e}")
}

/// Per-step diagnostics of a run as CSV (header always present).
pub fn diagnostics_csv(history: &RunHistory) -> String {
    let mut out = String::new();
    out.push_str(
        "step,time,grad_p_l2,pi_p_l2,pressure_mean,u_dispersion_l2,pi_c_l2,\
         weighted_grad_c_sq,mass,max_divergence,u_track_l2,c1_step,\
         source_incompatibility,pressure_iters,concentration_iters,\
         min_curvature,traces_attempted,traces_failed,traces_flagged\n",
    );
    for d in &history.diagnostics {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            d.step,
            fmt(d.time),
            fmt(d.grad_p_l2),
            fmt(d.pi_p_l2),
            fmt(d.pressure_mean),
            fmt(d.u_dispersion_l2),
            fmt(d.pi_c_l2),
            fmt(d.weighted_grad_c_sq),
            fmt(d.mass),
            fmt(d.max_divergence),
            fmt(d.u_track_l2),
            fmt(d.c1_step),
            fmt(d.source_incompatibility),
            d.pressure_iters,
            d.concentration_iters,
            fmt(d.min_curvature),
            d.traces_attempted,
            d.traces_failed,
            d.traces_flagged,
        )
        .unwrap();
    }
    out
}

/// Convergence table as CSV.
pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut out = String::new();
    out.push_str("level,h");
    if let Some(first) = report.rows.first() {
        for (name, _) in &first.values {
            out.push(',');
            out.push_str(name);
        }
    }
    out.push('\n');
    for row in &report.rows {
        write!(out, "{},{}", row.level, fmt(row.h)).unwrap();
        for (_, v) in &row.values {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push('\n');
    }
    if !report.orders.is_empty() {
        out.push_str("# observed orders (log2 of consecutive ratios)\n");
        for (name, orders) in &report.orders {
            write!(out, "# {name}:").unwrap();
            for o in orders {
                write!(out, " {o:.3}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

/// GD quality table as CSV.
pub fn quality_csv(rows: &[QualityRow]) -> String {
    let mut out = String::new();
    let ns = rows.first().map_or(0, |r| r.consistency.len());
    let nw = rows.first().map_or(0, |r| r.conformity.len());
    out.push_str("level,h,coercivity");
    for i in 0..ns {
        write!(out, ",consistency_{i}").unwrap();
    }
    for i in 0..nw {
        write!(out, ",conformity_{i}").unwrap();
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{}", r.level, fmt(r.h), fmt(r.coercivity)).unwrap();
        for v in &r.consistency {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        for v in &r.conformity {
            out.push(',');
            out.push_str(&fmt(*v));
        }
        out.push('\n');
    }
    out
}

/// Invariant ledger as CSV.
pub fn ledger_csv(ledger: &InvariantLedger) -> String {
    let mut out = String::from("name,passed,measured,tolerance,details\n");
    for e in &ledger.entries {
        writeln!(
            out,
            "{},{},{},{},\"{}\"",
            e.name,
            e.passed,
            fmt(e.measured),
            fmt(e.tolerance),
            e.details.replace('"', "'")
        )
        .unwrap();
    }
    for (name, value) in &ledger.constants {
        writeln!(out, "constant:{name},,{},,\"measured constant\"", fmt(*value)).unwrap();
    }
    out
}

/// Where scalar data attaches in a VTK snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VtkAttachment {
    /// Nodal dofs written as point data (conforming reconstructions).
    PointData,
    /// One value per cell, sampled at the cell point.
    CellData,
}

/// Legacy ASCII VTK of the mesh with one scalar field.
pub fn vtk_scalar(
    mesh: &PolytopalMesh,
    gd: &dyn GradientDiscretisation,
    dofs: &DofVector,
    name: &str,
    attachment: VtkAttachment,
) -> String {
    let mut out = String::new();
    writeln!(out, "# vtk DataFile Version 3.0").unwrap();
    writeln!(out, "{name}").unwrap();
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(out, "POINTS {} double", mesh.vertex_count()).unwrap();
    for v in 0..mesh.vertex_count() {
        let p = mesh.vertex(v);
        writeln!(out, "{} {} 0", fmt(p.x), fmt(p.y)).unwrap();
    }
    let total: usize = (0..mesh.cell_count())
        .map(|k| mesh.cell(k).verts.len() + 1)
        .sum();
    writeln!(out, "CELLS {} {}", mesh.cell_count(), total).unwrap();
    for k in 0..mesh.cell_count() {
        let verts = &mesh.cell(k).verts;
        write!(out, "{}", verts.len()).unwrap();
        for &v in verts {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "CELL_TYPES {}", mesh.cell_count()).unwrap();
    for k in 0..mesh.cell_count() {
        // 5 = triangle, 9 = quad, 7 = polygon.
        let t = match mesh.cell(k).verts.len() {
            3 => 5,
            4 => 9,
            _ => 7,
        };
        writeln!(out, "{t}").unwrap();
    }
    match attachment {
        VtkAttachment::PointData => {
            assert_eq!(dofs.len(), mesh.vertex_count(), "nodal field expected");
            writeln!(out, "POINT_DATA {}", mesh.vertex_count()).unwrap();
            writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
            for v in &dofs.0 {
                writeln!(out, "{}", fmt(*v)).unwrap();
            }
        }
        VtkAttachment::CellData => {
            writeln!(out, "CELL_DATA {}", mesh.cell_count()).unwrap();
            writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
            for k in 0..mesh.cell_count() {
                let v = gdm::eval_pi(gd, dofs, mesh.cell(k).point).unwrap_or(0.0);
                writeln!(out, "{}", fmt(v)).unwrap();
            }
        }
    }
    out
}

/// Legacy ASCII VTK of per-cell values (cell data on the mesh).
pub fn vtk_cell_scalars(mesh: &PolytopalMesh, values: &[f64], name: &str) -> String {
    let mut out = String::new();
    writeln!(out, "# vtk DataFile Version 3.0").unwrap();
    writeln!(out, "{name}").unwrap();
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    writeln!(out, "POINTS {} double", mesh.vertex_count()).unwrap();
    for v in 0..mesh.vertex_count() {
        let p = mesh.vertex(v);
        writeln!(out, "{} {} 0", fmt(p.x), fmt(p.y)).unwrap();
    }
    let total: usize = (0..mesh.cell_count())
        .map(|k| mesh.cell(k).verts.len() + 1)
        .sum();
    writeln!(out, "CELLS {} {}", mesh.cell_count(), total).unwrap();
    for k in 0..mesh.cell_count() {
        let verts = &mesh.cell(k).verts;
        write!(out, "{}", verts.len()).unwrap();
        for &v in verts {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    writeln!(out, "CELL_TYPES {}", mesh.cell_count()).unwrap();
    for k in 0..mesh.cell_count() {
        let t = match mesh.cell(k).verts.len() {
            3 => 5,
            4 => 9,
            _ => 7,
        };
        writeln!(out, "{t}").unwrap();
    }
    writeln!(out, "CELL_DATA {}", mesh.cell_count()).unwrap();
    writeln!(out, "SCALARS {name} double 1\nLOOKUP_TABLE default").unwrap();
    for k in 0..mesh.cell_count() {
        writeln!(out, "{}", fmt(values[k])).unwrap();
    }
    out
}

/// Legacy ASCII VTK of a velocity field sampled at the centroids of its
/// tracking triangles (cell vectors on the triangulated sub-mesh).
pub fn vtk_velocity(field: &DarcyField, name: &str) -> String {
    let mut out = String::new();
    writeln!(out, "# vtk DataFile Version 3.0").unwrap();
    writeln!(out, "{name}").unwrap();
    out.push_str("ASCII\nDATASET UNSTRUCTURED_GRID\n");
    let tris = field.tris();
    writeln!(out, "POINTS {} double", 3 * tris.len()).unwrap();
    for t in tris {
        for v in &t.tri.v {
            writeln!(out, "{} {} 0", fmt(v.x), fmt(v.y)).unwrap();
        }
    }
    writeln!(out, "CELLS {} {}", tris.len(), 4 * tris.len()).unwrap();
    for (i, _) in tris.iter().enumerate() {
        writeln!(out, "3 {} {} {}", 3 * i, 3 * i + 1, 3 * i + 2).unwrap();
    }
    writeln!(out, "CELL_TYPES {}", tris.len()).unwrap();
    for _ in tris {
        out.push_str("5\n");
    }
    writeln!(out, "CELL_DATA {}", tris.len()).unwrap();
    writeln!(out, "VECTORS {name} double").unwrap();
    for t in tris {
        let u = t.velocity(t.tri.centroid());
        writeln!(out, "{} {} 0", fmt(u.x), fmt(u.y)).unwrap();
    }
    out
}

/// Write a string to a file, creating parent directories.
pub fn write_file(path: impl AsRef<Path>, content: &str) -> std::io::Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())
}
