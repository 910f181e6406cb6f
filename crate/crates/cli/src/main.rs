//! `ellam`: CLI driver for the coupled miscible-displacement solver.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use gdellam::flow::{FlowConfig, Tracer};
use gdellam::harness::{self, export};
use gdellam::mesh::PolytopalMesh;
use gdellam::scheme::CoupledSolver;
use gdellam::Point;

#[derive(Parser)]
#[command(name = "ellam", about = "GDM-ELLAM solver for miscible displacement", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a coupled simulation from a TOML config.
    Run { config: PathBuf },
    /// Run a convergence study from a TOML spec.
    Study { spec: PathBuf },
    /// Run the invariant suite from a TOML spec; exits nonzero on failure.
    Invariants { spec: PathBuf },
    /// Print coercivity/consistency/conformity quality of a GD on a mesh.
    GdQuality {
        mesh: PathBuf,
        /// "hmm" or "p1".
        gd: String,
    },
    /// Print mesh counts and regularity.
    MeshInfo { mesh: PathBuf },
    /// Trace one characteristic and print its crossing events.
    Trace {
        mesh: PathBuf,
        /// `darcy2d` field file (per-face fluxes, optional porosities).
        field: PathBuf,
        x: f64,
        y: f64,
        time: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match command {
        Command::Run { config } => {
            let setup = config::load_run(&config)?;
            let concentration_gd = setup.config.concentration_gd;
            let solver = CoupledSolver::new(
                setup.mesh.clone(),
                setup.model,
                setup.times,
                setup.config,
            )?;
            let history = solver.run()?;
            let dir = &setup.output_dir;
            export::write_file(dir.join("diagnostics.csv"), &export::diagnostics_csv(&history))?;
            if setup.vtk {
                let gd = solver.concentration_gd();
                let attachment = match concentration_gd {
                    gdellam::scheme::ConcentrationGdChoice::P1 => {
                        export::VtkAttachment::PointData
                    }
                    gdellam::scheme::ConcentrationGdChoice::Hmm => {
                        export::VtkAttachment::CellData
                    }
                };
                for (n, c) in history.concentrations.iter().enumerate() {
                    if n % setup.vtk_every != 0 && n != history.concentrations.len() - 1 {
                        continue;
                    }
                    export::write_file(
                        dir.join(format!("concentration_{n:04}.vtk")),
                        &export::vtk_scalar(&setup.mesh, gd, c, "concentration", attachment),
                    )?;
                }
                for (n, p) in history.pressures.iter().enumerate() {
                    if n % setup.vtk_every != 0 && n != history.pressures.len() - 1 {
                        continue;
                    }
                    let cells = setup.mesh.cell_count();
                    export::write_file(
                        dir.join(format!("pressure_{n:04}.vtk")),
                        &export::vtk_cell_scalars(&setup.mesh, &p.0[..cells], "pressure"),
                    )?;
                }
                for (n, u) in history.velocities.iter().enumerate() {
                    if n % setup.vtk_every != 0 && n != history.velocities.len() - 1 {
                        continue;
                    }
                    export::write_file(
                        dir.join(format!("velocity_{n:04}.vtk")),
                        &export::vtk_velocity(u, "velocity"),
                    )?;
                }
            }
            let last = history.diagnostics.last();
            println!(
                "run finished: {} steps, mass drift {:.3e}, outputs in {}",
                history.times.step_count(),
                history.mass_drift(),
                dir.display()
            );
            if let Some(d) = last {
                println!(
                    "final |grad p| = {:.6e}, |Pi c| = {:.6e}, max div u = {:.6e}",
                    d.grad_p_l2, d.pi_c_l2, d.max_divergence
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Study { spec } => {
            let (spec, outdir) = config::load_study(&spec)?;
            let report = harness::run_convergence(&spec)?;
            let csv = export::convergence_csv(&report);
            print!("{csv}");
            export::write_file(outdir.join("convergence.csv"), &csv)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Invariants { spec } => {
            let (spec, outdir) = config::load_study(&spec)?;
            let ledger = harness::run_invariants(&spec)?;
            let csv = export::ledger_csv(&ledger);
            print!("{csv}");
            export::write_file(outdir.join("invariants.csv"), &csv)?;
            if ledger.all_passed() {
                println!("# all invariants passed");
                Ok(ExitCode::SUCCESS)
            } else {
                println!("# some invariants FAILED");
                Ok(ExitCode::FAILURE)
            }
        }
        Command::GdQuality { mesh, gd } => {
            let mesh = Arc::new(PolytopalMesh::load(&mesh)?);
            let h = mesh.quality().h_max;
            let row = match gd.as_str() {
                "hmm" => {
                    let gd = gdellam::hmm::HmmGd::build(mesh)?;
                    harness::gd_quality(&gd, 0, h)?
                }
                "p1" => {
                    let gd = gdellam::fe::P1Gd::build(mesh)?;
                    harness::gd_quality(&gd, 0, h)?
                }
                other => return Err(format!("unknown gd '{other}' (expected 'hmm' or 'p1')").into()),
            };
            print!("{}", export::quality_csv(&[row]));
            Ok(ExitCode::SUCCESS)
        }
        Command::MeshInfo { mesh } => {
            let mesh = PolytopalMesh::load(&mesh)?;
            let q = mesh.quality();
            println!("vertices:       {}", mesh.vertex_count());
            println!("cells:          {}", mesh.cell_count());
            println!("faces:          {}", mesh.face_count());
            println!("internal faces: {}", mesh.internal_face_count());
            println!("domain area:    {:.12e}", mesh.domain_area());
            println!("regularity:     {:.12e}", q.regularity);
            println!("h_max:          {:.12e}", q.h_max);
            Ok(ExitCode::SUCCESS)
        }
        Command::Trace { mesh, field, x, y, time } => {
            let mesh = Arc::new(PolytopalMesh::load(&mesh)?);
            let (darcy, phi) = config::load_field(&field, &mesh)?;
            let tracer = Tracer::new(&darcy, &phi, FlowConfig::default());
            let trace = tracer.trace(Point::new(x, y), time)?;
            println!("start:    ({x}, {y})");
            println!("duration: {time}");
            println!("status:   {:?}", trace.status);
            println!("events:   {}", trace.events.len());
            for ev in &trace.events {
                println!(
                    "  t={:.9e} tri {} -> {} at ({:.9e}, {:.9e})",
                    ev.time,
                    ev.tri_from,
                    ev.tri_to.map_or("boundary".to_string(), |t| t.to_string()),
                    ev.position.x,
                    ev.position.y
                );
            }
            println!("end:      ({:.12e}, {:.12e})", trace.end.x, trace.end.y);
            println!("jacobian: {:.12e}", trace.jacobian);
            Ok(ExitCode::SUCCESS)
        }
    }
}
