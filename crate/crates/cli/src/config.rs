//! TOML configuration files: run configs (mesh, model, wells, time
//! stepping, scheme and solver options, output) and study specifications.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Matrix2;
use serde::Deserialize;
use thiserror::Error;

use gdellam::flow::Porosity;
use gdellam::gdm::{FnScalar, TimeSteps};
use gdellam::harness::{Scenario, StudySpec};
use gdellam::linalg::{Preconditioner, SolverConfig};
use gdellam::mesh::{PolytopalMesh, Rect};
use gdellam::scheme::{
    ConcentrationGdChoice, ModelData, PressureGdChoice, SchemeConfig, SourceMode, Well, WellSet,
};
use gdellam::Point;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Mesh(#[from] gdellam::mesh::MeshError),
    #[error(transparent)]
    Scheme(#[from] gdellam::scheme::SchemeError),
    #[error(transparent)]
    Flow(#[from] gdellam::flow::TraceError),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunFile {
    pub mesh: MeshSection,
    pub model: ModelSection,
    #[serde(default)]
    pub well: Vec<WellSection>,
    pub time: TimeSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshSection {
    pub file: Option<PathBuf>,
    /// `[nx, ny]` Cartesian cells.
    pub cartesian: Option<[usize; 2]>,
    /// `[nx, ny]` base grid, each cell split into two triangles.
    pub triangulated: Option<[usize; 2]>,
    /// `[x0, y0, x1, y1]`, default the unit square.
    pub domain: Option<[f64; 4]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Scalar permeability `k` (tensor `k I`) or `[kxx, kxy, kyy]`.
    #[serde(default = "one")]
    pub permeability: toml::Value,
    #[serde(default = "one_f")]
    pub viscosity_ref: f64,
    #[serde(default = "one_f")]
    pub mobility_ratio: f64,
    #[serde(default = "one_f")]
    pub porosity: f64,
    pub d_m: f64,
    pub d_l: f64,
    pub d_t: f64,
    #[serde(default)]
    pub initial_concentration: f64,
    /// Optional Gaussian hump added to the constant initial state.
    pub initial_bump: Option<BumpSection>,
    pub t_end: f64,
}

fn one() -> toml::Value {
    toml::Value::Float(1.0)
}

fn one_f() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSection {
    pub center: [f64; 2],
    pub width: f64,
    pub amplitude: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellSection {
    pub kind: String,
    pub center: [f64; 2],
    pub radius: f64,
    pub rate: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub steps: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub pressure_gd: Option<String>,
    pub concentration_gd: Option<String>,
    pub trapezoid_weight: Option<f64>,
    pub source_mode: Option<String>,
    pub ellam_quad_degree: Option<usize>,
    pub ellam_subdivisions: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    /// "diagonal" (default) or "none".
    pub preconditioner: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
    #[serde(default)]
    pub vtk: bool,
    pub vtk_every: Option<usize>,
}

/// Everything needed to run a simulation.
pub struct RunSetup {
    pub mesh: Arc<PolytopalMesh>,
    pub model: ModelData,
    pub times: TimeSteps,
    pub config: SchemeConfig,
    pub output_dir: PathBuf,
    pub vtk: bool,
    pub vtk_every: usize,
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_gd_pair(
    scheme: &SchemeSection,
) -> Result<(PressureGdChoice, ConcentrationGdChoice), ConfigError> {
    let pressure = match scheme.pressure_gd.as_deref().unwrap_or("hmm") {
        "hmm" => PressureGdChoice::Hmm,
        "rt0" | "rt0-mixed" => PressureGdChoice::Rt0Mixed,
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown pressure_gd '{other}' (expected 'hmm' or 'rt0')"
            )))
        }
    };
    let concentration = match scheme.concentration_gd.as_deref().unwrap_or("hmm") {
        "hmm" => ConcentrationGdChoice::Hmm,
        "p1" => ConcentrationGdChoice::P1,
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown concentration_gd '{other}' (expected 'hmm' or 'p1')"
            )))
        }
    };
    Ok((pressure, concentration))
}

fn build_mesh(section: &MeshSection) -> Result<Arc<PolytopalMesh>, ConfigError> {
    let domain = section
        .domain
        .map(|[x0, y0, x1, y1]| Rect::new(x0, y0, x1, y1))
        .unwrap_or(Rect::UNIT);
    let picks = [
        section.file.is_some(),
        section.cartesian.is_some(),
        section.triangulated.is_some(),
    ]
    .iter()
    .filter(|&&b| b)
    .count();
    if picks != 1 {
        return Err(ConfigError::Invalid(
            "[mesh] needs exactly one of 'file', 'cartesian' or 'triangulated'".into(),
        ));
    }
    let mesh = if let Some(file) = &section.file {
        PolytopalMesh::load(file)?
    } else if let Some([nx, ny]) = section.cartesian {
        PolytopalMesh::cartesian(nx, ny, domain)?
    } else {
        let [nx, ny] = section.triangulated.unwrap();
        PolytopalMesh::triangulated(nx, ny, domain)?
    };
    Ok(Arc::new(mesh))
}

fn parse_permeability(value: &toml::Value) -> Result<Matrix2<f64>, ConfigError> {
    match value {
        toml::Value::Float(k) => Ok(*k * Matrix2::identity()),
        toml::Value::Integer(k) => Ok(*k as f64 * Matrix2::identity()),
        toml::Value::Array(a) if a.len() == 3 => {
            let get = |i: usize| -> Result<f64, ConfigError> {
                a[i].as_float()
                    .or_else(|| a[i].as_integer().map(|v| v as f64))
                    .ok_or_else(|| ConfigError::Invalid("permeability entries must be numbers".into()))
            };
            let (kxx, kxy, kyy) = (get(0)?, get(1)?, get(2)?);
            Ok(Matrix2::new(kxx, kxy, kxy, kyy))
        }
        _ => Err(ConfigError::Invalid(
            "permeability must be a number or [kxx, kxy, kyy]".into(),
        )),
    }
}

pub fn load_run(path: &Path) -> Result<RunSetup, ConfigError> {
    let file: RunFile = read_toml(path)?;
    let mesh = build_mesh(&file.mesh)?;

    let mut injection = Vec::new();
    let mut production = Vec::new();
    for w in &file.well {
        let well = Well {
            center: Point::new(w.center[0], w.center[1]),
            radius: w.radius,
            rate: w.rate,
        };
        if !(w.rate >= 0.0) {
            return Err(ConfigError::Invalid("well rates must be nonnegative".into()));
        }
        match w.kind.as_str() {
            "injection" => injection.push(well),
            "production" => production.push(well),
            other => {
                return Err(ConfigError::Invalid(format!(
                    "unknown well kind '{other}' (expected 'injection' or 'production')"
                )))
            }
        }
    }

    let base = file.model.initial_concentration;
    let bump = file.model.initial_bump.as_ref().map(|b| {
        (
            Point::new(b.center[0], b.center[1]),
            b.width,
            b.amplitude,
        )
    });
    let initial = FnScalar(move |x: Point| {
        let mut v = base;
        if let Some((c, w, a)) = bump {
            v += a * (-(x - c).norm_squared() / (w * w)).exp();
        }
        v
    });

    let permeability = parse_permeability(&file.model.permeability)?;
    let model = ModelData {
        permeability: vec![permeability; mesh.cell_count()],
        viscosity_ref: file.model.viscosity_ref,
        mobility_ratio: file.model.mobility_ratio,
        porosity: Porosity::constant(&mesh, file.model.porosity)?,
        d_m: file.model.d_m,
        d_l: file.model.d_l,
        d_t: file.model.d_t,
        injection: Arc::new(WellSet(injection)),
        production: Arc::new(WellSet(production)),
        initial_concentration: Arc::new(initial),
        t_end: file.model.t_end,
    };

    if file.time.steps == 0 {
        return Err(ConfigError::Invalid("time.steps must be positive".into()));
    }
    let times = TimeSteps::uniform(file.model.t_end, file.time.steps);

    let (pressure_gd, concentration_gd) = parse_gd_pair(&file.scheme)?;
    let source_mode = match file.scheme.source_mode.as_deref().unwrap_or("average") {
        "average" => SourceMode::IntervalAverage,
        "left" => SourceMode::LeftEndpoint,
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown source_mode '{other}' (expected 'average' or 'left')"
            )))
        }
    };
    let mut config = SchemeConfig {
        pressure_gd,
        concentration_gd,
        source_mode,
        ..SchemeConfig::default()
    };
    if let Some(w) = file.scheme.trapezoid_weight {
        config.trapezoid_weight = w;
    }
    if let Some(d) = file.scheme.ellam_quad_degree {
        config.ellam_quad_degree = d;
    }
    if let Some(s) = file.scheme.ellam_subdivisions {
        config.ellam_subdivisions = s;
    }
    config.solver = parse_solver(&file.solver)?;

    // Output directory: env override wins.
    let output_dir = std::env::var_os("ELLAM_OUTPUT_DIR")
        .map(PathBuf::from)
        .or(file.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from("out"));

    Ok(RunSetup {
        mesh,
        model,
        times,
        config,
        output_dir,
        vtk: file.output.vtk,
        vtk_every: file.output.vtk_every.unwrap_or(1).max(1),
    })
}

fn parse_solver(section: &SolverSection) -> Result<SolverConfig, ConfigError> {
    let mut solver = SolverConfig::default();
    if let Some(tol) = section.tolerance {
        if !(tol > 0.0 && tol < 1.0) {
            return Err(ConfigError::Invalid("solver tolerance must lie in (0, 1)".into()));
        }
        solver.tol = tol;
    }
    if let Some(iters) = section.max_iterations {
        if iters == 0 {
            return Err(ConfigError::Invalid("max_iterations must be positive".into()));
        }
        solver.max_iters = iters;
    }
    match section.preconditioner.as_deref() {
        None | Some("diagonal") => {}
        Some("none") => solver.preconditioner = Preconditioner::None,
        Some(other) => {
            return Err(ConfigError::Invalid(format!(
                "unknown preconditioner '{other}' (expected 'diagonal' or 'none')"
            )))
        }
    }
    Ok(solver)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyFile {
    pub levels: Vec<usize>,
    pub scenario: String,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub steps: Option<usize>,
    pub t_end: Option<f64>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub output: OutputSection,
}

pub fn load_study(path: &Path) -> Result<(StudySpec, PathBuf), ConfigError> {
    let file: StudyFile = read_toml(path)?;
    let scenario = match file.scenario.as_str() {
        "elliptic-manufactured" => Scenario::EllipticManufactured,
        "pure-transport" => Scenario::PureTransport,
        "coupled-wells" => Scenario::CoupledWells,
        other => {
            return Err(ConfigError::Invalid(format!(
                "unknown scenario '{other}'"
            )))
        }
    };
    let (pressure_gd, concentration_gd) = parse_gd_pair(&file.scheme)?;
    let mut config = SchemeConfig {
        pressure_gd,
        concentration_gd,
        ..SchemeConfig::default()
    };
    config.solver = parse_solver(&file.solver)?;
    let spec = StudySpec {
        levels: file.levels,
        scenario,
        pressure_gd,
        concentration_gd,
        steps: file.steps.unwrap_or(32),
        t_end: file.t_end.unwrap_or(0.5),
        seed: file.seed.unwrap_or(7),
        config,
    };
    let output_dir = std::env::var_os("ELLAM_OUTPUT_DIR")
        .map(PathBuf::from)
        .or(file.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok((spec, output_dir))
}

/// Parse the `darcy2d` field file of the `trace` subcommand: per-face
/// fluxes (oriented outward from the first incident cell) plus optional
/// per-cell porosities.
pub fn load_field(
    path: &Path,
    mesh: &Arc<PolytopalMesh>,
) -> Result<(gdellam::darcy::DarcyField, Porosity), ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "darcy2d" => {}
        _ => {
            return Err(ConfigError::Invalid(
                "field file must start with 'darcy2d'".into(),
            ))
        }
    }
    let mut face_flux = vec![0.0; mesh.face_count()];
    let mut phi = vec![1.0; mesh.cell_count()];
    for (no, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let parse_err = |what: &str| ConfigError::Invalid(format!("line {}: {what}", no + 1));
        match tok.next() {
            Some("f") => {
                let id: usize = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err("invalid face id"))?;
                let v: f64 = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err("invalid flux value"))?;
                if id >= mesh.face_count() {
                    return Err(parse_err("face id out of range"));
                }
                face_flux[id] = v;
            }
            Some("phi") => {
                let id: usize = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err("invalid cell id"))?;
                let v: f64 = tok
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| parse_err("invalid porosity value"))?;
                if id >= mesh.cell_count() {
                    return Err(parse_err("cell id out of range"));
                }
                phi[id] = v;
            }
            Some(other) => {
                return Err(parse_err(&format!("unknown record '{other}'")));
            }
            None => unreachable!(),
        }
    }
    let per_cell: Vec<Vec<f64>> = (0..mesh.cell_count())
        .map(|k| {
            mesh.cell(k)
                .faces
                .iter()
                .map(|&f| {
                    if mesh.face(f).cells.0 == k {
                        face_flux[f]
                    } else {
                        -face_flux[f]
                    }
                })
                .collect()
        })
        .collect();
    let field = gdellam::darcy::DarcyField::reconstruct_unchecked(
        mesh.clone(),
        &gdellam::hmm::FluxSet::new(per_cell),
    );
    let porosity = Porosity::per_cell(phi)?;
    Ok((field, porosity))
}
