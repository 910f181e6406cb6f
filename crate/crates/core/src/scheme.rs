//! The coupled pressure/concentration time loop.
//!
//! Each step solves the pressure gradient scheme with the tensor
//! `K / mu(Pi_C c^{(n)})` frozen per cell, extracts an H(div) Darcy
//! velocity for the characteristics (flux reconstruction on the diamond
//! sub-mesh for the hybrid discretisation, the native RT0 field for the
//! mixed one), and advances the concentration with an ELLAM step: test
//! functions are transported along the flow of `u/phi`, realised by
//! tracing the quadrature nodes forward over the step, and the source
//! terms are integrated in time with a weighted trapezoid rule.
//!
//! Concentrations are clamped to [0, 1] only inside the viscosity law;
//! the transported unknowns themselves are never clamped.

use std::sync::Arc;

use nalgebra::Matrix2;
use thiserror::Error;

use crate::darcy::{DarcyError, DarcyField};
use crate::fe::{FeError, P1Gd, Rt0MixedGd};
use crate::flow::{FlowConfig, Porosity, TraceError, Tracer};
use crate::gdm::{self, DofVector, GdmError, GradientDiscretisation, ScalarField};
use crate::geom::{Point, Vec2};
use crate::hmm::{self, FluxSet, HmmError, HmmGd};
use crate::linalg::{self, LinalgError, SolverConfig, SparseMatrix};
use crate::mesh::{MeshError, PolytopalMesh};
use crate::quadrature::{subdivide, TriRule};

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{failed} of {attempted} characteristic traces failed (allowed fraction {allowed})")]
    TraceFailures {
        failed: usize,
        attempted: usize,
        allowed: f64,
    },
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Fe(#[from] FeError),
    #[error(transparent)]
    Darcy(#[from] DarcyError),
    #[error(transparent)]
    Flow(#[from] TraceError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Gdm(#[from] GdmError),
}

/// A bounded space-time scalar field (sources).
pub trait SpaceTimeScalar: Send + Sync {
    fn value(&self, x: Point, t: f64) -> f64;
    /// Sup bound over the space-time cylinder.
    fn bound(&self) -> f64;
}

pub struct ZeroSource;

impl SpaceTimeScalar for ZeroSource {
    fn value(&self, _x: Point, _t: f64) -> f64 {
        0.0
    }
    fn bound(&self) -> f64 {
        0.0
    }
}

/// `int_0^1 exp(-1/(1 - s^2)) s ds`, the radial moment of the mollifier.
fn bump_radial_moment() -> f64 {
    // Composite Simpson; the integrand is smooth and flat at s = 1.
    let n = 4096;
    let h = 1.0 / n as f64;
    let f = |s: f64| {
        if s >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - s * s)).exp() * s
        }
    };
    let mut sum = f(0.0) + f(1.0);
    for i in 1..n {
        let s = i as f64 * h;
        sum += f(s) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    sum * h / 3.0
}

/// A mollified well: a smooth bump of compact support `radius` around
/// `center`, normalised so its integral over the plane equals `rate`.
#[derive(Clone, Copy, Debug)]
pub struct Well {
    pub center: Point,
    pub radius: f64,
    pub rate: f64,
}

impl Well {
    fn normalisation(&self) -> f64 {
        2.0 * std::f64::consts::PI * bump_radial_moment() * self.radius * self.radius
    }

    pub fn value(&self, x: Point) -> f64 {
        let s2 = (x - self.center).norm_squared() / (self.radius * self.radius);
        if s2 >= 1.0 {
            0.0
        } else {
            self.rate * (-1.0 / (1.0 - s2)).exp() / self.normalisation()
        }
    }

    pub fn peak(&self) -> f64 {
        self.rate * (-1.0f64).exp() / self.normalisation()
    }
}

/// A time-constant set of wells acting as a space-time source.
#[derive(Clone, Debug, Default)]
pub struct WellSet(pub Vec<Well>);

impl SpaceTimeScalar for WellSet {
    fn value(&self, x: Point, _t: f64) -> f64 {
        self.0.iter().map(|w| w.value(x)).sum()
    }
    fn bound(&self) -> f64 {
        self.0.iter().map(Well::peak).sum()
    }
}

/// Viscosity of the mixture: `mu(c) = mu0 [(1 - c) + M^{1/4} c]^{-4}`,
/// with the concentration clamped to [0, 1] before evaluation.
pub fn viscosity(c: f64, mu0: f64, mobility_ratio: f64) -> f64 {
    let c = c.clamp(0.0, 1.0);
    let base = (1.0 - c) + mobility_ratio.powf(0.25) * c;
    mu0 * base.powi(-4)
}

/// Diffusion-dispersion tensor
/// `D = phi [d_m I + d_l |u| E(u) + d_t |u| (I - E(u))]` with `E(u)` the
/// projector along `u`; `u = 0` degenerates to `phi d_m I`.
pub fn dispersion_tensor(phi: f64, u: Vec2, d_m: f64, d_l: f64, d_t: f64) -> Matrix2<f64> {
    let speed = u.norm();
    if speed == 0.0 {
        return phi * d_m * Matrix2::identity();
    }
    let e = u * u.transpose() / (speed * speed);
    let i = Matrix2::identity();
    phi * (d_m * i + d_l * speed * e + d_t * speed * (i - e))
}

/// Time treatment of the source terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceMode {
    /// `q_n = (1/dt) int_{t_n}^{t_{n+1}} q dt` (4-point Gauss in time);
    /// `q_N` falls back to `q_{N-1}` since there is no interval past `T`.
    IntervalAverage,
    /// `q_n = q(t_n)`.
    LeftEndpoint,
}

/// The per-step source `q_n` as a spatial function.
pub struct SourceSlice<'a> {
    q: &'a dyn SpaceTimeScalar,
    mode: SourceMode,
    t0: f64,
    t1: f64,
}

impl SourceSlice<'_> {
    pub fn value(&self, x: Point) -> f64 {
        match self.mode {
            SourceMode::LeftEndpoint => self.q.value(x, self.t0),
            SourceMode::IntervalAverage => {
                const NODES: [f64; 4] = [
                    -0.8611363115940526,
                    -0.3399810435848563,
                    0.3399810435848563,
                    0.8611363115940526,
                ];
                const WEIGHTS: [f64; 4] = [
                    0.3478548451374538,
                    0.6521451548625461,
                    0.6521451548625461,
                    0.3478548451374538,
                ];
                let mid = 0.5 * (self.t0 + self.t1);
                let half = 0.5 * (self.t1 - self.t0);
                let mut s = 0.0;
                for (n, w) in NODES.iter().zip(WEIGHTS.iter()) {
                    s += w * self.q.value(x, mid + half * n);
                }
                s * 0.5
            }
        }
    }
}

/// The source slice `q_n` for step index `n` in `0..=N`.
pub fn source_average<'a>(
    q: &'a dyn SpaceTimeScalar,
    times: &crate::gdm::TimeSteps,
    n: usize,
    mode: SourceMode,
) -> SourceSlice<'a> {
    let steps = times.step_count();
    match mode {
        SourceMode::LeftEndpoint => SourceSlice {
            q,
            mode,
            t0: times.time(n),
            t1: times.time(n),
        },
        SourceMode::IntervalAverage => {
            let n = n.min(steps - 1);
            SourceSlice {
                q,
                mode,
                t0: times.time(n),
                t1: times.time(n + 1),
            }
        }
    }
}

/// Model coefficients of the coupled problem.
pub struct ModelData {
    /// Permeability per cell (SPD).
    pub permeability: Vec<Matrix2<f64>>,
    /// `mu(0)`.
    pub viscosity_ref: f64,
    /// Mobility ratio `M = mu(0)/mu(1)`.
    pub mobility_ratio: f64,
    pub porosity: Porosity,
    pub d_m: f64,
    pub d_l: f64,
    pub d_t: f64,
    pub injection: Arc<dyn SpaceTimeScalar>,
    pub production: Arc<dyn SpaceTimeScalar>,
    pub initial_concentration: Arc<dyn ScalarField + Send + Sync>,
    pub t_end: f64,
}

/// Derived bounds of the continuous coefficient assumptions.
#[derive(Clone, Copy, Debug)]
pub struct CoefficientBounds {
    pub alpha_a: f64,
    pub lambda_a: f64,
    pub alpha_d: f64,
    pub lambda_d: f64,
    pub phi_min: f64,
    pub phi_max: f64,
    pub m_q_plus: f64,
    pub m_q_minus: f64,
}

impl ModelData {
    /// Unit coefficients with the given sources; a convenient scenario base.
    pub fn isotropic_unit(
        mesh: &PolytopalMesh,
        injection: Arc<dyn SpaceTimeScalar>,
        production: Arc<dyn SpaceTimeScalar>,
        initial_concentration: Arc<dyn ScalarField + Send + Sync>,
        t_end: f64,
    ) -> Result<Self, SchemeError> {
        Ok(Self {
            permeability: vec![Matrix2::identity(); mesh.cell_count()],
            viscosity_ref: 1.0,
            mobility_ratio: 1.0,
            porosity: Porosity::constant(mesh, 1.0)?,
            d_m: 1e-2,
            d_l: 2e-2,
            d_t: 5e-3,
            injection,
            production,
            initial_concentration,
            t_end,
        })
    }

    pub fn validate(&self, mesh: &PolytopalMesh) -> Result<CoefficientBounds, SchemeError> {
        if !(self.viscosity_ref > 0.0) || !(self.mobility_ratio > 0.0) {
            return Err(SchemeError::Config(
                "viscosity and mobility ratio must be positive".into(),
            ));
        }
        if !(self.d_m > 0.0) || !(self.d_l > 0.0) || !(self.d_t > 0.0) {
            return Err(SchemeError::Config(
                "dispersion coefficients must be positive".into(),
            ));
        }
        if self.permeability.len() != mesh.cell_count() {
            return Err(SchemeError::Config(format!(
                "permeability has {} cells, mesh has {}",
                self.permeability.len(),
                mesh.cell_count()
            )));
        }
        if !(self.t_end > 0.0) {
            return Err(SchemeError::Config("final time must be positive".into()));
        }
        let mut k_min = f64::INFINITY;
        let mut k_max = 0.0f64;
        for (k, a) in self.permeability.iter().enumerate() {
            if (a - a.transpose()).norm() > 1e-12 * a.norm() {
                return Err(SchemeError::Config(format!(
                    "permeability of cell {k} is not symmetric"
                )));
            }
            let tr = a.trace();
            let det = a.determinant();
            let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
            let (lo, hi) = (tr / 2.0 - disc, tr / 2.0 + disc);
            if !(lo > 0.0) {
                return Err(SchemeError::Config(format!(
                    "permeability of cell {k} is not positive definite"
                )));
            }
            k_min = k_min.min(lo);
            k_max = k_max.max(hi);
        }
        let (phi_min, phi_max) = self.porosity.bounds();
        // mu(c) ranges between mu(0) and mu(0)/M on the clamped interval.
        let mu_lo = self
            .viscosity_ref
            .min(self.viscosity_ref / self.mobility_ratio);
        let mu_hi = self
            .viscosity_ref
            .max(self.viscosity_ref / self.mobility_ratio);
        Ok(CoefficientBounds {
            alpha_a: k_min / mu_hi,
            lambda_a: k_max / mu_lo,
            alpha_d: phi_min * self.d_m.min(self.d_l).min(self.d_t),
            lambda_d: phi_max * self.d_m.max(self.d_l).max(self.d_t),
            phi_min,
            phi_max,
            m_q_plus: self.injection.bound(),
            m_q_minus: self.production.bound(),
        })
    }

    /// `D(x, u)` with the porosity of the given cell.
    pub fn dispersion(&self, cell: usize, u: Vec2) -> Matrix2<f64> {
        dispersion_tensor(self.porosity.of_cell(cell), u, self.d_m, self.d_l, self.d_t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PressureGdChoice {
    Hmm,
    Rt0Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConcentrationGdChoice {
    Hmm,
    P1,
}

#[derive(Clone, Debug)]
pub struct SchemeConfig {
    /// Weight of the trapezoid rule for the source terms.
    pub trapezoid_weight: f64,
    pub source_mode: SourceMode,
    pub pressure_gd: PressureGdChoice,
    pub concentration_gd: ConcentrationGdChoice,
    /// Quadrature degree of the traced (ELLAM) integrals.
    pub ellam_quad_degree: usize,
    /// Uniform subdivisions of each piece for the traced integrals.
    pub ellam_subdivisions: usize,
    pub solver: SolverConfig,
    pub flow: FlowConfig,
    /// Largest tolerated fraction of failed traces per step.
    pub max_trace_failure_fraction: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            trapezoid_weight: 0.5,
            source_mode: SourceMode::IntervalAverage,
            pressure_gd: PressureGdChoice::Hmm,
            concentration_gd: ConcentrationGdChoice::Hmm,
            ellam_quad_degree: 2,
            ellam_subdivisions: 1,
            solver: SolverConfig::default(),
            flow: FlowConfig::default(),
            max_trace_failure_fraction: 1e-3,
        }
    }
}

impl SchemeConfig {
    fn validate(&self) -> Result<(), SchemeError> {
        if !(0.0..=1.0).contains(&self.trapezoid_weight) {
            return Err(SchemeError::Config(
                "trapezoid weight must lie in [0, 1]".into(),
            ));
        }
        if self.ellam_subdivisions == 0 {
            return Err(SchemeError::Config("subdivisions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step diagnostic record: the discrete quantities of the a-priori
/// estimates plus solver health.
#[derive(Clone, Copy, Debug)]
pub struct StepDiagnostics {
    pub step: usize,
    pub time: f64,
    pub grad_p_l2: f64,
    pub pi_p_l2: f64,
    /// `int Pi_P p` (zero-mean constraint residual).
    pub pressure_mean: f64,
    /// `|U_P|_{L2}` with the per-piece frozen dispersion argument.
    pub u_dispersion_l2: f64,
    /// `|Pi_C c|_{L2}` at the end of the step.
    pub pi_c_l2: f64,
    /// `dt |(1 + |U_P|)^{1/2} grad_C c|^2` of the step.
    pub weighted_grad_c_sq: f64,
    /// `int phi Pi_C c` at the end of the step.
    pub mass: f64,
    /// Max |div u_P| of the tracking field.
    pub max_divergence: f64,
    pub u_track_l2: f64,
    /// Jacobian bound constant of the step,
    /// `(phi^*/phi_*) exp(max|div u_P| dt / phi_*)`.
    pub c1_step: f64,
    /// Relative nullspace component deflected from the pressure rhs
    /// (nonzero values flag incompatible sources).
    pub source_incompatibility: f64,
    pub pressure_iters: usize,
    pub concentration_iters: usize,
    /// Smallest observed CG curvature over both solves (> 0 for SPD).
    pub min_curvature: f64,
    pub traces_attempted: usize,
    pub traces_failed: usize,
    pub traces_flagged: usize,
}

/// Full simulation output.
pub struct RunHistory {
    pub times: crate::gdm::TimeSteps,
    /// `c^{(0)}, ..., c^{(N)}`.
    pub concentrations: Vec<DofVector>,
    /// `p^{(1)}, ..., p^{(N)}`.
    pub pressures: Vec<DofVector>,
    /// Tracking velocities per step.
    pub velocities: Vec<DarcyField>,
    /// Dispersion arguments `U_P = A grad_P p` per step, frozen per
    /// concentration piece (distinct from the tracking velocity).
    pub dispersion_arguments: Vec<Vec<Vec2>>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Mass of the initial interpolant.
    pub initial_mass: f64,
    /// Measured step-ratio bound (the time-step regularity constant).
    pub step_ratio_bound: f64,
}

impl RunHistory {
    /// Largest deviation of the transported mass from the initial mass.
    pub fn mass_drift(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| (d.mass - self.initial_mass).abs())
            .fold(0.0, f64::max)
    }
}

/// One assembled pressure step.
pub struct PressureStep {
    pub pressure: DofVector,
    /// Tracking velocity `u_P` (H(div), zero normal boundary trace).
    pub velocity: DarcyField,
    /// Dispersion argument `U_P = A grad_P p`, frozen per concentration
    /// piece.
    pub dispersion_argument: Vec<Vec2>,
    pub grad_p_l2: f64,
    pub pi_p_l2: f64,
    pub pressure_mean: f64,
    pub iters: usize,
    pub min_curvature: f64,
    /// Relative nullspace component deflected from the rhs; nonzero values
    /// flag incompatible sources.
    pub incompatibility: f64,
}

enum PressureBackend {
    Hmm {
        gd: HmmGd,
        /// Mean functional over the pressure dofs (cell areas).
        mean: Vec<f64>,
    },
    Rt0,
}

enum ConcentrationGd {
    Hmm(HmmGd),
    P1(P1Gd),
}

impl ConcentrationGd {
    fn as_gd(&self) -> &dyn GradientDiscretisation {
        match self {
            ConcentrationGd::Hmm(g) => g,
            ConcentrationGd::P1(g) => g,
        }
    }

    /// A piece of `cell` whose `Pi` basis row is valid at `x`. For the
    /// piecewise-constant reconstruction any piece of the cell works; for
    /// P1 the cell is the piece.
    fn pi_piece_in_cell(&self, cell: usize, _x: Point) -> usize {
        match self {
            ConcentrationGd::Hmm(g) => g.piece_of(cell, 0),
            ConcentrationGd::P1(_) => cell,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TraceStats {
    pub attempted: usize,
    pub failed: usize,
    pub flagged: usize,
}

pub struct ConcentrationStepInfo {
    pub iters: usize,
    pub min_curvature: f64,
    pub weighted_grad_c_sq: f64,
    pub traces: TraceStats,
}

/// The coupled solver: immutable discretisation data plus the time loop.
pub struct CoupledSolver {
    pub mesh: Arc<PolytopalMesh>,
    pub model: ModelData,
    pub config: SchemeConfig,
    pub times: crate::gdm::TimeSteps,
    pub bounds: CoefficientBounds,
    conc: ConcentrationGd,
    conc_matrices: gdm::GdMatrices,
    /// `int phi Pi e_i`, the transported-mass functional.
    mass_functional: Vec<f64>,
    pressure: PressureBackend,
    pressure_matrices: Option<gdm::GdMatrices>,
    ellam_rule: TriRule,
    assembly_rule: TriRule,
}

impl CoupledSolver {
    pub fn new(
        mesh: Arc<PolytopalMesh>,
        model: ModelData,
        times: crate::gdm::TimeSteps,
        config: SchemeConfig,
    ) -> Result<Self, SchemeError> {
        config.validate()?;
        let bounds = model.validate(&mesh)?;
        let conc = match config.concentration_gd {
            ConcentrationGdChoice::Hmm => ConcentrationGd::Hmm(HmmGd::build(mesh.clone())?),
            ConcentrationGdChoice::P1 => ConcentrationGd::P1(P1Gd::build(mesh.clone())?),
        };
        let conc_matrices = gdm::GdMatrices::build(conc.as_gd(), 4);
        let assembly_rule = TriRule::of_degree(4);
        let gd = conc.as_gd();
        let mut mass_functional = vec![0.0; gd.dof_count()];
        let mut row = Vec::new();
        for ip in 0..gd.piece_count() {
            let piece = gd.piece(ip);
            let phi = model.porosity.of_cell(piece.cell);
            for (x, w) in assembly_rule.on(&piece.tri) {
                row.clear();
                gd.pi_basis(ip, x, &mut row);
                for &(i, b) in &row {
                    mass_functional[i] += w * phi * b;
                }
            }
        }
        let (pressure, pressure_matrices) = match config.pressure_gd {
            PressureGdChoice::Hmm => {
                let gd = HmmGd::build(mesh.clone())?;
                let matrices = gdm::GdMatrices::build(&gd, 4);
                let mean = matrices.mean.clone();
                (PressureBackend::Hmm { gd, mean }, Some(matrices))
            }
            PressureGdChoice::Rt0Mixed => (PressureBackend::Rt0, None),
        };
        let ellam_rule = TriRule::of_degree(config.ellam_quad_degree);
        Ok(Self {
            mesh,
            model,
            config,
            times,
            bounds,
            conc,
            conc_matrices,
            mass_functional,
            pressure,
            pressure_matrices,
            ellam_rule,
            assembly_rule,
        })
    }

    pub fn concentration_gd(&self) -> &dyn GradientDiscretisation {
        self.conc.as_gd()
    }

    pub fn concentration_matrices(&self) -> &gdm::GdMatrices {
        &self.conc_matrices
    }

    /// `c^{(0)} = I_C c_ini`.
    pub fn initial_concentration(&self) -> DofVector {
        self.conc
            .as_gd()
            .interpolate_initial(self.model.initial_concentration.as_ref())
    }

    /// `int phi Pi_C c`.
    pub fn mass(&self, c: &DofVector) -> f64 {
        linalg::dot(&self.mass_functional, &c.0)
    }

    /// Concentration value used to freeze coefficients on a cell.
    fn conc_at_cell(&self, c: &DofVector, cell: usize) -> f64 {
        let gd = self.conc.as_gd();
        let x = self.mesh.cell(cell).point;
        let ip = self.conc.pi_piece_in_cell(cell, x);
        gdm::eval_pi_in_piece(gd, c, ip, x)
    }

    /// The frozen pressure tensor `A_K = K_K / mu(Pi_C c^{(n)}(x_K))`.
    fn pressure_tensors(&self, c: &DofVector) -> Vec<Matrix2<f64>> {
        (0..self.mesh.cell_count())
            .map(|k| {
                let s = self.conc_at_cell(c, k);
                self.model.permeability[k]
                    / viscosity(s, self.model.viscosity_ref, self.model.mobility_ratio)
            })
            .collect()
    }

    /// Per-cell integrals `int_K f`.
    fn cell_integrals(&self, f: &dyn Fn(Point) -> f64) -> Vec<f64> {
        (0..self.mesh.cell_count())
            .map(|k| {
                let mut s = 0.0;
                for i in 0..self.mesh.cell(k).faces.len() {
                    s += self.assembly_rule.integrate(&self.mesh.diamond(k, i), f);
                }
                s
            })
            .collect()
    }

    /// Solve the pressure equation of step `n` given `c^{(n)}`.
    pub fn pressure_step(&self, c: &DofVector, n: usize) -> Result<PressureStep, SchemeError> {
        let q_plus = source_average(
            self.model.injection.as_ref(),
            &self.times,
            n,
            self.config.source_mode,
        );
        let q_minus = source_average(
            self.model.production.as_ref(),
            &self.times,
            n,
            self.config.source_mode,
        );
        let source = |x: Point| q_plus.value(x) - q_minus.value(x);
        let tensors = self.pressure_tensors(c);
        let tensor_field = |cell: usize, _x: Point| tensors[cell];

        match &self.pressure {
            PressureBackend::Hmm { gd, mean } => {
                let trip = gd.stiffness_triplets(&tensor_field);
                let a = SparseMatrix::assemble(gd.dof_count(), &trip)?;
                let cell_src = self.cell_integrals(&source);
                let mut b = vec![0.0; gd.dof_count()];
                b[..cell_src.len()].copy_from_slice(&cell_src);
                let solve = linalg::solve_zero_mean(&a, &b, mean, &self.config.solver)?;
                let p = DofVector(solve.x);
                let matrices = self.pressure_matrices.as_ref().unwrap();
                let fluxes = gd.conservative_fluxes(&tensor_field, &p);
                let velocity = DarcyField::reconstruct(self.mesh.clone(), &fluxes, 1e-8)?;
                // Dispersion argument per concentration piece:
                // U_P = A grad_D p on the diamond containing the piece.
                let conc_gd = self.conc.as_gd();
                let mut up = Vec::with_capacity(conc_gd.piece_count());
                for ip in 0..conc_gd.piece_count() {
                    let piece = conc_gd.piece(ip);
                    let x = piece.tri.centroid();
                    let hp = hmm_piece_at(gd, piece.cell, x);
                    let grad = gdm::eval_grad_in_piece(gd, &p, hp, x);
                    up.push(tensor_field(piece.cell, x) * grad);
                }
                Ok(PressureStep {
                    grad_p_l2: matrices.grad_l2(&p)?,
                    pi_p_l2: matrices.pi_l2(&p)?,
                    pressure_mean: matrices.mean_value(&p)?,
                    pressure: p,
                    velocity,
                    dispersion_argument: up,
                    iters: solve.stats.iters,
                    min_curvature: solve.stats.min_curvature,
                    incompatibility: solve.deflected,
                })
            }
            PressureBackend::Rt0 => {
                let inner = SolverConfig {
                    tol: (self.config.solver.tol * 1e-2).max(1e-14),
                    ..self.config.solver
                };
                let rt0 = Rt0MixedGd::build(self.mesh.clone(), &tensor_field, inner)?;
                let rhs = self.cell_integrals(&source);
                let (p, sigma, solve) = rt0.solve_pressure(&rhs, &self.config.solver)?;
                let velocity = rt0.darcy_field(&sigma);
                let conc_gd = self.conc.as_gd();
                let mut up = Vec::with_capacity(conc_gd.piece_count());
                for ip in 0..conc_gd.piece_count() {
                    let piece = conc_gd.piece(ip);
                    up.push(rt0.eval_flux_field(&sigma, piece.cell, piece.tri.centroid()));
                }
                let quad = TriRule::of_degree(2);
                let mut grad_sq = 0.0;
                let mut pi_sq = 0.0;
                let mut mean = 0.0;
                for k in 0..self.mesh.cell_count() {
                    let cell = self.mesh.cell(k);
                    let tri = crate::geom::Triangle::new(
                        self.mesh.vertex(cell.verts[0]),
                        self.mesh.vertex(cell.verts[1]),
                        self.mesh.vertex(cell.verts[2]),
                    );
                    grad_sq +=
                        quad.integrate(&tri, |x| rt0.eval_gradient(&sigma, k, x).norm_squared());
                    pi_sq += cell.area * p[k] * p[k];
                    mean += cell.area * p[k];
                }
                Ok(PressureStep {
                    pressure: DofVector(p),
                    velocity,
                    dispersion_argument: up,
                    grad_p_l2: grad_sq.max(0.0).sqrt(),
                    pi_p_l2: pi_sq.max(0.0).sqrt(),
                    pressure_mean: mean,
                    iters: solve.stats.iters,
                    min_curvature: solve.stats.min_curvature,
                    incompatibility: solve.deflected,
                })
            }
        }
    }

    /// Assemble a traced (ELLAM) linear functional: quadrature nodes are
    /// traced forward by `dt` along `velocity/phi` and the landed `Pi_C`
    /// basis values are accumulated against `factor(cell, x)` evaluated at
    /// the source node. Exact for test vectors with constant `Pi_C`
    /// reconstruction regardless of landing accuracy.
    pub fn ellam_traced_functional(
        &self,
        velocity: &DarcyField,
        dt: f64,
        factor: &dyn Fn(usize, Point) -> f64,
    ) -> Result<(Vec<f64>, TraceStats), SchemeError> {
        let gd = self.conc.as_gd();
        let tracer = Tracer::new(velocity, &self.model.porosity, self.config.flow);
        let mut b = vec![0.0; gd.dof_count()];
        let mut row = Vec::new();
        let mut stats = TraceStats::default();
        for ip in 0..gd.piece_count() {
            let piece = gd.piece(ip);
            let subs = if self.config.ellam_subdivisions > 1 {
                subdivide(&piece.tri, self.config.ellam_subdivisions)
            } else {
                vec![piece.tri]
            };
            for sub in &subs {
                for (x, w) in self.ellam_rule.on(sub) {
                    let f = factor(piece.cell, x);
                    if f == 0.0 {
                        continue;
                    }
                    stats.attempted += 1;
                    let start_tri = match velocity.locate_in_cell(piece.cell, x) {
                        Some(t) => t,
                        None => {
                            stats.failed += 1;
                            continue;
                        }
                    };
                    let trace = match tracer.trace_from(start_tri, x, dt) {
                        Ok(t) => t,
                        Err(_) => {
                            stats.failed += 1;
                            continue;
                        }
                    };
                    if trace.status != crate::flow::TraceStatus::Ok {
                        stats.flagged += 1;
                    }
                    let cell_to = velocity.tri(trace.end_tri).cell;
                    let pi_piece = self.conc.pi_piece_in_cell(cell_to, trace.end);
                    row.clear();
                    gd.pi_basis(pi_piece, trace.end, &mut row);
                    for &(i, basis) in &row {
                        b[i] += w * f * basis;
                    }
                }
            }
        }
        let allowed = self.config.max_trace_failure_fraction;
        if stats.attempted > 0 && (stats.failed as f64) > allowed * stats.attempted as f64 {
            return Err(SchemeError::TraceFailures {
                failed: stats.failed,
                attempted: stats.attempted,
                allowed,
            });
        }
        Ok((b, stats))
    }

    /// The transported mass functional
    /// `b(z) = int phi Pi_C c^{(n)} Pi_C z(F_dt(.))`.
    pub fn ellam_mass_rhs(
        &self,
        velocity: &DarcyField,
        c: &DofVector,
        dt: f64,
    ) -> Result<(Vec<f64>, TraceStats), SchemeError> {
        let gd = self.conc.as_gd();
        let porosity = &self.model.porosity;
        let factor = |cell: usize, x: Point| {
            let ip = self.conc.pi_piece_in_cell(cell, x);
            porosity.of_cell(cell) * gdm::eval_pi_in_piece(gd, c, ip, x)
        };
        self.ellam_traced_functional(velocity, dt, &factor)
    }

    /// Advance the concentration over step `n` given the pressure step.
    pub fn concentration_step(
        &self,
        c: &DofVector,
        pressure: &PressureStep,
        n: usize,
    ) -> Result<(DofVector, ConcentrationStepInfo), SchemeError> {
        let gd = self.conc.as_gd();
        let dt = self.times.delta(n);
        let w = self.config.trapezoid_weight;
        let mode = self.config.source_mode;
        let q_plus_n = source_average(self.model.injection.as_ref(), &self.times, n, mode);
        let q_minus_n = source_average(self.model.production.as_ref(), &self.times, n, mode);
        let q_plus_n1 = source_average(self.model.injection.as_ref(), &self.times, n + 1, mode);
        let q_minus_n1 = source_average(self.model.production.as_ref(), &self.times, n + 1, mode);

        // Left-hand side: mass + dt diffusion + (1-w) dt production mass.
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut row_pi = Vec::new();
        let mut row_grad = Vec::new();
        for ip in 0..gd.piece_count() {
            let piece = gd.piece(ip);
            let phi = self.model.porosity.of_cell(piece.cell);
            let d = self
                .model
                .dispersion(piece.cell, pressure.dispersion_argument[ip]);
            for (x, wq) in self.assembly_rule.on(&piece.tri) {
                row_pi.clear();
                row_grad.clear();
                gd.pi_basis(ip, x, &mut row_pi);
                gd.grad_basis(ip, x, &mut row_grad);
                let reaction = (1.0 - w) * dt * q_minus_n1.value(x);
                for &(i, bi) in &row_pi {
                    for &(j, bj) in &row_pi {
                        triplets.push((i, j, wq * (phi + reaction) * bi * bj));
                    }
                }
                for &(i, gi) in &row_grad {
                    let dgi = d * gi;
                    for &(j, gj) in &row_grad {
                        triplets.push((i, j, wq * dt * dgi.dot(&gj)));
                    }
                }
            }
        }
        let lhs = SparseMatrix::assemble(gd.dof_count(), &triplets)?;

        // Traced right-hand side:
        // [phi Pi c^{(n)} + w dt (q+_n - q-_n Pi c^{(n)})](x) at the source
        // node, against the transported test basis.
        let porosity = &self.model.porosity;
        let factor = |cell: usize, x: Point| {
            let ip = self.conc.pi_piece_in_cell(cell, x);
            let cn = gdm::eval_pi_in_piece(gd, c, ip, x);
            porosity.of_cell(cell) * cn + w * dt * (q_plus_n.value(x) - q_minus_n.value(x) * cn)
        };
        let (mut b, stats) = self.ellam_traced_functional(&pressure.velocity, dt, &factor)?;

        // Untraced part: (1-w) dt int q+_{n+1} Pi z.
        for ip in 0..gd.piece_count() {
            let piece = gd.piece(ip);
            for (x, wq) in self.assembly_rule.on(&piece.tri) {
                let q = q_plus_n1.value(x);
                if q == 0.0 {
                    continue;
                }
                row_pi.clear();
                gd.pi_basis(ip, x, &mut row_pi);
                for &(i, bi) in &row_pi {
                    b[i] += wq * (1.0 - w) * dt * q * bi;
                }
            }
        }

        let (c_next, solve_stats) = linalg::solve_spd(&lhs, &b, &self.config.solver)?;
        let c_next = DofVector(c_next);

        // Energy monitor of the step (gradients are constant per piece).
        let mut weighted_grad_sq = 0.0;
        for ip in 0..gd.piece_count() {
            let piece = gd.piece(ip);
            let g = gdm::eval_grad_in_piece(gd, &c_next, ip, piece.tri.centroid());
            let u = pressure.dispersion_argument[ip].norm();
            weighted_grad_sq += piece.tri.area() * (1.0 + u) * g.norm_squared();
        }
        Ok((
            c_next,
            ConcentrationStepInfo {
                iters: solve_stats.iters,
                min_curvature: solve_stats.min_curvature,
                weighted_grad_c_sq: dt * weighted_grad_sq,
                traces: stats,
            },
        ))
    }

    /// Run the full loop.
    pub fn run(&self) -> Result<RunHistory, SchemeError> {
        let n_steps = self.times.step_count();
        let mut concentrations = Vec::with_capacity(n_steps + 1);
        let mut pressures = Vec::with_capacity(n_steps);
        let mut velocities = Vec::with_capacity(n_steps);
        let mut dispersion_arguments = Vec::with_capacity(n_steps);
        let mut diagnostics = Vec::with_capacity(n_steps);
        let c0 = self.initial_concentration();
        let initial_mass = self.mass(&c0);
        concentrations.push(c0);
        for n in 0..n_steps {
            let c_n = concentrations.last().unwrap();
            let ps = self.pressure_step(c_n, n)?;
            let (c_next, info) = self.concentration_step(c_n, &ps, n)?;
            let gd = self.conc.as_gd();
            let up_l2 = (0..gd.piece_count())
                .map(|ip| gd.piece(ip).tri.area() * ps.dispersion_argument[ip].norm_squared())
                .sum::<f64>()
                .max(0.0)
                .sqrt();
            let (phi_min, phi_max) = self.model.porosity.bounds();
            let c1_step = (phi_max / phi_min)
                * (ps.velocity.max_divergence() * self.times.delta(n) / phi_min).exp();
            diagnostics.push(StepDiagnostics {
                step: n,
                time: self.times.time(n + 1),
                grad_p_l2: ps.grad_p_l2,
                pi_p_l2: ps.pi_p_l2,
                pressure_mean: ps.pressure_mean,
                u_dispersion_l2: up_l2,
                pi_c_l2: self.conc_matrices.pi_l2(&c_next)?,
                weighted_grad_c_sq: info.weighted_grad_c_sq,
                mass: self.mass(&c_next),
                max_divergence: ps.velocity.max_divergence(),
                u_track_l2: ps.velocity.l2_norm(),
                c1_step,
                source_incompatibility: ps.incompatibility,
                pressure_iters: ps.iters,
                concentration_iters: info.iters,
                min_curvature: ps.min_curvature.min(info.min_curvature),
                traces_attempted: info.traces.attempted,
                traces_failed: info.traces.failed,
                traces_flagged: info.traces.flagged,
            });
            pressures.push(ps.pressure);
            velocities.push(ps.velocity);
            dispersion_arguments.push(ps.dispersion_argument);
            concentrations.push(c_next);
        }
        Ok(RunHistory {
            times: self.times.clone(),
            concentrations,
            pressures,
            velocities,
            dispersion_arguments,
            diagnostics,
            initial_mass,
            step_ratio_bound: self.times.step_ratio_bound(),
        })
    }

    /// Residuals of the finite-volume relations for a solved HMM pressure;
    /// `None` for the mixed backend.
    pub fn hmm_fv_residuals(
        &self,
        c: &DofVector,
        p: &DofVector,
        n: usize,
    ) -> Option<(hmm::FvResiduals, FluxSet)> {
        match &self.pressure {
            PressureBackend::Hmm { gd, .. } => {
                let mode = self.config.source_mode;
                let q_plus = source_average(self.model.injection.as_ref(), &self.times, n, mode);
                let q_minus =
                    source_average(self.model.production.as_ref(), &self.times, n, mode);
                let tensors = self.pressure_tensors(c);
                let tensor_field = |cell: usize, _x: Point| tensors[cell];
                let fluxes = gd.conservative_fluxes(&tensor_field, p);
                let sources = self.cell_integrals(&|x| q_plus.value(x) - q_minus.value(x));
                let res = hmm::check_fv_relations(&self.mesh, &fluxes, &sources);
                Some((res, fluxes))
            }
            PressureBackend::Rt0 => None,
        }
    }

    /// The pressure energy identity residual
    /// `|int A grad p . grad p - int (q+ - q-) Pi p|` for a solved step
    /// (a step of the discrete a-priori estimate).
    pub fn pressure_energy_residual(
        &self,
        c: &DofVector,
        p: &DofVector,
        n: usize,
    ) -> Option<f64> {
        match &self.pressure {
            PressureBackend::Hmm { gd, .. } => {
                let mode = self.config.source_mode;
                let q_plus = source_average(self.model.injection.as_ref(), &self.times, n, mode);
                let q_minus =
                    source_average(self.model.production.as_ref(), &self.times, n, mode);
                let tensors = self.pressure_tensors(c);
                let tensor_field = |cell: usize, _x: Point| tensors[cell];
                let trip = gd.stiffness_triplets(&tensor_field);
                let a = SparseMatrix::assemble(gd.dof_count(), &trip).ok()?;
                let lhs = linalg::dot(&a.apply_vec(&p.0), &p.0);
                let src = self.cell_integrals(&|x| q_plus.value(x) - q_minus.value(x));
                let rhs: f64 = (0..self.mesh.cell_count()).map(|k| src[k] * p.0[k]).sum();
                Some((lhs - rhs).abs())
            }
            PressureBackend::Rt0 => None,
        }
    }
}

/// Locate the HMM piece (diamond) of a cell containing a point.
fn hmm_piece_at(gd: &HmmGd, cell: usize, x: Point) -> usize {
    let mesh = gd.mesh();
    let nf = mesh.cell(cell).faces.len();
    for i in 0..nf {
        if mesh.diamond(cell, i).contains(x, 1e-12) {
            return gd.piece_of(cell, i);
        }
    }
    (0..nf)
        .min_by(|&a, &b| {
            let da = (mesh.diamond(cell, a).centroid() - x).norm();
            let db = (mesh.diamond(cell, b).centroid() - x).norm();
            da.partial_cmp(&db).unwrap()
        })
        .map(|i| gd.piece_of(cell, i))
        .unwrap()
}


#[cfg(test)]
mod coupling_tests {
    use super::*;
    use crate::gdm::FnScalar;
    use crate::mesh::Rect;

    fn zero_model_tri(mesh: &Arc<PolytopalMesh>) -> ModelData {
        ModelData::isotropic_unit(
            mesh,
            Arc::new(ZeroSource),
            Arc::new(ZeroSource),
            Arc::new(FnScalar(|_| 0.0)),
            0.25,
        )
        .unwrap()
    }

    #[test]
    fn gd_pair_swap_preserves_zero_solution() {
        // On a triangulation both pairs run; the zero-source, zero-initial
        // trajectory stays identically zero under either.
        let mesh = Arc::new(PolytopalMesh::triangulated(4, 4, Rect::UNIT).unwrap());
        let times = crate::gdm::TimeSteps::uniform(0.25, 3);
        for (p, c) in [
            (PressureGdChoice::Hmm, ConcentrationGdChoice::Hmm),
            (PressureGdChoice::Rt0Mixed, ConcentrationGdChoice::P1),
            (PressureGdChoice::Hmm, ConcentrationGdChoice::P1),
            (PressureGdChoice::Rt0Mixed, ConcentrationGdChoice::Hmm),
        ] {
            let config = SchemeConfig {
                pressure_gd: p,
                concentration_gd: c,
                ..SchemeConfig::default()
            };
            let solver =
                CoupledSolver::new(mesh.clone(), zero_model_tri(&mesh), times.clone(), config)
                    .unwrap();
            let history = solver.run().unwrap();
            for p in &history.pressures {
                assert!(p.0.iter().all(|v| v.abs() < 1e-10), "pair ({p:?})");
            }
            for conc in &history.concentrations {
                assert!(conc.0.iter().all(|v| v.abs() < 1e-10));
            }
        }
    }

    #[test]
    fn nonuniform_time_steps_preserve_constants_and_record_ratio() {
        let mesh = Arc::new(PolytopalMesh::cartesian(3, 3, Rect::UNIT).unwrap());
        let model = ModelData::isotropic_unit(
            &mesh,
            Arc::new(ZeroSource),
            Arc::new(ZeroSource),
            Arc::new(FnScalar(|_| 0.4)),
            0.35,
        )
        .unwrap();
        let times =
            crate::gdm::TimeSteps::new(vec![0.0, 0.05, 0.15, 0.35]).expect("increasing");
        let solver =
            CoupledSolver::new(mesh.clone(), model, times, SchemeConfig::default()).unwrap();
        let history = solver.run().unwrap();
        assert!((history.step_ratio_bound - 2.0).abs() < 1e-12);
        let gd = solver.concentration_gd();
        for c in &history.concentrations {
            let v = gdm::eval_pi(gd, c, Point::new(0.51, 0.49)).unwrap();
            assert!((v - 0.4).abs() < 1e-9);
        }
        assert!(history.mass_drift() < 1e-10);
    }

    #[test]
    fn rt0_p1_coupled_wells_smoke() {
        // The conforming concentration GD with either pressure backend on
        // a triangulation: a short quarter-five-spot run stays SPD, keeps
        // the zero-mean pressure, and produces an H(div) tracking velocity.
        let mesh = Arc::new(PolytopalMesh::triangulated(8, 8, Rect::UNIT).unwrap());
        let times = crate::gdm::TimeSteps::uniform(0.25, 6);
        for pressure_gd in [PressureGdChoice::Rt0Mixed, PressureGdChoice::Hmm] {
            let config = SchemeConfig {
                pressure_gd,
                concentration_gd: ConcentrationGdChoice::P1,
                ..SchemeConfig::default()
            };
            let injection = WellSet(vec![Well {
                center: Point::new(0.1, 0.1),
                radius: 0.08,
                rate: 1.0,
            }]);
            let production = WellSet(vec![Well {
                center: Point::new(0.9, 0.9),
                radius: 0.08,
                rate: 1.0,
            }]);
            let mut model = ModelData::isotropic_unit(
                &mesh,
                Arc::new(injection),
                Arc::new(production),
                Arc::new(FnScalar(|_| 0.0)),
                0.25,
            )
            .unwrap();
            model.mobility_ratio = 2.0;
            let solver =
                CoupledSolver::new(mesh.clone(), model, times.clone(), config).unwrap();
            let history = solver.run().unwrap();
            let m_div = solver.bounds.m_q_plus + solver.bounds.m_q_minus;
            for d in &history.diagnostics {
                assert!(d.min_curvature > 0.0, "step {}", d.step);
                assert!(d.pressure_mean.abs() < 1e-9);
                assert!(d.pi_c_l2.is_finite());
                assert!(d.max_divergence <= m_div + 1e-9);
                assert_eq!(d.traces_failed, 0);
            }
            let expected_provenance = match pressure_gd {
                PressureGdChoice::Rt0Mixed => crate::darcy::Provenance::ConformingRt0,
                PressureGdChoice::Hmm => crate::darcy::Provenance::ReconstructedFromFluxes,
            };
            for u in &history.velocities {
                let diag = u.validate();
                assert_eq!(u.provenance(), expected_provenance);
                assert!(diag.normal_jump <= 1e-11 * diag.flux_scale.max(1.0));
                assert!(diag.boundary_trace <= 1e-12 * diag.flux_scale.max(1.0));
            }
            // The injected solvent accumulates near the injector.
            let last = history.concentrations.last().unwrap();
            let near =
                gdm::eval_pi(solver.concentration_gd(), last, Point::new(0.1, 0.1)).unwrap();
            let far =
                gdm::eval_pi(solver.concentration_gd(), last, Point::new(0.9, 0.9)).unwrap();
            assert!(near > 0.05, "near {near}");
            assert!(near > far);
        }
    }

    #[test]
    fn ellam_mass_rhs_matches_overlap_oracle() {
        // Constant velocity, constant porosity, c the indicator of one
        // interior cell: b(z_L) = phi |C0 inter (L - delta e1)| with
        // delta = u dt / phi, an analytic overlap of axis-aligned squares.
        // The traced quadrature converges to it as the pieces are
        // subdivided (the integrand is a translated indicator).
        let n = 8usize;
        let h = 1.0 / n as f64;
        let mesh = Arc::new(PolytopalMesh::cartesian(n, n, Rect::UNIT).unwrap());
        let phi0 = 2.0;
        let u = 0.8;
        let dt = 0.1;
        let delta = u * dt / phi0; // 0.04 < h = 0.125
        let times = crate::gdm::TimeSteps::uniform(0.25, 2);
        let source_cell = n * (n / 2) + n / 2; // interior
        let target_right = source_cell + 1;
        let field = DarcyField::constant(mesh.clone(), Vec2::new(u, 0.0));
        let mut errors = Vec::new();
        for subdivisions in [2usize, 4, 8] {
            let config = SchemeConfig {
                ellam_subdivisions: subdivisions,
                ..SchemeConfig::default()
            };
            let mut model = zero_model_tri(&mesh);
            model.porosity = Porosity::constant(&mesh, phi0).unwrap();
            let solver =
                CoupledSolver::new(mesh.clone(), model, times.clone(), config).unwrap();
            let gd = solver.concentration_gd();
            let mut c = DofVector::zeros(gd.dof_count());
            c.0[source_cell] = 1.0;
            let (b, _) = solver.ellam_mass_rhs(&field, &c, dt).unwrap();
            // Overlap areas: the source cell shifted right by delta leaves
            // h - delta of its width at home and delta in the neighbour.
            let exact_home = phi0 * (h - delta) * h;
            let exact_right = phi0 * delta * h;
            let err = (b[source_cell] - exact_home)
                .abs()
                .max((b[target_right] - exact_right).abs());
            errors.push(err);
        }
        assert!(
            errors[2] < errors[0],
            "traced overlap error does not decrease: {errors:?}"
        );
        let scale = phi0 * h * h;
        assert!(
            errors[2] <= 0.02 * scale,
            "finest traced overlap error {:.3e} above 2% of the cell mass {:.3e}",
            errors[2],
            scale
        );
    }
}
