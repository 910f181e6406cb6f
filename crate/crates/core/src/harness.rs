//! Verification harness: convergence studies, invariant suites, lemma
//! verification campaigns and report emission.
//!
//! Everything here is deterministic given the seed in the study
//! specification; Monte-Carlo sampling uses a counter-seeded ChaCha
//! generator so reports reproduce byte for byte.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;


use crate::fe::P1Gd;
use crate::flow::{self, TraceStatus, Tracer};
use crate::gdm::{
    self, DofVector, FnH1, FnHdiv, FnScalar, GdMatrices, GradientDiscretisation, TimeSteps,
};
use crate::geom::Point;
use crate::hmm::HmmGd;
use crate::linalg::{self, SolverConfig};
use crate::mesh::{PolytopalMesh, Rect};
use crate::quadrature::TriRule;
use crate::scheme::{
    ConcentrationGdChoice, CoupledSolver, ModelData, PressureGdChoice, SchemeConfig, SchemeError,
    Well, WellSet, ZeroSource,
};
use crate::Vec2;

pub mod export;

/// Scenarios of the studies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    /// Standalone pressure solve against a manufactured solution.
    EllipticManufactured,
    /// Zero sources, nonuniform initial hump: transport/diffusion only.
    PureTransport,
    /// Quarter-five-spot analogue: injection and production bumps in
    /// opposite corners.
    CoupledWells,
}

/// A convergence or invariant study specification.
#[derive(Clone, Debug)]
pub struct StudySpec {
    pub levels: Vec<usize>,
    pub scenario: Scenario,
    pub pressure_gd: PressureGdChoice,
    pub concentration_gd: ConcentrationGdChoice,
    pub steps: usize,
    pub t_end: f64,
    pub seed: u64,
    pub config: SchemeConfig,
}

impl StudySpec {
    pub fn coupled_default(levels: Vec<usize>) -> Self {
        Self {
            levels,
            scenario: Scenario::CoupledWells,
            pressure_gd: PressureGdChoice::Hmm,
            concentration_gd: ConcentrationGdChoice::Hmm,
            steps: 32,
            t_end: 0.5,
            seed: 7,
            config: SchemeConfig::default(),
        }
    }

    fn validate(&self) -> Result<(), SchemeError> {
        if self.scenario != Scenario::EllipticManufactured && self.levels.len() < 2 {
            return Err(SchemeError::Config(
                "convergence studies need at least two refinement levels".into(),
            ));
        }
        if self.levels.is_empty() {
            return Err(SchemeError::Config("at least one level required".into()));
        }
        Ok(())
    }
}

/// One row of a convergence table.
#[derive(Clone, Debug)]
pub struct LevelRow {
    pub level: usize,
    pub h: f64,
    /// Named values (errors or inter-level differences).
    pub values: Vec<(&'static str, f64)>,
}

/// Convergence report: per-level table plus observed orders between
/// consecutive levels of the same family.
#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub scenario: Scenario,
    pub rows: Vec<LevelRow>,
    /// `(name, log2 ratios between consecutive rows)`.
    pub orders: Vec<(&'static str, Vec<f64>)>,
}

impl ConvergenceReport {
    fn compute_orders(rows: &[LevelRow]) -> Vec<(&'static str, Vec<f64>)> {
        if rows.len() < 2 {
            return Vec::new();
        }
        let names: Vec<&'static str> = rows[0].values.iter().map(|(n, _)| *n).collect();
        names
            .iter()
            .map(|name| {
                let series: Vec<f64> = rows
                    .iter()
                    .map(|r| r.values.iter().find(|(n, _)| n == name).unwrap().1)
                    .collect();
                let orders = series
                    .windows(2)
                    .map(|w| {
                        if w[0] > 0.0 && w[1] > 0.0 {
                            (w[0] / w[1]).log2()
                        } else {
                            f64::INFINITY
                        }
                    })
                    .collect();
                (*name, orders)
            })
            .collect()
    }

    pub fn value_series(&self, name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.values.iter().find(|(n, _)| *n == name).unwrap().1)
            .collect()
    }
}

/// One entry of the invariant ledger.
#[derive(Clone, Debug)]
pub struct LedgerEntry {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub details: String,
}

/// Pass/fail ledger plus measured constants.
#[derive(Clone, Debug, Default)]
pub struct InvariantLedger {
    pub entries: Vec<LedgerEntry>,
    pub constants: Vec<(&'static str, f64)>,
}

impl InvariantLedger {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    fn check(&mut self, name: &'static str, measured: f64, tolerance: f64, details: String) {
        self.entries.push(LedgerEntry {
            name,
            passed: measured <= tolerance,
            measured,
            tolerance,
            details,
        });
    }

    pub fn entry(&self, name: &str) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// The manufactured pressure solution `cos(pi x) cos(pi y)` with its
/// gradient and matching zero-mean source `-div grad p = 2 pi^2 p`.
pub mod manufactured {
    use super::*;
    use std::f64::consts::PI;

    pub fn pressure(p: Point) -> f64 {
        (PI * p.x).cos() * (PI * p.y).cos()
    }

    pub fn gradient(p: Point) -> Vec2 {
        Vec2::new(
            -PI * (PI * p.x).sin() * (PI * p.y).cos(),
            -PI * (PI * p.x).cos() * (PI * p.y).sin(),
        )
    }

    pub fn source(p: Point) -> f64 {
        2.0 * PI * PI * pressure(p)
    }
}

/// Solve the standalone pressure gradient scheme with unit tensor:
/// `int grad v . grad z = int q Pi z`, zero mean. The stiffness is the
/// gradient Gram matrix.
pub fn elliptic_solve(
    gd: &dyn GradientDiscretisation,
    matrices: &GdMatrices,
    q: &dyn Fn(Point) -> f64,
    solver: &SolverConfig,
) -> Result<DofVector, SchemeError> {
    let n = gd.dof_count();
    let mut b = vec![0.0; n];
    let mut row = Vec::new();
    for ip in 0..gd.piece_count() {
        let tri = gd.piece(ip).tri;
        for (x, w) in matrices.quad.on(&tri) {
            row.clear();
            gd.pi_basis(ip, x, &mut row);
            let v = q(x);
            for &(i, bi) in &row {
                b[i] += w * v * bi;
            }
        }
    }
    let solve = linalg::solve_zero_mean(&matrices.gram_grad, &b, &matrices.mean, solver)?;
    Ok(DofVector(solve.x))
}

/// Discrete errors against a manufactured solution: the reconstruction
/// error is measured against the smooth interpolant (mean-aligned) and the
/// gradient error directly against the exact gradient.
pub fn manufactured_errors(
    gd: &dyn GradientDiscretisation,
    matrices: &GdMatrices,
    p: &DofVector,
    exact: &dyn Fn(Point) -> f64,
    exact_grad: &dyn Fn(Point) -> Vec2,
) -> (f64, f64) {
    let interp = gd.interpolate_smooth(&FnScalar(exact));
    let diff = p.axpy(-1.0, &interp);
    // Mean-aligned Pi error: |Pi d|^2 - (int Pi d)^2 / |Omega|.
    let area: f64 = (0..gd.piece_count()).map(|ip| gd.piece(ip).tri.area()).sum();
    let pi = matrices.pi_l2(&diff).unwrap();
    let mean = matrices.mean_value(&diff).unwrap();
    let err_pi = (pi * pi - mean * mean / area).max(0.0).sqrt();
    let mut err_grad_sq = 0.0;
    for ip in 0..gd.piece_count() {
        let tri = gd.piece(ip).tri;
        for (x, w) in matrices.quad.on(&tri) {
            let g = gdm::eval_grad_in_piece(gd, p, ip, x) - exact_grad(x);
            err_grad_sq += w * g.norm_squared();
        }
    }
    (err_pi, err_grad_sq.max(0.0).sqrt())
}

/// The quarter-five-spot analogue model on a given mesh.
pub fn coupled_wells_model(mesh: &PolytopalMesh, t_end: f64) -> Result<ModelData, SchemeError> {
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
        mesh,
        Arc::new(injection),
        Arc::new(production),
        Arc::new(FnScalar(|_| 0.0)),
        t_end,
    )?;
    model.mobility_ratio = 2.0;
    Ok(model)
}

/// Zero sources with a smooth initial hump.
pub fn pure_transport_model(mesh: &PolytopalMesh, t_end: f64) -> Result<ModelData, SchemeError> {
    let bump = FnScalar(|p: Point| {
        let r2 = (p - Point::new(0.5, 0.5)).norm_squared();
        (-(r2 / 0.02)).exp()
    });
    ModelData::isotropic_unit(
        mesh,
        Arc::new(ZeroSource),
        Arc::new(ZeroSource),
        Arc::new(bump),
        t_end,
    )
}

fn build_mesh(levels: usize, conc: ConcentrationGdChoice, pres: PressureGdChoice) -> Result<Arc<PolytopalMesh>, SchemeError> {
    let needs_triangles =
        conc == ConcentrationGdChoice::P1 || pres == PressureGdChoice::Rt0Mixed;
    let mesh = if needs_triangles {
        PolytopalMesh::triangulated(levels, levels, Rect::UNIT)?
    } else {
        PolytopalMesh::cartesian(levels, levels, Rect::UNIT)?
    };
    Ok(Arc::new(mesh))
}

fn scenario_model(
    scenario: Scenario,
    mesh: &PolytopalMesh,
    t_end: f64,
) -> Result<ModelData, SchemeError> {
    match scenario {
        Scenario::CoupledWells => coupled_wells_model(mesh, t_end),
        Scenario::PureTransport => pure_transport_model(mesh, t_end),
        Scenario::EllipticManufactured => pure_transport_model(mesh, t_end),
    }
}

/// Build and run one coupled level.
pub fn run_level(spec: &StudySpec, level: usize) -> Result<(Arc<PolytopalMesh>, CoupledSolver, crate::scheme::RunHistory), SchemeError> {
    let mesh = build_mesh(level, spec.concentration_gd, spec.pressure_gd)?;
    let model = scenario_model(spec.scenario, &mesh, spec.t_end)?;
    let times = TimeSteps::uniform(spec.t_end, spec.steps);
    let mut config = spec.config.clone();
    config.pressure_gd = spec.pressure_gd;
    config.concentration_gd = spec.concentration_gd;
    let solver = CoupledSolver::new(mesh.clone(), model, times, config)?;
    let history = solver.run()?;
    Ok((mesh, solver, history))
}

/// Space-time L2 difference of the `Pi_C` reconstructions of two runs on
/// nested meshes (evaluated on the finer quadrature, right-endpoint time
/// convention).
pub fn l2q_difference(
    coarse_gd: &dyn GradientDiscretisation,
    coarse_steps: &[DofVector],
    fine_gd: &dyn GradientDiscretisation,
    fine_steps: &[DofVector],
    times: &TimeSteps,
) -> f64 {
    let rule = TriRule::of_degree(2);
    // Cache the coarse piece of every fine quadrature node.
    let mut nodes: Vec<(usize, Point, f64, usize)> = Vec::new();
    for ip in 0..fine_gd.piece_count() {
        let tri = fine_gd.piece(ip).tri;
        for (x, w) in rule.on(&tri) {
            let cp = coarse_gd
                .locate_piece(x)
                .expect("fine node inside the common domain");
            nodes.push((ip, x, w, cp));
        }
    }
    let mut total = 0.0;
    for n in 0..times.step_count() {
        let dt = times.delta(n);
        let cf = &fine_steps[(n + 1).min(fine_steps.len() - 1)];
        let cc = &coarse_steps[(n + 1).min(coarse_steps.len() - 1)];
        let mut space = 0.0;
        for &(ip, x, w, cp) in &nodes {
            let vf = gdm::eval_pi_in_piece(fine_gd, cf, ip, x);
            let vc = gdm::eval_pi_in_piece(coarse_gd, cc, cp, x);
            space += w * (vf - vc) * (vf - vc);
        }
        total += dt * space;
    }
    total.max(0.0).sqrt()
}

/// Like [`l2q_difference`] but for per-step fields indexed from the first
/// step (pressures).
pub fn l2q_difference_steps(
    coarse_gd: &dyn GradientDiscretisation,
    coarse_steps: &[DofVector],
    fine_gd: &dyn GradientDiscretisation,
    fine_steps: &[DofVector],
    times: &TimeSteps,
) -> f64 {
    let rule = TriRule::of_degree(2);
    let mut nodes: Vec<(usize, Point, f64, usize)> = Vec::new();
    for ip in 0..fine_gd.piece_count() {
        let tri = fine_gd.piece(ip).tri;
        for (x, w) in rule.on(&tri) {
            let cp = coarse_gd.locate_piece(x).expect("node inside domain");
            nodes.push((ip, x, w, cp));
        }
    }
    let mut total = 0.0;
    for n in 0..times.step_count() {
        let dt = times.delta(n);
        let cf = &fine_steps[n];
        let cc = &coarse_steps[n];
        let mut space = 0.0;
        for &(ip, x, w, cp) in &nodes {
            let vf = gdm::eval_pi_in_piece(fine_gd, cf, ip, x);
            let vc = gdm::eval_pi_in_piece(coarse_gd, cc, cp, x);
            space += w * (vf - vc) * (vf - vc);
        }
        total += dt * space;
    }
    total.max(0.0).sqrt()
}

/// Manufactured-solution convergence of the standalone pressure scheme:
/// the hybrid GD on Cartesian meshes or the conforming P1 GD on
/// triangulations.
pub fn elliptic_convergence(
    kind: ConcentrationGdChoice,
    levels: &[usize],
    solver: &SolverConfig,
) -> Result<ConvergenceReport, SchemeError> {
    let mut rows = Vec::new();
    for &level in levels {
        let (err_pi, err_grad, h) = match kind {
            ConcentrationGdChoice::Hmm => {
                let mesh = Arc::new(PolytopalMesh::cartesian(level, level, Rect::UNIT)?);
                let gd = HmmGd::build(mesh.clone())?;
                let matrices = GdMatrices::build(&gd, 4);
                let p = elliptic_solve(&gd, &matrices, &manufactured::source, solver)?;
                let (e1, e2) = manufactured_errors(
                    &gd,
                    &matrices,
                    &p,
                    &manufactured::pressure,
                    &manufactured::gradient,
                );
                (e1, e2, mesh.quality().h_max)
            }
            ConcentrationGdChoice::P1 => {
                let mesh = Arc::new(PolytopalMesh::triangulated(level, level, Rect::UNIT)?);
                let gd = P1Gd::build(mesh.clone())?;
                let matrices = GdMatrices::build(&gd, 4);
                let p = elliptic_solve(&gd, &matrices, &manufactured::source, solver)?;
                let (e1, e2) = manufactured_errors(
                    &gd,
                    &matrices,
                    &p,
                    &manufactured::pressure,
                    &manufactured::gradient,
                );
                (e1, e2, mesh.quality().h_max)
            }
        };
        rows.push(LevelRow {
            level,
            h,
            values: vec![("err_pi", err_pi), ("err_grad", err_grad)],
        });
    }
    let orders = ConvergenceReport::compute_orders(&rows);
    Ok(ConvergenceReport {
        scenario: Scenario::EllipticManufactured,
        rows,
        orders,
    })
}

/// Run a convergence study.
pub fn run_convergence(spec: &StudySpec) -> Result<ConvergenceReport, SchemeError> {
    spec.validate()?;
    match spec.scenario {
        Scenario::EllipticManufactured => {
            elliptic_convergence(spec.concentration_gd, &spec.levels, &spec.config.solver)
        }
        Scenario::PureTransport | Scenario::CoupledWells => {
            let mut runs = Vec::new();
            for &level in &spec.levels {
                runs.push((level, run_level(spec, level)?));
            }
            let mut rows = Vec::new();
            for i in 1..runs.len() {
                let (_, (_, coarse_solver, coarse_hist)) = &runs[i - 1];
                let (level, (mesh, fine_solver, fine_hist)) = &runs[i];
                let dc = l2q_difference(
                    coarse_solver.concentration_gd(),
                    &coarse_hist.concentrations,
                    fine_solver.concentration_gd(),
                    &fine_hist.concentrations,
                    &fine_hist.times,
                );
                let dp = pressure_difference(coarse_solver, coarse_hist, fine_solver, fine_hist);
                rows.push(LevelRow {
                    level: *level,
                    h: mesh.quality().h_max,
                    values: vec![("diff_c", dc), ("diff_p", dp)],
                });
            }
            let orders = ConvergenceReport::compute_orders(&rows);
            Ok(ConvergenceReport {
                scenario: spec.scenario,
                rows,
                orders,
            })
        }
    }
}

/// L2(Q) difference of the pressure reconstructions of two runs. Both
/// backends have piecewise-constant-per-cell `Pi_P` on their own mesh for
/// the hybrid choice and cell constants for the mixed one, so both are
/// evaluated as cell values.
fn pressure_difference(
    coarse: &CoupledSolver,
    coarse_hist: &crate::scheme::RunHistory,
    fine: &CoupledSolver,
    fine_hist: &crate::scheme::RunHistory,
) -> f64 {
    let rule = TriRule::of_degree(2);
    let fine_mesh = &fine.mesh;
    let coarse_mesh = &coarse.mesh;
    // Coarse cell of each fine node, cached.
    let mut nodes: Vec<(usize, Point, f64, usize)> = Vec::new();
    for k in 0..fine_mesh.cell_count() {
        for i in 0..fine_mesh.cell(k).faces.len() {
            let tri = fine_mesh.diamond(k, i);
            for (x, w) in rule.on(&tri) {
                let ck = match coarse_mesh.locate(x) {
                    crate::mesh::Location::Cell(c) => c,
                    crate::mesh::Location::Outside => continue,
                };
                nodes.push((k, x, w, ck));
            }
        }
    }
    let times = &fine_hist.times;
    let mut total = 0.0;
    for n in 0..times.step_count() {
        let dt = times.delta(n);
        let pf = &fine_hist.pressures[n];
        let pc = &coarse_hist.pressures[n];
        let mut space = 0.0;
        for &(k, _x, w, ck) in &nodes {
            let d = pf.0[k] - pc.0[ck];
            space += w * d * d;
        }
        total += dt * space;
    }
    total.max(0.0).sqrt()
}

/// GD quality table: coercivity constant plus consistency/conformity
/// defects on the fixed test battery (all test fields have zero normal
/// trace, the natural class for no-flow boundary conditions).
#[derive(Clone, Debug)]
pub struct QualityRow {
    pub level: usize,
    pub h: f64,
    pub coercivity: f64,
    pub consistency: Vec<f64>,
    pub conformity: Vec<f64>,
}

pub fn gd_quality(
    gd: &dyn GradientDiscretisation,
    level: usize,
    h: f64,
) -> Result<QualityRow, SchemeError> {
    use std::f64::consts::PI;
    let matrices = GdMatrices::build_with(gd, 5, 2);
    let coercivity = matrices.coercivity_constant()?;
    let s_battery: Vec<Box<dyn Fn(Point) -> (f64, Vec2)>> = vec![
        Box::new(|p: Point| {
            (
                (PI * p.x).cos() * (PI * p.y).cos(),
                Vec2::new(
                    -PI * (PI * p.x).sin() * (PI * p.y).cos(),
                    -PI * (PI * p.x).cos() * (PI * p.y).sin(),
                ),
            )
        }),
        Box::new(|p: Point| {
            (
                p.x * p.x * p.y + 0.5 * p.y * p.y,
                Vec2::new(2.0 * p.x * p.y, p.x * p.x + p.y),
            )
        }),
    ];
    let mut consistency = Vec::new();
    for f in &s_battery {
        let field = FnH1 {
            value: |x| f(x).0,
            gradient: |x| f(x).1,
        };
        consistency.push(matrices.consistency_defect(gd, &field)?);
    }
    // Zero-normal-trace H(div) battery.
    let w_battery: Vec<(Box<dyn Fn(Point) -> Vec2>, Box<dyn Fn(Point) -> f64>)> = vec![
        (
            Box::new(|p: Point| {
                Vec2::new(
                    (PI * p.x).sin() * (PI * p.y).cos(),
                    (PI * p.x).cos() * (PI * p.y).sin(),
                )
            }),
            Box::new(|p: Point| 2.0 * PI * (PI * p.x).cos() * (PI * p.y).cos()),
        ),
        (
            // curl of sin(pi x) sin(pi y): divergence-free.
            Box::new(|p: Point| {
                Vec2::new(
                    PI * (PI * p.x).sin() * (PI * p.y).cos(),
                    -PI * (PI * p.x).cos() * (PI * p.y).sin(),
                )
            }),
            Box::new(|_| 0.0),
        ),
    ];
    let mut conformity = Vec::new();
    for (v, d) in &w_battery {
        let field = FnHdiv {
            value: |x| v(x),
            divergence: |x| d(x),
        };
        conformity.push(matrices.conformity_defect(gd, &field)?);
    }
    Ok(QualityRow {
        level,
        h,
        coercivity,
        consistency,
        conformity,
    })
}

/// Quality trends across refinement levels for one GD family.
pub fn gd_quality_trend(
    kind: ConcentrationGdChoice,
    levels: &[usize],
) -> Result<Vec<QualityRow>, SchemeError> {
    let mut rows = Vec::new();
    for &level in levels {
        let mesh = build_mesh(level, kind, PressureGdChoice::Hmm)?;
        let h = mesh.quality().h_max;
        match kind {
            ConcentrationGdChoice::Hmm => {
                let gd = HmmGd::build(mesh)?;
                rows.push(gd_quality(&gd, level, h)?);
            }
            ConcentrationGdChoice::P1 => {
                let gd = P1Gd::build(mesh)?;
                rows.push(gd_quality(&gd, level, h)?);
            }
        }
    }
    Ok(rows)
}

/// Monte-Carlo round-trip check of the flow: fraction of sample points with
/// `|F_{-s}(F_s(x)) - x| <= tol`, excluding (and counting) trajectories
/// that hit the critical set or leave the domain.
pub struct RoundTripReport {
    pub tested: usize,
    pub excluded: usize,
    pub passed: usize,
    pub worst: f64,
}

pub fn flow_round_trip(
    tracer: &Tracer,
    s: f64,
    samples: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
    sample_box: Rect,
) -> RoundTripReport {
    let mut tested = 0;
    let mut excluded = 0;
    let mut passed = 0;
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let x = Point::new(
            rng.gen_range(sample_box.x0..sample_box.x1),
            rng.gen_range(sample_box.y0..sample_box.y1),
        );
        let Ok(fwd) = tracer.trace(x, s) else {
            excluded += 1;
            continue;
        };
        if fwd.status != TraceStatus::Ok {
            excluded += 1;
            continue;
        }
        let Ok(back) = tracer.trace(fwd.end, -s) else {
            excluded += 1;
            continue;
        };
        if back.status != TraceStatus::Ok {
            excluded += 1;
            continue;
        }
        tested += 1;
        let err = (back.end - x).norm();
        worst = worst.max(err);
        if err <= tol {
            passed += 1;
        }
    }
    RoundTripReport {
        tested,
        excluded,
        passed,
        worst,
    }
}

/// Transport duality check of one step: `<T f, g>` via quadrature at the
/// source nodes against `<f, T* g>` via the flow-pushed quadrature (the
/// natural ELLAM pairing, in which the adjoint identity is exact up to
/// round-trip accuracy). Test functions are piecewise constant per cell;
/// traces are shared across all pairs. Returns the worst relative
/// mismatch, and checks the dual-remainder bound
/// `|R| <= dt Gamma_div C1(T)/phi_*` along the way.
pub struct DualityReport {
    pub worst_mismatch: f64,
    pub worst_remainder_excess: f64,
}

pub fn transport_duality_worst(
    tracer: &Tracer,
    dt: f64,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> DualityReport {
    let field = tracer.field;
    let rule = TriRule::of_degree(2);
    // Shared traces: source node, weight, landing cell, |JF_dt|,
    // round-trip cell and |JF_{-dt}(F_dt)|.
    struct Node {
        w: f64,
        cell_from: usize,
        cell_to: usize,
        cell_back: usize,
        jac_fwd: f64,
        jac_back: f64,
    }
    let mut nodes = Vec::new();
    let (phi_min, _) = tracer.phi.bounds();
    let remainder_bound =
        dt.abs() * field.max_divergence() * tracer.jacobian_bound(dt) / phi_min;
    let mut worst_remainder_excess: f64 = 0.0;
    for t in field.tris() {
        for (x, w) in rule.on(&t.tri) {
            let Ok(fwd) = tracer.trace(x, dt) else { continue };
            let Ok(back) = tracer.trace(fwd.end, -dt) else { continue };
            let cell_to = field.tri(fwd.end_tri).cell;
            let remainder = back.jacobian
                - tracer.phi.of_cell(cell_to)
                    / tracer.phi.of_cell(field.tri(back.end_tri).cell);
            worst_remainder_excess =
                worst_remainder_excess.max(remainder.abs() - remainder_bound);
            nodes.push(Node {
                w,
                cell_from: t.cell,
                cell_to,
                cell_back: field.tri(back.end_tri).cell,
                jac_fwd: fwd.jacobian,
                jac_back: back.jacobian,
            });
        }
    }
    let mut worst = 0.0f64;
    for (fv, gv) in pairs {
        let mut lhs = 0.0; // int f(F_dt(x)) g(x) dx
        let mut rhs = 0.0; // int f(y) g(F_{-dt}(y)) |JF_{-dt}(y)| dy
        let mut scale = 0.0;
        for n in &nodes {
            lhs += n.w * fv[n.cell_to] * gv[n.cell_from];
            // Node pushed to y = F_dt(x) with weight w |JF_dt(x)|.
            rhs += n.w * n.jac_fwd * fv[n.cell_to] * gv[n.cell_back] * n.jac_back;
            scale += n.w * (fv[n.cell_to] * gv[n.cell_from]).abs();
        }
        worst = worst.max((lhs - rhs).abs() / scale.max(1e-300));
    }
    DualityReport {
        worst_mismatch: worst,
        worst_remainder_excess,
    }
}

/// Swept-volume estimate of one mesh face: Monte-Carlo fraction of domain
/// points whose backward trajectory over `[0, t]` crosses the face.
pub struct SweptVolumeCheck {
    pub face: usize,
    pub estimate: f64,
    pub bound: f64,
    pub std_dev: f64,
    pub passed: bool,
}

pub fn swept_volume_check(
    tracer: &Tracer,
    face: usize,
    t: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> SweptVolumeCheck {
    let field = tracer.field;
    let mesh = field.mesh();
    let area = mesh.domain_area();
    // int_sigma |V . n|: the reconstructed normal trace is constant along
    // the face: |sigma| |u.n| = |flux|.
    let k = mesh.face(face).cells.0;
    let flux_abs = {
        // Locate the K-side tracking triangle edge on this face.
        let mut val = 0.0;
        for it in field.cell_tris(k) {
            for e in 0..3 {
                if field.crossed_face(it, e) == Some(face) {
                    val = field.tri(it).edge_flux[e].abs();
                }
            }
        }
        val
    };
    let bound = tracer.jacobian_bound(t) / tracer.phi.bounds().0 * t.abs() * flux_abs;
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in 0..mesh.vertex_count() {
        let p = mesh.vertex(v);
        lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let mut hits = 0usize;
    let mut valid = 0usize;
    for _ in 0..samples {
        let x = Point::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y));
        if field.locate(x).is_none() {
            continue;
        }
        valid += 1;
        let Ok(back) = tracer.trace(x, -t) else { continue };
        let crossed = back.events.iter().any(|ev| {
            field.crossed_face(ev.tri_from, ev.edge) == Some(face)
        });
        if crossed {
            hits += 1;
        }
    }
    let p = if valid > 0 { hits as f64 / valid as f64 } else { 0.0 };
    let estimate = area * p;
    let std_dev = area * (p * (1.0 - p) / valid.max(1) as f64).sqrt();
    SweptVolumeCheck {
        face,
        estimate,
        bound,
        std_dev,
        passed: estimate <= bound + 3.0 * std_dev,
    }
}

/// Discrete H1 semi-norm of a piecewise-constant (per cell) function:
/// `(sum_internal |sigma| / d_sigma (f_K - f_L)^2)^{1/2}` with
/// `d_sigma = d_{K,sigma} + d_{L,sigma}`.
pub fn piecewise_constant_seminorm(mesh: &PolytopalMesh, f: &[f64]) -> f64 {
    let mut s = 0.0;
    for (fid, face) in mesh.faces().iter().enumerate() {
        let Some(l) = face.cells.1 else { continue };
        let k = face.cells.0;
        let ik = mesh.cell(k).faces.iter().position(|&g| g == fid).unwrap();
        let il = mesh.cell(l).faces.iter().position(|&g| g == fid).unwrap();
        let d = mesh.distance(k, ik) + mesh.distance(l, il);
        let jump = f[k] - f[l];
        s += face.length / d * jump * jump;
    }
    s.max(0.0).sqrt()
}

/// Measured constant of the piecewise-constant translation estimate:
/// `|f(F_s) - f|_{L1} <= R (C1(T)/phi_*) |s| |V|_{L2} |f|_T`.
/// The caller supplies the normalisation `c1_over_phi = C1(T)/phi_*`;
/// cross-mesh comparisons must use a mesh-independent convention (for
/// instance the uniform source divergence bound `M_div` over the step
/// horizon), otherwise the pre-asymptotic growth of the resolved source
/// peaks contaminates the measured constant.
pub fn translation_constant(
    tracer: &Tracer,
    f: &[f64],
    s: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
    c1_over_phi: f64,
) -> f64 {
    let field = tracer.field;
    let mesh = field.mesh();
    let area = mesh.domain_area();
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in 0..mesh.vertex_count() {
        let p = mesh.vertex(v);
        lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let mut sum = 0.0;
    let mut valid = 0usize;
    for _ in 0..samples {
        let x = Point::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y));
        let Some(it) = field.locate(x) else { continue };
        valid += 1;
        let Ok(tr) = tracer.trace_from(it, x, s) else { continue };
        let from = field.tri(it).cell;
        let to = field.tri(tr.end_tri).cell;
        sum += (f[to] - f[from]).abs();
    }
    let l1 = area * sum / valid.max(1) as f64;
    let denom = c1_over_phi * s.abs() * field.l2_norm() * piecewise_constant_seminorm(mesh, f);
    l1 / denom.max(1e-300)
}

/// Mesh-independent normalisation `C1/phi_*` built from the uniform
/// source divergence bound `M_div = sup|q+| + sup|q-|` over the
/// horizon `t`.
pub fn uniform_c1_over_phi(solver: &CoupledSolver, t: f64) -> f64 {
    let b = &solver.bounds;
    let m_div = b.m_q_plus + b.m_q_minus;
    (b.phi_max / b.phi_min) * (m_div * t.abs() / b.phi_min).exp() / b.phi_min
}

/// Mass-growth inequalities for transported nonnegative functions:
/// `int phi w(F_s) <= (1 + Gamma C1 |s| / phi_*) int phi w` and
/// `int w(F_s) <= (C1/phi_*) int phi w` (both sides by quadrature over the
/// tracking triangles; the left sides use traced nodes).
pub struct MassGrowthCheck {
    pub weighted_lhs: f64,
    pub weighted_rhs: f64,
    pub unweighted_lhs: f64,
    pub unweighted_rhs: f64,
    pub weighted_ok: bool,
    pub unweighted_ok: bool,
}

pub fn mass_growth_check(
    tracer: &Tracer,
    w_fn: &dyn Fn(usize) -> f64,
    s: f64,
    slack: f64,
) -> MassGrowthCheck {
    let field = tracer.field;
    let rule = TriRule::of_degree(2);
    let mut lhs_w = 0.0;
    let mut lhs_u = 0.0;
    let mut rhs_int = 0.0;
    for t in field.tris() {
        let phi_here = tracer.phi.of_cell(t.cell);
        for (x, wq) in rule.on(&t.tri) {
            rhs_int += wq * phi_here * w_fn(t.cell);
            if let Ok(tr) = tracer.trace(x, s) {
                let wv = w_fn(field.tri(tr.end_tri).cell);
                lhs_w += wq * phi_here * wv;
                lhs_u += wq * wv;
            }
        }
    }
    let (phi_min, _) = tracer.phi.bounds();
    let c1 = tracer.jacobian_bound(s);
    let gamma = field.max_divergence();
    let rhs_w = (1.0 + gamma * c1 * s.abs() / phi_min) * rhs_int;
    let rhs_u = c1 / phi_min * rhs_int;
    MassGrowthCheck {
        weighted_lhs: lhs_w,
        weighted_rhs: rhs_w,
        unweighted_lhs: lhs_u,
        unweighted_rhs: rhs_u,
        weighted_ok: lhs_w <= rhs_w * (1.0 + slack),
        unweighted_ok: lhs_u <= rhs_u * (1.0 + slack),
    }
}

/// Measured constant of the flow-translation assumption on reconstructed
/// test functions: max over sampled dof vectors of
/// `|Pi z(F_s) - Pi z|_{L1} / (|s| |V|_{L2} |grad z|_{L2})`.
pub fn measured_m_f(
    tracer: &Tracer,
    gd: &dyn GradientDiscretisation,
    matrices: &GdMatrices,
    s: f64,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let field = tracer.field;
    let rule = TriRule::of_degree(2);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let z = DofVector(
            (0..gd.dof_count())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        );
        let grad = matrices.grad_l2(&z).unwrap();
        if grad < 1e-12 {
            continue;
        }
        let mut l1 = 0.0;
        for ip in 0..gd.piece_count() {
            let piece = gd.piece(ip);
            for (x, w) in rule.on(&piece.tri) {
                let Some(it) = field.locate_in_cell(piece.cell, x) else { continue };
                let Ok(tr) = tracer.trace_from(it, x, s) else { continue };
                let v0 = gdm::eval_pi_in_piece(gd, &z, ip, x);
                let v1 = gdm::eval_pi(gd, &z, tr.end).unwrap_or(v0);
                l1 += w * (v1 - v0).abs();
            }
        }
        worst = worst.max(l1 / (s.abs() * field.l2_norm() * grad).max(1e-300));
    }
    worst
}

/// Run the default invariant suite on one level of a study.
pub fn run_invariants(spec: &StudySpec) -> Result<InvariantLedger, SchemeError> {
    let Some(&level) = spec.levels.first() else {
        return Err(SchemeError::Config("at least one level required".into()));
    };
    let mut ledger = InvariantLedger::default();
    let (mesh, solver, history) = run_level(spec, level)?;
    let bounds = &solver.bounds;

    // Finite-volume structure of the last pressure solve (hybrid backend).
    let last = history.pressures.len() - 1;
    if let Some((res, _fluxes)) = solver.hmm_fv_residuals(
        &history.concentrations[last],
        &history.pressures[last],
        last,
    ) {
        let scale = res.flux_scale.max(1e-300);
        ledger.check(
            "flux_conservativity",
            res.conservativity,
            1e-12 * scale,
            format!("max |F_K + F_L| over internal faces, flux scale {scale:.3e}"),
        );
        ledger.check(
            "flux_balance",
            res.balance,
            10.0 * spec.config.solver.tol * scale.max(1.0),
            "max |sum_sigma F - int_K (q+ - q-)|".into(),
        );
        ledger.check("flux_boundary", res.boundary, 1e-12, "max boundary flux".into());
    }

    // H(div) structure and divergence bound of the tracking velocity.
    let field = &history.velocities[last];
    let diag = field.validate();
    ledger.check(
        "darcy_normal_jump",
        diag.normal_jump,
        1e-11 * diag.flux_scale.max(1e-300),
        "normal-trace continuity across sub-faces".into(),
    );
    ledger.check(
        "darcy_boundary_trace",
        diag.boundary_trace,
        1e-12 * diag.flux_scale.max(1.0),
        "no-flow boundary trace".into(),
    );
    let m_div = bounds.m_q_plus + bounds.m_q_minus;
    ledger.check(
        "darcy_divergence_bound",
        diag.max_divergence,
        m_div + 1e-9,
        format!("source bound M_div = {m_div:.6e}"),
    );
    ledger.check(
        "darcy_local_closure",
        diag.closure_residual,
        1e-12 * diag.flux_scale.max(1.0),
        "consistency of the per-cell spoke systems (nullspace = circulation)".into(),
    );

    // Flow: round trips, Jacobian identity and bound.
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tracer = Tracer::new(field, &solver.model.porosity, spec.config.flow);
    let s = history.times.delta(0);
    let rt = flow_round_trip(
        &tracer,
        s,
        10_000,
        1e-8 * tracer.domain_diameter(),
        &mut rng,
        Rect::UNIT,
    );
    let pass_fraction = rt.passed as f64 / rt.tested.max(1) as f64;
    ledger.check(
        "flow_round_trip",
        1.0 - pass_fraction,
        1e-3,
        format!(
            "{} passed / {} tested ({} excluded), worst {:.3e}",
            rt.passed, rt.tested, rt.excluded, rt.worst
        ),
    );
    let mut worst_jac = 0.0f64;
    let mut bound_violation = 0.0f64;
    let c1 = tracer.jacobian_bound(s);
    for _ in 0..200 {
        let x = Point::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
        if let Ok(tr) = tracer.trace(x, s) {
            worst_jac = worst_jac.max(flow::jacobian_identity_residual(&tr, &solver.model.porosity));
            bound_violation = bound_violation.max(tr.jacobian - c1 - 1e-10);
        }
    }
    ledger.check("jacobian_identity", worst_jac, 1e-8, "closed-form residual".into());
    ledger.check(
        "jacobian_bound",
        bound_violation.max(0.0),
        0.0,
        format!("C1 = {c1:.6e}"),
    );

    // Transport duality on random piecewise-constant pairs.
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
        .map(|_| {
            (
                (0..mesh.cell_count()).map(|_| rng.gen_range(0.0..1.0)).collect(),
                (0..mesh.cell_count()).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
        })
        .collect();
    let duality = transport_duality_worst(&tracer, s, &pairs);
    ledger.check(
        "transport_duality",
        duality.worst_mismatch,
        1e-6,
        "flow-aligned pairing".into(),
    );
    ledger.check(
        "dual_remainder_bound",
        duality.worst_remainder_excess.max(0.0),
        0.0,
        "R bound of the dual operator expansion".into(),
    );

    // Swept volume (20 faces) and translation constant.
    let internal: Vec<usize> = (0..mesh.face_count())
        .filter(|&f| !mesh.face(f).is_boundary())
        .collect();
    let mut worst_excess = 0.0f64;
    let mut checked = 0;
    for _ in 0..20 {
        let face = internal[rng.gen_range(0..internal.len())];
        let check = swept_volume_check(&tracer, face, s, 2_000, &mut rng);
        checked += 1;
        if !check.passed {
            worst_excess = worst_excess
                .max(check.estimate - check.bound - 3.0 * check.std_dev);
        }
    }
    ledger.check(
        "swept_volume",
        worst_excess,
        0.0,
        format!("{checked} faces, 3-sigma statistical tolerance"),
    );

    let fvals: Vec<f64> = (0..mesh.cell_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let r = translation_constant(&tracer, &fvals, s, 4_000, &mut rng, uniform_c1_over_phi(&solver, s));
    ledger.constants.push(("translation_R", r));
    ledger.check(
        "translation_estimate_finite",
        if r.is_finite() { 0.0 } else { 1.0 },
        0.0,
        format!("measured R = {r:.6e}"),
    );

    // Mass growth inequalities for a nonnegative transported function.
    let wvals: Vec<f64> = (0..mesh.cell_count()).map(|_| rng.gen_range(0.0..2.0)).collect();
    let growth = mass_growth_check(&tracer, &|k| wvals[k], s, 1e-6);
    ledger.check(
        "weighted_mass_growth",
        if growth.weighted_ok { 0.0 } else { growth.weighted_lhs - growth.weighted_rhs },
        0.0,
        format!("{:.6e} <= {:.6e}", growth.weighted_lhs, growth.weighted_rhs),
    );
    ledger.check(
        "unweighted_mass_growth",
        if growth.unweighted_ok { 0.0 } else { growth.unweighted_lhs - growth.unweighted_rhs },
        0.0,
        format!("{:.6e} <= {:.6e}", growth.unweighted_lhs, growth.unweighted_rhs),
    );

    // Measured constants.
    let m_f = measured_m_f(
        &tracer,
        solver.concentration_gd(),
        solver.concentration_matrices(),
        s,
        3,
        &mut rng,
    );
    ledger.constants.push(("M_F", m_f));
    ledger.constants.push((
        "C_D",
        solver.concentration_matrices().coercivity_constant()?,
    ));
    ledger.constants.push(("C1_T", tracer.jacobian_bound(spec.t_end)));
    ledger
        .constants
        .push(("energy_bound_R", field.energy_bound_constant()));
    ledger
        .constants
        .push(("step_ratio_M_t", history.step_ratio_bound));

    // Mass conservation of a zero-source run on the same mesh.
    let transport_spec = StudySpec {
        scenario: Scenario::PureTransport,
        levels: vec![level, level],
        ..spec.clone()
    };
    let (_, tsolver, thist) = run_level(&transport_spec, level)?;
    let tol = thist.times.step_count() as f64
        * 10.0
        * tsolver.config.solver.tol
        * thist.initial_mass.abs();
    ledger.check(
        "mass_conservation",
        thist.mass_drift(),
        tol,
        format!("zero-source drift over {} steps", thist.times.step_count()),
    );

    Ok(ledger)
}
