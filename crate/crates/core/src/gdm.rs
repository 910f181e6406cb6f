//! The gradient-discretisation abstraction.
//!
//! A gradient discretisation is a finite-dimensional dof space together
//! with a function reconstruction `Pi` and a gradient reconstruction
//! `Grad`, both linear and piecewise polynomial on a set of triangular
//! pieces. Everything else is computed generically from the per-piece
//! basis rows: Gram matrices, the discrete norm
//! `|v| = (|Grad v|_{L2}^2 + (int Pi v)^2)^{1/2}`, the coercivity constant
//! (a discrete Poincare-Wirtinger constant), the consistency defect
//! (interpolation error), and the conformity defect (error in the discrete
//! Stokes formula).

use thiserror::Error;

use crate::geom::{Point, Triangle, Vec2};
use crate::linalg::{self, LinearOperator, SolverConfig, SparseMatrix};
use crate::quadrature::TriRule;

#[derive(Debug, Error)]
pub enum GdmError {
    #[error("dof vector has length {len}, expected {expected}")]
    SizeMismatch { len: usize, expected: usize },
    #[error("norm Gram matrix is singular: {0}")]
    SingularNormGram(String),
    #[error("power iteration did not converge within {0} iterations")]
    PowerIterationStalled(usize),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// A scalar field evaluable at points.
pub trait ScalarField {
    fn value(&self, x: Point) -> f64;
}

/// A scalar field with an evaluable gradient (an H1 representative).
pub trait H1Field: ScalarField {
    fn gradient(&self, x: Point) -> Vec2;
}

/// A vector field with an evaluable divergence (an H_div representative).
pub trait HdivField {
    fn value(&self, x: Point) -> Vec2;
    fn divergence(&self, x: Point) -> f64;
}

/// Closure adapters.
pub struct FnScalar<F: Fn(Point) -> f64>(pub F);

impl<F: Fn(Point) -> f64> ScalarField for FnScalar<F> {
    fn value(&self, x: Point) -> f64 {
        (self.0)(x)
    }
}

pub struct FnH1<F: Fn(Point) -> f64, G: Fn(Point) -> Vec2> {
    pub value: F,
    pub gradient: G,
}

impl<F: Fn(Point) -> f64, G: Fn(Point) -> Vec2> ScalarField for FnH1<F, G> {
    fn value(&self, x: Point) -> f64 {
        (self.value)(x)
    }
}

impl<F: Fn(Point) -> f64, G: Fn(Point) -> Vec2> H1Field for FnH1<F, G> {
    fn gradient(&self, x: Point) -> Vec2 {
        (self.gradient)(x)
    }
}

pub struct FnHdiv<F: Fn(Point) -> Vec2, G: Fn(Point) -> f64> {
    pub value: F,
    pub divergence: G,
}

impl<F: Fn(Point) -> Vec2, G: Fn(Point) -> f64> HdivField for FnHdiv<F, G> {
    fn value(&self, x: Point) -> Vec2 {
        (self.value)(x)
    }
    fn divergence(&self, x: Point) -> f64 {
        (self.divergence)(x)
    }
}

/// A coefficient vector in the dof space of a gradient discretisation.
#[derive(Clone, Debug, PartialEq)]
pub struct DofVector(pub Vec<f64>);

impl DofVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn constant(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &DofVector) -> DofVector {
        DofVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + alpha * b)
                .collect(),
        )
    }

    pub fn scale(&self, alpha: f64) -> DofVector {
        DofVector(self.0.iter().map(|a| a * alpha).collect())
    }
}

/// One triangular region on which both reconstructions are polynomial,
/// tagged with the mesh cell that contains it.
#[derive(Clone, Copy, Debug)]
pub struct Piece {
    pub tri: Triangle,
    pub cell: usize,
}

/// A gradient discretisation: dofs plus reconstruction operators given by
/// sparse basis rows on each piece. Implementations guarantee linearity by
/// construction (reconstructions are linear combinations of basis rows).
pub trait GradientDiscretisation {
    fn dof_count(&self) -> usize;
    fn piece_count(&self) -> usize;
    fn piece(&self, ip: usize) -> Piece;

    /// Append `(dof, value)` pairs so that `Pi v (x) = sum value * v[dof]`
    /// for `x` inside piece `ip`.
    fn pi_basis(&self, ip: usize, x: Point, out: &mut Vec<(usize, f64)>);

    /// Append `(dof, vector)` pairs so that
    /// `Grad v (x) = sum vector * v[dof]` for `x` inside piece `ip`.
    fn grad_basis(&self, ip: usize, x: Point, out: &mut Vec<(usize, Vec2)>);

    /// Piece containing a point, resolving ties deterministically.
    fn locate_piece(&self, x: Point) -> Option<usize>;

    /// Interpolant of (bounded) initial data.
    fn interpolate_initial(&self, f: &dyn ScalarField) -> DofVector;

    /// Interpolant of smooth functions.
    fn interpolate_smooth(&self, f: &dyn ScalarField) -> DofVector;
}

/// Evaluate `Pi v` at a point of a known piece.
pub fn eval_pi_in_piece(
    gd: &dyn GradientDiscretisation,
    v: &DofVector,
    ip: usize,
    x: Point,
) -> f64 {
    let mut row = Vec::new();
    gd.pi_basis(ip, x, &mut row);
    row.iter().map(|&(i, b)| b * v.0[i]).sum()
}

/// Evaluate `Grad v` at a point of a known piece.
pub fn eval_grad_in_piece(
    gd: &dyn GradientDiscretisation,
    v: &DofVector,
    ip: usize,
    x: Point,
) -> Vec2 {
    let mut row = Vec::new();
    gd.grad_basis(ip, x, &mut row);
    row.iter()
        .map(|&(i, g)| g * v.0[i])
        .fold(Vec2::zeros(), |a, b| a + b)
}

/// Evaluate `Pi v` anywhere in the domain.
pub fn eval_pi(gd: &dyn GradientDiscretisation, v: &DofVector, x: Point) -> Option<f64> {
    gd.locate_piece(x).map(|ip| eval_pi_in_piece(gd, v, ip, x))
}

/// Evaluate `Grad v` anywhere in the domain.
pub fn eval_grad(gd: &dyn GradientDiscretisation, v: &DofVector, x: Point) -> Option<Vec2> {
    gd.locate_piece(x).map(|ip| eval_grad_in_piece(gd, v, ip, x))
}

/// Gram matrices, mean functional and quadrature of a gradient
/// discretisation; built once, immutable afterwards.
pub struct GdMatrices {
    pub gram_pi: SparseMatrix,
    pub gram_grad: SparseMatrix,
    /// `mean[i] = int Pi e_i`.
    pub mean: Vec<f64>,
    pub quad: TriRule,
    /// Uniform piece subdivisions used when integrating non-polynomial
    /// fields (the defect functionals).
    pub defect_subdivisions: usize,
    dofs: usize,
}

/// Operator of the squared discrete norm: `G v = Gram_grad v + (m.v) m`.
pub struct NormGramOperator<'a> {
    matrices: &'a GdMatrices,
}

impl LinearOperator for NormGramOperator<'_> {
    fn dim(&self) -> usize {
        self.matrices.dofs
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.matrices.gram_grad.apply(x, out);
        let mx = linalg::dot(&self.matrices.mean, x);
        for (o, m) in out.iter_mut().zip(&self.matrices.mean) {
            *o += mx * m;
        }
    }
    fn preconditioner_diagonal(&self) -> Vec<f64> {
        let mut d = self.matrices.gram_grad.diagonal();
        for (di, m) in d.iter_mut().zip(&self.matrices.mean) {
            *di += m * m;
        }
        d
    }
}

impl GdMatrices {
    /// Assemble with a rule exact for polynomials up to `quad_degree`
    /// (all reconstructions here are piecewise polynomial of degree <= 1,
    /// so the default degree 4 integrates every product exactly).
    pub fn build(gd: &dyn GradientDiscretisation, quad_degree: usize) -> Self {
        Self::build_with(gd, quad_degree, 1)
    }

    /// Like [`GdMatrices::build`] with `subdivisions` uniform splits of
    /// each piece when integrating the non-polynomial defect fields.
    pub fn build_with(
        gd: &dyn GradientDiscretisation,
        quad_degree: usize,
        subdivisions: usize,
    ) -> Self {
        let quad = TriRule::of_degree(quad_degree);
        let n = gd.dof_count();
        let mut trip_pi = Vec::new();
        let mut trip_grad = Vec::new();
        let mut mean = vec![0.0; n];
        let mut row_pi = Vec::new();
        let mut row_grad = Vec::new();
        for ip in 0..gd.piece_count() {
            let tri = gd.piece(ip).tri;
            for (x, w) in quad.on(&tri) {
                row_pi.clear();
                row_grad.clear();
                gd.pi_basis(ip, x, &mut row_pi);
                gd.grad_basis(ip, x, &mut row_grad);
                for &(i, bi) in &row_pi {
                    mean[i] += w * bi;
                    for &(j, bj) in &row_pi {
                        trip_pi.push((i, j, w * bi * bj));
                    }
                }
                for &(i, gi) in &row_grad {
                    for &(j, gj) in &row_grad {
                        trip_grad.push((i, j, w * gi.dot(&gj)));
                    }
                }
            }
        }
        let gram_pi = SparseMatrix::assemble(n, &trip_pi).expect("in-range indices");
        let gram_grad = SparseMatrix::assemble(n, &trip_grad).expect("in-range indices");
        Self {
            gram_pi,
            gram_grad,
            mean,
            quad,
            defect_subdivisions: subdivisions.max(1),
            dofs: n,
        }
    }

    pub fn dof_count(&self) -> usize {
        self.dofs
    }

    fn check_len(&self, v: &DofVector) -> Result<(), GdmError> {
        if v.len() != self.dofs {
            return Err(GdmError::SizeMismatch { len: v.len(), expected: self.dofs });
        }
        Ok(())
    }

    /// `int Pi v` over the domain.
    pub fn mean_value(&self, v: &DofVector) -> Result<f64, GdmError> {
        self.check_len(v)?;
        Ok(linalg::dot(&self.mean, &v.0))
    }

    /// `|Pi v|_{L2}`.
    pub fn pi_l2(&self, v: &DofVector) -> Result<f64, GdmError> {
        self.check_len(v)?;
        let av = self.gram_pi.apply_vec(&v.0);
        Ok(linalg::dot(&av, &v.0).max(0.0).sqrt())
    }

    /// `|Grad v|_{L2}`.
    pub fn grad_l2(&self, v: &DofVector) -> Result<f64, GdmError> {
        self.check_len(v)?;
        let av = self.gram_grad.apply_vec(&v.0);
        Ok(linalg::dot(&av, &v.0).max(0.0).sqrt())
    }

    /// The discrete norm `(|Grad v|^2 + (int Pi v)^2)^{1/2}`.
    pub fn gd_norm(&self, v: &DofVector) -> Result<f64, GdmError> {
        let g = self.grad_l2(v)?;
        let m = self.mean_value(v)?;
        Ok((g * g + m * m).sqrt())
    }

    pub fn norm_operator(&self) -> NormGramOperator<'_> {
        NormGramOperator { matrices: self }
    }

    fn defect_tris(&self, gd: &dyn GradientDiscretisation, ip: usize) -> Vec<Triangle> {
        let tri = gd.piece(ip).tri;
        if self.defect_subdivisions > 1 {
            crate::quadrature::subdivide(&tri, self.defect_subdivisions)
        } else {
            vec![tri]
        }
    }

    /// Coercivity constant `C = max_v |Pi v|_{L2} / |v|`, the square root
    /// of the top generalized eigenvalue of the pencil
    /// (Gram_pi, norm Gram). Power iteration with relative tolerance 1e-8,
    /// capped at 10000 iterations.
    pub fn coercivity_constant(&self) -> Result<f64, GdmError> {
        let n = self.dofs;
        let op = self.norm_operator();
        let cfg = SolverConfig { tol: 1e-12, ..SolverConfig::default() };
        // Deterministic start vector without accidental symmetries.
        let mut x: Vec<f64> = (0..n)
            .map(|i| 1.0 + ((i.wrapping_mul(2654435761)) % 1000) as f64 / 1000.0)
            .collect();
        let nx = linalg::norm(&x);
        x.iter_mut().for_each(|v| *v /= nx);
        let mut lambda_old = 0.0;
        for it in 0..10_000 {
            let bx = self.gram_pi.apply_vec(&x);
            let num = linalg::dot(&bx, &x);
            let den = {
                let mut out = vec![0.0; n];
                op.apply(&x, &mut out);
                linalg::dot(&out, &x)
            };
            if !(den > 0.0) {
                return Err(GdmError::SingularNormGram(format!(
                    "norm quadratic form evaluated to {den:.3e} on a unit vector"
                )));
            }
            let lambda = num / den;
            if it > 0 && (lambda - lambda_old).abs() <= 1e-8 * lambda.abs().max(1e-300) {
                return Ok(lambda.max(0.0).sqrt());
            }
            lambda_old = lambda;
            let (y, _) = linalg::solve_spd(&op, &bx, &cfg).map_err(|e| match e {
                linalg::LinalgError::NoConvergence { .. } => {
                    GdmError::SingularNormGram(format!("{e}"))
                }
                other => GdmError::Linalg(other),
            })?;
            let ny = linalg::norm(&y);
            if ny == 0.0 {
                // Pi vanishes on every iterate: the constant is 0.
                return Ok(0.0);
            }
            x = y.iter().map(|v| v / ny).collect();
        }
        Err(GdmError::PowerIterationStalled(10_000))
    }

    /// Consistency defect
    /// `S(phi) = |Pi v - phi|_{L2} + |Grad v - grad phi|_{L2}` where `v`
    /// minimises the sum of squares (a least-squares surrogate of the exact
    /// minimiser of the sum of norms; upper bound within a factor sqrt 2).
    pub fn consistency_defect(
        &self,
        gd: &dyn GradientDiscretisation,
        phi: &dyn H1Field,
    ) -> Result<f64, GdmError> {
        let n = self.dofs;
        let mut b = vec![0.0; n];
        let mut row_pi = Vec::new();
        let mut row_grad = Vec::new();
        for ip in 0..gd.piece_count() {
            for tri in self.defect_tris(gd, ip) {
                for (x, w) in self.quad.on(&tri) {
                    row_pi.clear();
                    row_grad.clear();
                    gd.pi_basis(ip, x, &mut row_pi);
                    gd.grad_basis(ip, x, &mut row_grad);
                    let f = phi.value(x);
                    let g = phi.gradient(x);
                    for &(i, bi) in &row_pi {
                        b[i] += w * bi * f;
                    }
                    for &(i, gi) in &row_grad {
                        b[i] += w * gi.dot(&g);
                    }
                }
            }
        }
        // Normal equations of the joint least-squares problem.
        let ls = LsOperator { m: self };
        let cfg = SolverConfig { tol: 1e-12, ..SolverConfig::default() };
        let (v, _) = linalg::solve_spd(&ls, &b, &cfg)?;
        let v = DofVector(v);
        // Evaluate both error norms pointwise (cancellation-free).
        let mut err_pi = 0.0;
        let mut err_grad = 0.0;
        for ip in 0..gd.piece_count() {
            for tri in self.defect_tris(gd, ip) {
                for (x, w) in self.quad.on(&tri) {
                    let d = eval_pi_in_piece(gd, &v, ip, x) - phi.value(x);
                    err_pi += w * d * d;
                    let dg = eval_grad_in_piece(gd, &v, ip, x) - phi.gradient(x);
                    err_grad += w * dg.norm_squared();
                }
            }
        }
        Ok(err_pi.max(0.0).sqrt() + err_grad.max(0.0).sqrt())
    }

    /// Conformity defect
    /// `W(psi) = max_v |int (Grad v . psi + Pi v div psi)| / |v|`,
    /// computed as `sqrt(b . G^{-1} b)` with `b` the assembled functional
    /// and `G` the norm Gram matrix (CG to relative residual 1e-10).
    ///
    /// In the no-flow setting the natural test fields satisfy
    /// `psi . n = 0` on the boundary; fields violating that carry a
    /// boundary term in the continuous Stokes formula and their defect
    /// need not vanish under refinement.
    pub fn conformity_defect(
        &self,
        gd: &dyn GradientDiscretisation,
        psi: &dyn HdivField,
    ) -> Result<f64, GdmError> {
        let n = self.dofs;
        let mut b = vec![0.0; n];
        let mut row_pi = Vec::new();
        let mut row_grad = Vec::new();
        for ip in 0..gd.piece_count() {
            for tri in self.defect_tris(gd, ip) {
                for (x, w) in self.quad.on(&tri) {
                    row_pi.clear();
                    row_grad.clear();
                    gd.pi_basis(ip, x, &mut row_pi);
                    gd.grad_basis(ip, x, &mut row_grad);
                    let p = psi.value(x);
                    let d = psi.divergence(x);
                    for &(i, gi) in &row_grad {
                        b[i] += w * gi.dot(&p);
                    }
                    for &(i, bi) in &row_pi {
                        b[i] += w * bi * d;
                    }
                }
            }
        }
        let op = self.norm_operator();
        let cfg = SolverConfig { tol: 1e-10, ..SolverConfig::default() };
        let (x, _) = linalg::solve_spd(&op, &b, &cfg).map_err(|e| match e {
            linalg::LinalgError::NoConvergence { .. } => GdmError::SingularNormGram(format!("{e}")),
            other => GdmError::Linalg(other),
        })?;
        Ok(linalg::dot(&b, &x).max(0.0).sqrt())
    }
}

/// Operator of the least-squares normal equations `Gram_pi + Gram_grad`.
struct LsOperator<'a> {
    m: &'a GdMatrices,
}

impl LinearOperator for LsOperator<'_> {
    fn dim(&self) -> usize {
        self.m.dofs
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.m.gram_pi.apply(x, out);
        let mut tmp = vec![0.0; x.len()];
        self.m.gram_grad.apply(x, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += t;
        }
    }
    fn preconditioner_diagonal(&self) -> Vec<f64> {
        let mut d = self.m.gram_pi.diagonal();
        for (di, g) in d.iter_mut().zip(self.m.gram_grad.diagonal()) {
            *di += g;
        }
        d
    }
}

/// Time discretisation: strictly increasing steps from 0 to the final time.
#[derive(Clone, Debug)]
pub struct TimeSteps {
    times: Vec<f64>,
}

impl TimeSteps {
    pub fn new(times: Vec<f64>) -> Option<Self> {
        if times.len() < 2 || times.windows(2).any(|w| w[1] <= w[0]) {
            return None;
        }
        Some(Self { times })
    }

    pub fn uniform(t_end: f64, n: usize) -> Self {
        let times = (0..=n).map(|i| t_end * i as f64 / n as f64).collect();
        Self { times }
    }

    /// Number of intervals.
    pub fn step_count(&self) -> usize {
        self.times.len() - 1
    }

    pub fn time(&self, n: usize) -> f64 {
        self.times[n]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// `delta t^{(n+1/2)} = t^{(n+1)} - t^{(n)}`.
    pub fn delta(&self, n: usize) -> f64 {
        self.times[n + 1] - self.times[n]
    }

    pub fn max_delta(&self) -> f64 {
        (0..self.step_count()).map(|n| self.delta(n)).fold(0.0, f64::max)
    }

    /// Measured bound on consecutive step ratios,
    /// `delta^{(n+1/2)} <= M_t delta^{(n-1/2)}`.
    pub fn step_ratio_bound(&self) -> f64 {
        (1..self.step_count())
            .map(|n| self.delta(n) / self.delta(n - 1))
            .fold(0.0, f64::max)
    }

    /// Interval index `n` such that `t` lies in `(t^{(n)}, t^{(n+1)}]`;
    /// `t = 0` maps to the first interval.
    pub fn interval_of(&self, t: f64) -> usize {
        let n = self.step_count();
        for i in 0..n {
            if t <= self.times[i + 1] {
                return i;
            }
        }
        n - 1
    }
}

/// A space-time gradient discretisation: a spatial GD plus time steps.
/// The interpolants live on the spatial GD.
pub struct SpaceTimeGd<'a> {
    pub gd: &'a dyn GradientDiscretisation,
    pub times: TimeSteps,
}

impl<'a> SpaceTimeGd<'a> {
    pub fn new(gd: &'a dyn GradientDiscretisation, times: TimeSteps) -> Self {
        Self { gd, times }
    }
}

/// One dof vector per time step with the space-time evaluators: `Pi` is
/// piecewise constant in time using the right endpoint (`z^{(n+1)}` on
/// `(t^{(n)}, t^{(n+1)}]`), `Pi~` the left endpoint (`z^{(n)}`), and the
/// gradient follows the right-endpoint convention.
pub struct SpaceTimeField {
    pub steps: Vec<DofVector>,
}

impl SpaceTimeField {
    pub fn new(steps: Vec<DofVector>) -> Self {
        Self { steps }
    }

    pub fn eval_pi(
        &self,
        gd: &dyn GradientDiscretisation,
        times: &TimeSteps,
        x: Point,
        t: f64,
    ) -> Option<f64> {
        let n = times.interval_of(t);
        eval_pi(gd, &self.steps[n + 1], x)
    }

    pub fn eval_pi_tilde(
        &self,
        gd: &dyn GradientDiscretisation,
        times: &TimeSteps,
        x: Point,
        t: f64,
    ) -> Option<f64> {
        let n = times.interval_of(t);
        eval_pi(gd, &self.steps[n], x)
    }

    pub fn eval_grad(
        &self,
        gd: &dyn GradientDiscretisation,
        times: &TimeSteps,
        x: Point,
        t: f64,
    ) -> Option<Vec2> {
        let n = times.interval_of(t);
        eval_grad(gd, &self.steps[n + 1], x)
    }
}
