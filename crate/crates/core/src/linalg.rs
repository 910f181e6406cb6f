//! Self-contained sparse linear algebra: CSR assembly, preconditioned
//! conjugate gradients, and constrained (zero-mean) solves for the
//! pure-Neumann pressure problem.
//!
//! All reductions run in a fixed sequential order so results are
//! bit-stable for identical inputs.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("triplet index ({row}, {col}) out of range for {dim}x{dim} matrix")]
    IndexOutOfRange { row: usize, col: usize, dim: usize },
    #[error("dimension mismatch: matrix is {dim}, vector is {len}")]
    DimensionMismatch { dim: usize, len: usize },
    #[error("CG did not converge: residual {residual:.3e} after {iters} iterations (tol {tol:.3e})")]
    NoConvergence { residual: f64, iters: usize, tol: f64 },
    #[error("matrix is not symmetric: |A - A^T| probe {probe:.3e}")]
    NotSymmetric { probe: f64 },
    #[error("norm Gram matrix is singular or indefinite")]
    SingularGram,
}

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Clone, Debug)]
pub struct SparseMatrix {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    symmetric: bool,
}

impl SparseMatrix {
    /// Assemble from (row, col, value) triplets; duplicates are summed.
    /// The result is independent of the triplet order.
    pub fn assemble(dim: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, LinalgError> {
        for &(r, c, _) in triplets {
            if r >= dim || c >= dim {
                return Err(LinalgError::IndexOutOfRange { row: r, col: c, dim });
            }
        }
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); dim];
        for &(r, c, v) in triplets {
            per_row[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &mut per_row {
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = 0.0;
                while i < row.len() && row[i].0 == c {
                    v += row[i].1;
                    i += 1;
                }
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self {
            dim,
            row_ptr,
            cols,
            vals,
            symmetric: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Probe symmetry on a few deterministic pseudo-random vectors and mark
    /// the matrix symmetric if `|Ax . y - x . Ay|` stays at rounding level.
    pub fn mark_symmetric(&mut self) -> Result<(), LinalgError> {
        let n = self.dim;
        let scale: f64 = self.vals.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mut worst = 0.0f64;
        for seed in 1u64..=3 {
            let x = probe_vector(n, seed);
            let y = probe_vector(n, seed + 100);
            let ax = self.apply_vec(&x);
            let ay = self.apply_vec(&y);
            let d = dot(&ax, &y) - dot(&x, &ay);
            worst = worst.max(d.abs());
        }
        if worst > 1e-12 * scale.max(1.0) * (n as f64) {
            return Err(LinalgError::NotSymmetric { probe: worst });
        }
        self.symmetric = true;
        Ok(())
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for r in 0..self.dim {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            out[r] = s;
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.apply(x, &mut out);
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim];
        for r in 0..self.dim {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.cols[k] == r {
                    d[r] = self.vals[k];
                }
            }
        }
        d
    }

    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.dim).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |k| (r, self.cols[k], self.vals[k]))
        })
    }
}

fn probe_vector(n: usize, seed: u64) -> Vec<f64> {
    // splitmix64-style generator; enough for a symmetry probe.
    let mut s = seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1);
    (0..n)
        .map(|_| {
            s = s.wrapping_add(0x9e3779b97f4a7c15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
            z ^= z >> 31;
            (z as f64 / u64::MAX as f64) - 0.5
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Anything that can act as the operator of a CG solve.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], out: &mut [f64]);
    /// Diagonal (or an spd approximation of it) for preconditioning;
    /// entries that are not strictly positive are replaced by 1.
    fn preconditioner_diagonal(&self) -> Vec<f64> {
        vec![1.0; self.dim()]
    }
}

impl LinearOperator for SparseMatrix {
    fn dim(&self) -> usize {
        self.dim
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        SparseMatrix::apply(self, x, out)
    }
    fn preconditioner_diagonal(&self) -> Vec<f64> {
        self.diagonal()
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Preconditioner {
    None,
    Diagonal,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    /// Relative residual target.
    pub tol: f64,
    pub max_iters: usize,
    pub preconditioner: Preconditioner,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iters: 20_000,
            preconditioner: Preconditioner::Diagonal,
        }
    }
}

/// Outcome of a CG solve.
#[derive(Clone, Debug)]
pub struct SolveStats {
    pub iters: usize,
    pub residual: f64,
    /// Smallest observed curvature `p.Ap / p.p`; negative values signal a
    /// non-SPD operator.
    pub min_curvature: f64,
}

/// Preconditioned conjugate gradients for an SPD operator.
pub fn solve_spd(
    a: &dyn LinearOperator,
    b: &[f64],
    config: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats), LinalgError> {
    let n = a.dim();
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch { dim: n, len: b.len() });
    }
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((
            x,
            SolveStats {
                iters: 0,
                residual: 0.0,
                min_curvature: f64::INFINITY,
            },
        ));
    }
    let inv_diag: Vec<f64> = match config.preconditioner {
        Preconditioner::None => vec![1.0; n],
        Preconditioner::Diagonal => a
            .preconditioner_diagonal()
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
            .collect(),
    };
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut min_curv = f64::INFINITY;
    for it in 0..config.max_iters {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        let pp = dot(&p, &p);
        if pp > 0.0 {
            min_curv = min_curv.min(pap / pp);
        }
        if pap <= 0.0 {
            // Zero or negative curvature: operator not SPD on this subspace.
            return Err(LinalgError::NoConvergence {
                residual: norm(&r) / bnorm,
                iters: it,
                tol: config.tol,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let res = norm(&r) / bnorm;
        if res <= config.tol {
            return Ok((
                x,
                SolveStats {
                    iters: it + 1,
                    residual: res,
                    min_curvature: min_curv,
                },
            ));
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinalgError::NoConvergence {
        residual: norm(&r) / bnorm,
        iters: config.max_iters,
        tol: config.tol,
    })
}

/// Operator `A + tau * m m^T` used to impose the zero-mean constraint by a
/// rank-one augmentation of a consistent singular system.
struct RankOneAugmented<'a> {
    a: &'a dyn LinearOperator,
    m: &'a [f64],
    tau: f64,
}

impl LinearOperator for RankOneAugmented<'_> {
    fn dim(&self) -> usize {
        self.a.dim()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.a.apply(x, out);
        let mx = dot(self.m, x);
        for i in 0..out.len() {
            out[i] += self.tau * mx * self.m[i];
        }
    }
    fn preconditioner_diagonal(&self) -> Vec<f64> {
        let mut d = self.a.preconditioner_diagonal();
        for i in 0..d.len() {
            d[i] += self.tau * self.m[i] * self.m[i];
        }
        d
    }
}

/// Result of a constrained solve.
#[derive(Clone, Debug)]
pub struct ZeroMeanSolve {
    pub x: Vec<f64>,
    pub stats: SolveStats,
    /// Component of b along the nullspace that had to be deflected
    /// (relative to |b|); nonzero values flag incompatible data.
    pub deflected: f64,
}

/// Solve `A x = b` subject to `m . x = 0` for a symmetric PSD operator
/// whose nullspace is the constant vector. The constraint is imposed by a
/// rank-one augmentation `A + tau m m^T`, which is SPD because the
/// constants are not in the kernel of `m` (`m . 1 = |Omega| != 0`).
pub fn solve_zero_mean(
    a: &dyn LinearOperator,
    b: &[f64],
    m: &[f64],
    config: &SolverConfig,
) -> Result<ZeroMeanSolve, LinalgError> {
    let n = a.dim();
    if b.len() != n || m.len() != n {
        return Err(LinalgError::DimensionMismatch { dim: n, len: b.len().max(m.len()) });
    }
    // Deflect the nullspace component of b (constants) so the singular
    // system is consistent; report how much was removed.
    let ones_b: f64 = b.iter().sum();
    let beta = ones_b / n as f64;
    let b_defl: Vec<f64> = b.iter().map(|bi| bi - beta).collect();
    let bnorm = norm(b);
    let deflected = if bnorm > 0.0 {
        (beta * (n as f64).sqrt()) / bnorm
    } else {
        0.0
    };
    let diag = a.preconditioner_diagonal();
    let scale = diag.iter().cloned().fold(0.0, f64::max).max(1e-30);
    let mm = dot(m, m).max(1e-30);
    let aug = RankOneAugmented {
        a,
        m,
        tau: scale / mm,
    };
    let (mut x, stats) = solve_spd(&aug, &b_defl, config)?;
    // The augmented solve yields m.x = 0 up to rounding; shift along the
    // nullspace to satisfy it exactly.
    let m1: f64 = m.iter().sum();
    if m1.abs() > 0.0 {
        let shift = dot(m, &x) / m1;
        for xi in &mut x {
            *xi -= shift;
        }
    }
    Ok(ZeroMeanSolve { x, stats, deflected })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assemble_empty_is_zero() {
        let a = SparseMatrix::assemble(3, &[]).unwrap();
        assert_eq!(a.nnz(), 0);
        assert_eq!(a.apply_vec(&[1.0, 2.0, 3.0]), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn assemble_sums_duplicates() {
        let a = SparseMatrix::assemble(2, &[(0, 0, 1.0), (0, 0, 2.0)]).unwrap();
        assert_eq!(a.apply_vec(&[1.0, 0.0]), vec![3.0, 0.0]);
    }

    #[test]
    fn assemble_order_independent() {
        let t1 = [(0, 1, 2.0), (1, 0, 2.0), (0, 0, 1.0), (1, 1, 5.0), (0, 1, -0.5)];
        let mut t2 = t1;
        t2.reverse();
        let a1 = SparseMatrix::assemble(2, &t1).unwrap();
        let a2 = SparseMatrix::assemble(2, &t2).unwrap();
        assert_eq!(a1.cols, a2.cols);
        assert_eq!(a1.vals, a2.vals);
    }

    #[test]
    fn assemble_rejects_out_of_range() {
        assert!(SparseMatrix::assemble(2, &[(0, 2, 1.0)]).is_err());
    }

    #[test]
    fn identity_solve() {
        let a = SparseMatrix::assemble(3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]).unwrap();
        let b = [3.0, -1.0, 0.5];
        let (x, _) = solve_spd(&a, &b, &SolverConfig::default()).unwrap();
        for i in 0..3 {
            assert!((x[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_hand_solve() {
        // [[2,1],[1,2]] x = (1,1) has solution (1/3, 1/3).
        let a =
            SparseMatrix::assemble(2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)])
                .unwrap();
        let (x, _) = solve_spd(&a, &[1.0, 1.0], &SolverConfig::default()).unwrap();
        assert!((x[0] - 1.0 / 3.0).abs() < 1e-11);
        assert!((x[1] - 1.0 / 3.0).abs() < 1e-11);
    }

    #[test]
    fn random_spd_residual_contract() {
        // Build a deterministic SPD matrix A = L L^T + I with banded L.
        let n = 100;
        let mut trip = Vec::new();
        for i in 0..n {
            trip.push((i, i, 3.0 + (i % 7) as f64));
            if i + 1 < n {
                trip.push((i, i + 1, -1.0 + 0.1 * (i % 3) as f64));
                trip.push((i + 1, i, -1.0 + 0.1 * (i % 3) as f64));
            }
        }
        let a = SparseMatrix::assemble(n, &trip).unwrap();
        let b: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let cfg = SolverConfig::default();
        let (x, stats) = solve_spd(&a, &b, &cfg).unwrap();
        let r: Vec<f64> = a
            .apply_vec(&x)
            .iter()
            .zip(&b)
            .map(|(ax, bi)| ax - bi)
            .collect();
        assert!(norm(&r) / norm(&b) <= cfg.tol * 1.001, "residual {}", stats.residual);
        assert!(stats.min_curvature > 0.0);
    }

    #[test]
    fn zero_mean_zero_rhs() {
        let a = SparseMatrix::assemble(3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]).unwrap();
        let m = [1.0, 1.0, 1.0];
        let sol = solve_zero_mean(&a, &[0.0; 3], &m, &SolverConfig::default()).unwrap();
        assert!(norm(&sol.x) == 0.0);
    }

    #[test]
    fn path_laplacian_matches_pseudo_inverse() {
        // Graph Laplacian of the path 0-1-2, b = (1, -1, 0).
        // The zero-mean solution is (2/3, -1/3, -1/3) (dense pseudo-inverse).
        let trip = [
            (0, 0, 1.0),
            (0, 1, -1.0),
            (1, 0, -1.0),
            (1, 1, 2.0),
            (1, 2, -1.0),
            (2, 1, -1.0),
            (2, 2, 1.0),
        ];
        let a = SparseMatrix::assemble(3, &trip).unwrap();
        let m = [1.0, 1.0, 1.0];
        let sol = solve_zero_mean(&a, &[1.0, -1.0, 0.0], &m, &SolverConfig::default()).unwrap();
        // Independent oracle: dense pseudo-inverse via nalgebra SVD.
        let dense = nalgebra::Matrix3::new(1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0);
        let x_oracle = dense
            .svd(true, true)
            .solve(&nalgebra::Vector3::new(1.0, -1.0, 0.0), 1e-12)
            .unwrap();
        for i in 0..3 {
            assert!((sol.x[i] - x_oracle[i]).abs() < 1e-9, "{:?}", sol.x);
        }
        assert!((sol.x[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!(dot(&m, &sol.x).abs() < 1e-12 * norm(&sol.x));
    }

    #[test]
    fn zero_mean_rejects_constant_shift() {
        let trip = [
            (0, 0, 1.0),
            (0, 1, -1.0),
            (1, 0, -1.0),
            (1, 1, 2.0),
            (1, 2, -1.0),
            (2, 1, -1.0),
            (2, 2, 1.0),
        ];
        let a = SparseMatrix::assemble(3, &trip).unwrap();
        let m = [1.0, 1.0, 1.0];
        let sol = solve_zero_mean(&a, &[1.0, -1.0, 0.0], &m, &SolverConfig::default()).unwrap();
        let shifted: Vec<f64> = sol.x.iter().map(|v| v + 1.0).collect();
        assert!(dot(&m, &shifted).abs() > 1.0);
    }

    #[test]
    fn symmetry_probe() {
        let mut sym =
            SparseMatrix::assemble(2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 2.0)])
                .unwrap();
        assert!(sym.mark_symmetric().is_ok());
        let mut asym =
            SparseMatrix::assemble(2, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, -1.0), (1, 1, 2.0)])
                .unwrap();
        assert!(asym.mark_symmetric().is_err());
    }
}
