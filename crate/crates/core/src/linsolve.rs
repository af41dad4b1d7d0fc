//! Direct solvers for the symmetric systems arising from the discrete
//! state, adjoint and optimality equations.
//!
//! Everything is built on one envelope (skyline) `L D L^T` factorization
//! with reverse Cuthill-McKee ordering. It is used for symmetric positive
//! definite matrices and for symmetric quasi-definite saddle-point matrices
//! (positive definite (1,1) block, negative definite (2,2) block), both of
//! which factor stably without pivoting.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::{dot, norm2, SparseMatrix};

pub const DEFAULT_SOLVE_TOL: f64 = 1e-12;
pub const DEFAULT_EIGEN_TOL: f64 = 1e-10;
pub const DEFAULT_REFINEMENT_STEPS: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("factorization breakdown at pivot {index} (value {pivot:e}); matrix is singular or not {expected}")]
    Breakdown {
        index: usize,
        pivot: f64,
        expected: &'static str,
    },
    #[error("no convergence after {iterations} iterations (residual {residual:e}, tolerance {tol:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        tol: f64,
    },
    #[error("invalid tolerance {0}")]
    InvalidTolerance(f64),
}

/// Pivot signs the factorization must produce.
#[derive(Debug, Clone, Copy)]
pub enum Definiteness {
    Positive,
    /// `positive(i)` tells whether original index `i` belongs to the
    /// positive definite block; all other pivots must be negative.
    QuasiDefinite { positive: fn(usize) -> bool },
}

/// Reverse Cuthill-McKee permutation of the symmetric pattern of `a`:
/// `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &SparseMatrix) -> Vec<usize> {
    let n = a.nrows();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| a.row(i).map(|(j, _)| j).filter(|&j| j != i).collect())
        .collect();
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);

    let bfs_levels = |start: usize, visited: &[bool]| -> (usize, usize) {
        // returns (eccentricity, a min-degree node of the last level)
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::from([start]);
        dist[start] = 0;
        let mut last = start;
        while let Some(u) = queue.pop_front() {
            last = u;
            for &v in &adj[u] {
                if dist[v] == usize::MAX && !visited[v] {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        let ecc = dist[last];
        let best = (0..n)
            .filter(|&v| dist[v] == ecc)
            .min_by_key(|&v| (degree[v], v))
            .unwrap_or(last);
        (ecc, best)
    };

    while order.len() < n {
        let seed = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (degree[v], v))
            .expect("unvisited node exists");
        // pseudo-peripheral node search
        let mut root = seed;
        let (mut ecc, mut cand) = bfs_levels(root, &visited);
        for _ in 0..8 {
            let (e2, c2) = bfs_levels(cand, &visited);
            if e2 > ecc {
                root = cand;
                ecc = e2;
                cand = c2;
            } else {
                break;
            }
        }
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(u) = queue.pop_front() {
            order.push(u);
            let mut nbrs: Vec<usize> = adj[u].iter().copied().filter(|&v| !visited[v]).collect();
            nbrs.sort_by_key(|&v| (degree[v], v));
            for v in nbrs {
                visited[v] = true;
                queue.push_back(v);
            }
        }
    }
    order.reverse();
    order
}

/// Envelope `L D L^T` factorization of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct LdltFactor {
    n: usize,
    /// perm[new] = old
    perm: Vec<usize>,
    /// first column of the envelope of each (permuted) row
    first: Vec<usize>,
    /// offsets into `lower` for each row
    offset: Vec<usize>,
    lower: Vec<f64>,
    diag: Vec<f64>,
}

impl LdltFactor {
    pub fn new(a: &SparseMatrix, kind: Definiteness) -> Result<Self, SolveError> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(SolveError::DimensionMismatch(format!(
                "{}x{} matrix is not square",
                n,
                a.ncols()
            )));
        }
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for old in 0..n {
            let i = inv[old];
            for (j_old, _) in a.row(old) {
                let j = inv[j_old];
                if j < i {
                    first[i] = first[i].min(j);
                }
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        offset.push(0);
        for i in 0..n {
            offset.push(offset[i] + (i - first[i]));
        }
        let mut lower = vec![0.0; offset[n]];
        let mut diag = vec![0.0; n];
        for old in 0..n {
            let i = inv[old];
            for (j_old, v) in a.row(old) {
                let j = inv[j_old];
                if j < i {
                    lower[offset[i] + (j - first[i])] = v;
                } else if j == i {
                    diag[i] = v;
                }
            }
        }
        let scale = diag.iter().fold(0.0f64, |m, d| m.max(d.abs())).max(f64::MIN_POSITIVE);
        let threshold = 1e3 * f64::EPSILON * scale;

        // Row-oriented envelope LDL^T. `work[k]` holds L(i,k) * D(k) for the
        // current row before the division by D.
        let mut work = vec![0.0; n];
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let lj = &lower[offset[j]..offset[j + 1]];
                let mut s = lower[offset[i] + (j - fi)];
                for k in k0..j {
                    s -= work[k] * lj[k - fj];
                }
                work[j] = s;
            }
            let mut d = diag[i];
            for j in fi..i {
                let l = work[j] / diag[j];
                lower[offset[i] + (j - fi)] = l;
                d -= l * work[j];
            }
            let expect_positive = match kind {
                Definiteness::Positive => true,
                Definiteness::QuasiDefinite { positive } => positive(perm[i]),
            };
            let ok = if expect_positive { d > threshold } else { d < -threshold };
            if !ok {
                return Err(SolveError::Breakdown {
                    index: perm[i],
                    pivot: d,
                    expected: if matches!(kind, Definiteness::Positive) {
                        "positive definite"
                    } else {
                        "quasi-definite"
                    },
                });
            }
            diag[i] = d;
        }
        Ok(LdltFactor {
            n,
            perm,
            first,
            offset,
            lower,
            diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n, "rhs length mismatch");
        let mut y: Vec<f64> = self.perm.iter().map(|&old| rhs[old]).collect();
        for i in 0..self.n {
            let fi = self.first[i];
            let li = &self.lower[self.offset[i]..self.offset[i + 1]];
            let s: f64 = li.iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] -= s;
        }
        for i in 0..self.n {
            y[i] /= self.diag[i];
        }
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let yi = y[i];
            let li = &self.lower[self.offset[i]..self.offset[i + 1]];
            for (k, l) in li.iter().enumerate() {
                y[fi + k] -= l * yi;
            }
        }
        let mut x = vec![0.0; self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Solve followed by iterative refinement until the relative residual
    /// meets `tol` or `max_steps` factor solves have been spent.
    pub fn solve_refined(
        &self,
        a: &SparseMatrix,
        rhs: &[f64],
        tol: f64,
        max_steps: usize,
    ) -> SolveReport {
        let rhs_norm = norm2(rhs);
        if rhs_norm == 0.0 {
            return SolveReport {
                solution: vec![0.0; self.n],
                iterations: 0,
                residual_norm: 0.0,
                converged: true,
            };
        }
        let mut x = self.solve(rhs);
        let mut iterations = 1;
        let mut rel = relative_residual(a, &x, rhs, rhs_norm);
        while rel > tol && iterations < max_steps {
            let r = a.residual(&x, rhs);
            let dx = self.solve(&r);
            let candidate: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let rel_new = relative_residual(a, &candidate, rhs, rhs_norm);
            iterations += 1;
            if rel_new >= rel {
                break;
            }
            x = candidate;
            rel = rel_new;
        }
        SolveReport {
            solution: x,
            iterations,
            residual_norm: rel,
            converged: rel <= tol,
        }
    }
}

fn relative_residual(a: &SparseMatrix, x: &[f64], rhs: &[f64], rhs_norm: f64) -> f64 {
    norm2(&a.residual(x, rhs)) / rhs_norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solution: Vec<f64>,
    /// Factor solves performed (initial solve plus refinement steps).
    pub iterations: usize,
    /// `||A x - rhs|| / ||rhs||`, zero when `rhs = 0`.
    pub residual_norm: f64,
    pub converged: bool,
}

/// Solves `A x = rhs` for symmetric positive definite `A`.
///
/// Non-convergence within `max_iter` factor solves is an error, not a
/// silent result.
pub fn solve_spd(
    a: &SparseMatrix,
    rhs: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport, SolveError> {
    if !(tol > 0.0) {
        return Err(SolveError::InvalidTolerance(tol));
    }
    if a.nrows() != a.ncols() || rhs.len() != a.nrows() {
        return Err(SolveError::DimensionMismatch(format!(
            "{}x{} matrix, rhs of length {}",
            a.nrows(),
            a.ncols(),
            rhs.len()
        )));
    }
    let factor = LdltFactor::new(a, Definiteness::Positive)?;
    let report = factor.solve_refined(a, rhs, tol, max_iter.max(1));
    if report.converged {
        Ok(report)
    } else {
        Err(SolveError::NotConverged {
            iterations: report.iterations,
            residual: report.residual_norm,
            tol,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    /// Normalized so that `v^T B v = 1`.
    pub vector: Vec<f64>,
    pub iterations: usize,
    /// `||A v - value B v|| / ||value B v||` at exit.
    pub residual: f64,
}

const EIGEN_MAX_ITER: usize = 20_000;

fn check_pencil(a: &SparseMatrix, b: &SparseMatrix, tol: f64) -> Result<(), SolveError> {
    if !(tol > 0.0) {
        return Err(SolveError::InvalidTolerance(tol));
    }
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || b.ncols() != n {
        return Err(SolveError::DimensionMismatch(format!(
            "pencil of {}x{} and {}x{}",
            n,
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    if n == 0 {
        return Err(SolveError::DimensionMismatch("empty pencil".into()));
    }
    Ok(())
}

/// Deterministic start vector with components in every direction.
fn start_vector(n: usize) -> Vec<f64> {
    (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.754_877_666).sin()).collect()
}

fn normalize_b(b: &SparseMatrix, v: &mut [f64]) {
    let s = b.quad_form(v).sqrt();
    v.iter_mut().for_each(|x| *x /= s);
}

/// `min_{v != 0} (v^T A v) / (v^T B v)` by inverse iteration on the pencil.
///
/// `A` must be positive definite for the factorization; a singular `A`
/// (smallest eigenvalue zero) is reported as breakdown.
pub fn smallest_generalized_eigenvalue(
    a: &SparseMatrix,
    b: &SparseMatrix,
    tol: f64,
) -> Result<EigenPair, SolveError> {
    check_pencil(a, b, tol)?;
    let factor = LdltFactor::new(a, Definiteness::Positive)?;
    let mut v = start_vector(a.nrows());
    normalize_b(b, &mut v);
    let mut residual = f64::INFINITY;
    for it in 1..=EIGEN_MAX_ITER {
        let bv = b.mul_vec(&v);
        let mut w = factor.solve(&bv);
        normalize_b(b, &mut w);
        v = w;
        let av = a.mul_vec(&v);
        let bv = b.mul_vec(&v);
        let value = dot(&v, &av); // v^T B v = 1
        let r: Vec<f64> = av.iter().zip(&bv).map(|(p, q)| p - value * q).collect();
        residual = norm2(&r) / (value.abs() * norm2(&bv));
        if residual <= tol {
            return Ok(EigenPair {
                value,
                vector: v,
                iterations: it,
                residual,
            });
        }
    }
    Err(SolveError::NotConverged {
        iterations: EIGEN_MAX_ITER,
        residual,
        tol,
    })
}

/// `max_{v != 0} (v^T A v) / (v^T B v)` by power iteration on `B^{-1} A`.
/// `B` must be positive definite, `A` positive semidefinite.
pub fn largest_generalized_eigenvalue(
    a: &SparseMatrix,
    b: &SparseMatrix,
    tol: f64,
) -> Result<EigenPair, SolveError> {
    check_pencil(a, b, tol)?;
    let factor = LdltFactor::new(b, Definiteness::Positive)?;
    let mut v = start_vector(a.nrows());
    normalize_b(b, &mut v);
    let mut residual = f64::INFINITY;
    for it in 1..=EIGEN_MAX_ITER {
        let av = a.mul_vec(&v);
        let mut w = factor.solve(&av);
        let s = b.quad_form(&w).sqrt();
        if s == 0.0 {
            return Err(SolveError::Breakdown {
                index: 0,
                pivot: 0.0,
                expected: "nonzero (A is zero on the start space)",
            });
        }
        w.iter_mut().for_each(|x| *x /= s);
        v = w;
        let av = a.mul_vec(&v);
        let bv = b.mul_vec(&v);
        let value = dot(&v, &av);
        let r: Vec<f64> = av.iter().zip(&bv).map(|(p, q)| p - value * q).collect();
        residual = norm2(&r) / (value.abs() * norm2(&bv));
        if residual <= tol {
            return Ok(EigenPair {
                value,
                vector: v,
                iterations: it,
                residual,
            });
        }
    }
    Err(SolveError::NotConverged {
        iterations: EIGEN_MAX_ITER,
        residual,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian_1d(n: usize) -> SparseMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i > 0 {
                t.push((i, i - 1, -1.0));
                t.push((i - 1, i, -1.0));
            }
        }
        SparseMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn identity_system() {
        let a = SparseMatrix::identity(5);
        let mut e1 = vec![0.0; 5];
        e1[0] = 1.0;
        let rep = solve_spd(&a, &e1, DEFAULT_SOLVE_TOL, 10).unwrap();
        assert_eq!(rep.solution, e1);
        assert!(rep.iterations <= 1);
        assert!(rep.converged);
    }

    #[test]
    fn zero_rhs() {
        let a = laplacian_1d(4);
        let rep = solve_spd(&a, &[0.0; 4], DEFAULT_SOLVE_TOL, 10).unwrap();
        assert_eq!(rep.solution, vec![0.0; 4]);
        assert_eq!(rep.iterations, 0);
        assert!(rep.converged);
    }

    #[test]
    fn errors() {
        let a = laplacian_1d(3);
        assert!(matches!(solve_spd(&a, &[1.0; 2], 1e-12, 5), Err(SolveError::DimensionMismatch(_))));
        assert!(matches!(solve_spd(&a, &[1.0; 3], 0.0, 5), Err(SolveError::InvalidTolerance(_))));
        let indefinite = SparseMatrix::from_dense(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(
            solve_spd(&indefinite, &[1.0, 0.0], 1e-12, 5),
            Err(SolveError::Breakdown { .. })
        ));
    }

    #[test]
    fn reported_residual_is_reproducible() {
        let a = laplacian_1d(50);
        let rhs: Vec<f64> = (0..50).map(|i| (i as f64).cos()).collect();
        let rep = solve_spd(&a, &rhs, 1e-13, 10).unwrap();
        let again = relative_residual(&a, &rep.solution, &rhs, norm2(&rhs));
        assert_eq!(again, rep.residual_norm);
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = laplacian_1d(17);
        let mut p = reverse_cuthill_mckee(&a);
        p.sort_unstable();
        assert_eq!(p, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn quasi_definite_factor() {
        // [[2, 1], [1, -3]]
        let k = SparseMatrix::from_dense(&[vec![2.0, 1.0], vec![1.0, -3.0]]);
        let f = LdltFactor::new(&k, Definiteness::QuasiDefinite { positive: |i| i == 0 }).unwrap();
        let x = f.solve(&[3.0, -2.0]);
        assert!((2.0 * x[0] + x[1] - 3.0).abs() < 1e-14);
        assert!((x[0] - 3.0 * x[1] + 2.0).abs() < 1e-14);
    }

    #[test]
    fn diagonal_pencil() {
        let a = SparseMatrix::from_dense(&[vec![2.0, 0.0], vec![0.0, 5.0]]);
        let b = SparseMatrix::identity(2);
        let lo = smallest_generalized_eigenvalue(&a, &b, 1e-10).unwrap();
        assert!((lo.value - 2.0).abs() < 1e-12);
        let hi = largest_generalized_eigenvalue(&a, &b, 1e-10).unwrap();
        assert!((hi.value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn identical_forms_give_one() {
        let b = laplacian_1d(6).add_scaled(1.0, &SparseMatrix::identity(6));
        let e = smallest_generalized_eigenvalue(&b, &b, 1e-10).unwrap();
        assert!((e.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_a_is_breakdown() {
        // Neumann Laplacian has constants in its kernel
        let mut a = laplacian_1d(4).to_dense();
        a[0][0] = 1.0;
        a[3][3] = 1.0;
        let a = SparseMatrix::from_dense(&a);
        let b = SparseMatrix::identity(4);
        assert!(matches!(
            smallest_generalized_eigenvalue(&a, &b, 1e-10),
            Err(SolveError::Breakdown { .. })
        ));
    }
}
