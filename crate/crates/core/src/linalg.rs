//! Sparse storage, SPD solves and a generic conjugate gradient.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix, CsrMatrix};
use serde::{Deserialize, Serialize};

pub type Sparse = CsrMatrix<f64>;

/// Builds an `n × m` CSR matrix from triplets; duplicate entries are summed.
pub fn csr_from_triplets(n: usize, m: usize, triplets: &[(usize, usize, f64)]) -> Sparse {
    let mut coo = CooMatrix::new(n, m);
    for &(i, j, v) in triplets {
        coo.push(i, j, v);
    }
    CsrMatrix::from(&coo)
}

pub fn zero_matrix(n: usize) -> Sparse {
    CsrMatrix::zeros(n, n)
}

/// `y = A x`.
pub fn matvec(a: &Sparse, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.nrows()];
    for (i, row) in a.row_iter().enumerate() {
        let mut s = 0.0;
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            s += v * x[j];
        }
        y[i] = s;
    }
    y
}

/// `y = Aᵀ x`.
pub fn matvec_t(a: &Sparse, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; a.ncols()];
    for (i, row) in a.row_iter().enumerate() {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        for (&j, &v) in row.col_indices().iter().zip(row.values()) {
            y[j] += v * xi;
        }
    }
    y
}

pub fn to_dense(a: &Sparse) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(a.nrows(), a.ncols());
    for (i, j, v) in a.triplet_iter() {
        d[(i, j)] += *v;
    }
    d
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, x), y)| w * x * y).sum()
}

/// `y += s x`.
pub fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn scaled(s: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| s * v).collect()
}

/// Largest absolute entry of `A − Aᵀ`.
pub fn asymmetry(a: &Sparse) -> f64 {
    let d = to_dense(a);
    let mut worst: f64 = 0.0;
    for i in 0..d.nrows() {
        for j in 0..i {
            worst = worst.max((d[(i, j)] - d[(j, i)]).abs());
        }
    }
    worst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    /// Sparse Cholesky factorization, reused across right-hand sides.
    Direct,
    /// Jacobi-preconditioned conjugate gradient.
    ConjugateGradient,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub kind: SolverKind,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { kind: SolverKind::Direct, tol: 1e-12, max_iter: 10_000 }
    }
}

/// Solver for one symmetric positive definite matrix.
pub enum SpdSolver {
    Direct(CscCholesky<f64>),
    Iterative { matrix: Sparse, inv_diag: Vec<f64>, tol: f64, max_iter: usize },
}

impl SpdSolver {
    pub fn new(a: &Sparse, opts: &SolverOptions) -> Result<Self> {
        match opts.kind {
            SolverKind::Direct => {
                let csc = CscMatrix::from(a);
                let chol = CscCholesky::factor(&csc)
                    .map_err(|e| Error::Numerical(format!("Cholesky factorization failed: {e:?}")))?;
                Ok(SpdSolver::Direct(chol))
            }
            SolverKind::ConjugateGradient => {
                let mut inv_diag = vec![0.0; a.nrows()];
                for (i, j, v) in a.triplet_iter() {
                    if i == j {
                        inv_diag[i] += *v;
                    }
                }
                for d in inv_diag.iter_mut() {
                    if *d <= 0.0 {
                        return Err(Error::Numerical("non-positive diagonal in SPD matrix".into()));
                    }
                    *d = 1.0 / *d;
                }
                Ok(SpdSolver::Iterative {
                    matrix: a.clone(),
                    inv_diag,
                    tol: opts.tol,
                    max_iter: opts.max_iter,
                })
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        match self {
            SpdSolver::Direct(chol) => {
                let rhs = DMatrix::from_column_slice(b.len(), 1, b);
                let x = chol.solve(&rhs);
                Ok(x.as_slice().to_vec())
            }
            SpdSolver::Iterative { matrix, inv_diag, tol, max_iter } => {
                let out = conjugate_gradient(
                    |x| matvec(matrix, x),
                    |r| r.iter().zip(inv_diag).map(|(a, b)| a * b).collect(),
                    dot,
                    b,
                    None,
                    *tol,
                    *max_iter,
                );
                if out.converged {
                    Ok(out.x)
                } else {
                    Err(Error::Numerical(format!(
                        "conjugate gradient stalled at relative residual {:.3e} after {} iterations",
                        out.relative_residual, out.iterations
                    )))
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
    /// Extreme Ritz-value estimate of the condition number from the Lanczos coefficients.
    pub condition_estimate: f64,
}

/// Preconditioned conjugate gradient for an operator that is self-adjoint in `inner`.
/// Stops when `‖r‖ ≤ tol·‖b‖` in the norm induced by `inner`.
pub fn conjugate_gradient<A, P, I>(
    apply: A,
    precond: P,
    inner: I,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> CgOutcome
where
    A: Fn(&[f64]) -> Vec<f64>,
    P: Fn(&[f64]) -> Vec<f64>,
    I: Fn(&[f64], &[f64]) -> f64,
{
    let n = b.len();
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let b_norm = inner(b, b).max(0.0).sqrt();
    if b_norm == 0.0 {
        return CgOutcome {
            x: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
            condition_estimate: 1.0,
        };
    }
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut rel = inner(&r, &r).max(0.0).sqrt() / b_norm;
    if rel <= tol {
        return CgOutcome { x, iterations: 0, relative_residual: rel, converged: true, condition_estimate: 1.0 };
    }
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = inner(&r, &z);
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut it = 0;
    while it < max_iter {
        it += 1;
        let ap = apply(&p);
        let pap = inner(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rz / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        alphas.push(alpha);
        rel = inner(&r, &r).max(0.0).sqrt() / b_norm;
        if rel <= tol {
            break;
        }
        z = precond(&r);
        let rz_new = inner(&r, &z);
        let beta = rz_new / rz;
        betas.push(beta);
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    CgOutcome {
        x,
        iterations: it,
        relative_residual: rel,
        converged: rel <= tol,
        condition_estimate: lanczos_condition(&alphas, &betas),
    }
}

fn lanczos_condition(alphas: &[f64], betas: &[f64]) -> f64 {
    let k = alphas.len();
    if k == 0 {
        return 1.0;
    }
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        let mut d = 1.0 / alphas[i];
        if i > 0 {
            d += betas[i - 1] / alphas[i - 1];
        }
        t[(i, i)] = d;
        if i + 1 < k && i < betas.len() {
            let off = betas[i].sqrt() / alphas[i];
            t[(i, i + 1)] = off;
            t[(i + 1, i)] = off;
        }
    }
    let eig = t.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Writes a sparse matrix in Matrix Market coordinate format.
pub fn write_matrix_market<W: std::io::Write>(a: &Sparse, mut w: W) -> std::io::Result<()> {
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", a.nrows(), a.ncols(), a.nnz())?;
    for (i, j, v) in a.triplet_iter() {
        writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian(n: usize) -> Sparse {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        csr_from_triplets(n, n, &t)
    }

    #[test]
    fn direct_and_cg_agree() {
        let a = laplacian(20);
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let d = SpdSolver::new(&a, &SolverOptions::default()).unwrap().solve(&b).unwrap();
        let opts = SolverOptions { kind: SolverKind::ConjugateGradient, ..Default::default() };
        let c = SpdSolver::new(&a, &opts).unwrap().solve(&b).unwrap();
        for (x, y) in d.iter().zip(&c) {
            assert!((x - y).abs() < 1e-9);
        }
        let r = matvec(&a, &d);
        for (x, y) in r.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_product_matches_dense() {
        let a = csr_from_triplets(3, 2, &[(0, 1, 2.0), (2, 0, -1.0), (1, 1, 3.0), (1, 1, 1.0)]);
        let y = matvec_t(&a, &[1.0, 2.0, 3.0]);
        assert_eq!(y, vec![-3.0, 10.0]);
    }

    #[test]
    fn condition_estimate_of_diagonal() {
        let a = csr_from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 10.0), (2, 2, 100.0)]);
        let out = conjugate_gradient(|x| matvec(&a, x), |r| r.to_vec(), dot, &[1.0, 1.0, 1.0], None, 1e-14, 50);
        assert!(out.converged);
        assert!((out.condition_estimate - 100.0).abs() < 1e-6);
    }
}
