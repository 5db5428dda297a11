//! Sparse SPD linear algebra kernels: a direct Cholesky factorization
//! (backed by `faer`, with symbolic reuse for repeated factorizations on a
//! fixed pattern), preconditioned conjugate gradients, a dense Jacobi
//! eigensolver for small matrices, and a block inverse iteration for the
//! smallest eigenpairs of generalized problems `A x = mu M x`.
//!
//! All kernels run sequentially for a fixed operation order, so results are
//! reproducible bit for bit.

use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Par, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Once;

use crate::assembly::SparseSpdMatrix;
use crate::{Error, Result};

static FAER_SETUP: Once = Once::new();

fn faer_deterministic() {
    FAER_SETUP.call_once(|| {
        faer::set_global_parallelism(Par::Seq);
    });
}

/// Sparse Cholesky factorization of a symmetric positive definite matrix.
/// The symbolic analysis is kept so that matrices with the same pattern can
/// be refactorized cheaply.
pub struct CholeskyFactor {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    symbolic: SymbolicLlt<usize>,
    numeric: Llt<usize, f64>,
}

impl CholeskyFactor {
    pub fn new(a: &SparseSpdMatrix) -> Result<CholeskyFactor> {
        faer_deterministic();
        let n = a.dim();
        let col_ptr: Vec<usize> = a.row_ptr().to_vec();
        let row_idx: Vec<usize> = a.col_idx().iter().map(|&j| j as usize).collect();
        let symbolic_mat = SymbolicSparseColMatRef::new_checked(n, n, &col_ptr, None, &row_idx);
        let symbolic = SymbolicLlt::try_new(symbolic_mat, Side::Lower)
            .map_err(|e| Error::Linalg(format!("symbolic cholesky failed: {e:?}")))?;
        let mat = SparseColMatRef::new(symbolic_mat, a.values());
        let numeric = Llt::try_new_with_symbolic(symbolic.clone(), mat, Side::Lower)
            .map_err(|e| Error::Linalg(format!("cholesky factorization failed: {e:?}")))?;
        Ok(CholeskyFactor {
            n,
            col_ptr,
            row_idx,
            symbolic,
            numeric,
        })
    }

    /// Refactorize a matrix with the same sparsity pattern.
    pub fn refactor(&mut self, a: &SparseSpdMatrix) -> Result<()> {
        if a.dim() != self.n || a.nnz() != self.row_idx.len() {
            return Err(Error::Linalg("pattern mismatch in refactorization".into()));
        }
        let symbolic_mat =
            SymbolicSparseColMatRef::new_checked(self.n, self.n, &self.col_ptr, None, &self.row_idx);
        let mat = SparseColMatRef::new(symbolic_mat, a.values());
        self.numeric = Llt::try_new_with_symbolic(self.symbolic.clone(), mat, Side::Lower)
            .map_err(|e| Error::Linalg(format!("cholesky refactorization failed: {e:?}")))?;
        Ok(())
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        use faer::linalg::solvers::SolveCore;
        let n = self.n;
        let rhs = MatMut::from_column_major_slice_mut(x, n, 1);
        self.numeric.solve_in_place_with_conj(Conj::No, rhs);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

/// Outcome of a PCG solve.
#[derive(Debug, Clone, Copy)]
pub struct PcgInfo {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Preconditioned conjugate gradients for SPD systems. `apply` computes
/// `y = A x`; `precond` computes `y = P^-1 x`. Converges when the 2-norm
/// residual drops below `tol_rel * ||b||`.
pub fn pcg(
    apply: impl Fn(&[f64], &mut [f64]),
    precond: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol_rel: f64,
    max_iter: usize,
) -> Result<PcgInfo> {
    let n = b.len();
    let norm_b = norm2(b);
    if norm_b == 0.0 {
        x.fill(0.0);
        return Ok(PcgInfo {
            iterations: 0,
            rel_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let rel = norm2(&r) / norm_b;
        if rel <= tol_rel {
            return Ok(PcgInfo {
                iterations: it,
                rel_residual: rel,
            });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::Linalg(format!(
                "PCG encountered non-positive curvature {pap}; system not SPD"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rel = norm2(&r) / norm_b;
    if rel <= tol_rel {
        Ok(PcgInfo {
            iterations: max_iter,
            rel_residual: rel,
        })
    } else {
        Err(Error::Linalg(format!(
            "PCG did not converge in {max_iter} iterations (relative residual {rel:.3e})"
        )))
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a small dense symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in ascending order with matching
/// eigenvectors as columns.
pub fn sym_eig_dense(a_in: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a_in.len();
    let mut a: Vec<Vec<f64>> = a_in.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for i in 0..n {
        v[i][i] = 1.0;
    }
    let scale: f64 = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a[i][j].abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() <= 1e-18 * scale {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k][p], v[k][q]);
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let eigvecs: Vec<Vec<f64>> = order
        .iter()
        .map(|&c| (0..n).map(|r| v[r][c]).collect())
        .collect();
    (eigvals, eigvecs)
}

/// Solve the small dense generalized symmetric problem `A c = theta B c`
/// with SPD `B` via a dense Cholesky reduction. Returns ascending
/// eigenvalues and B-orthonormal eigenvectors (as columns of the second
/// return value, i.e. `out[j]` is the j-th eigenvector).
pub fn sym_eig_dense_generalized(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    // dense Cholesky B = L L^T
    let mut l = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = b[i][j];
            for k in 0..j {
                sum -= l[i][k] * l[j][k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Linalg("projected mass matrix not SPD".into()));
                }
                l[i][j] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    // C = L^-1 A L^-T
    let mut c = a.to_vec();
    // forward solve on columns: C <- L^-1 C
    for col in 0..n {
        for i in 0..n {
            let mut sum = c[i][col];
            for k in 0..i {
                sum -= l[i][k] * c[k][col];
            }
            c[i][col] = sum / l[i][i];
        }
    }
    // then on rows: C <- C L^-T
    for row in 0..n {
        for j in 0..n {
            let mut sum = c[row][j];
            for k in 0..j {
                sum -= l[j][k] * c[row][k];
            }
            c[row][j] = sum / l[j][j];
        }
    }
    let (vals, vecs_std) = sym_eig_dense(&c);
    // back-transform and keep B-orthonormality: x = L^-T y
    let mut vecs = Vec::with_capacity(n);
    for y in &vecs_std {
        let mut x = y.clone();
        for irev in (0..n).rev() {
            let mut sum = x[irev];
            for k in (irev + 1)..n {
                sum -= l[k][irev] * x[k];
            }
            x[irev] = sum / l[irev][irev];
        }
        vecs.push(x);
    }
    Ok((vals, vecs))
}

/// Mass operator of a generalized eigenvalue problem.
pub enum MassOp<'a> {
    Diag(&'a [f64]),
    Sparse(&'a SparseSpdMatrix),
}

impl MassOp<'_> {
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        match self {
            MassOp::Diag(d) => {
                for i in 0..x.len() {
                    y[i] = d[i] * x[i];
                }
            }
            MassOp::Sparse(m) => m.matvec(x, y),
        }
    }

    pub fn inner(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            MassOp::Diag(d) => d.iter().zip(x.iter().zip(y)).map(|(m, (a, b))| m * a * b).sum(),
            MassOp::Sparse(m) => m.bilinear(x, y),
        }
    }
}

/// Smallest `count` eigenpairs of `A x = mu M x` with SPD `A`, by block
/// inverse iteration with Rayleigh-Ritz projection. Eigenvectors are
/// returned M-orthonormal with the entry of largest magnitude positive.
pub fn smallest_generalized_eigs(
    a: &SparseSpdMatrix,
    m: &MassOp,
    count: usize,
    tol: f64,
    max_iter: usize,
    seed: u64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    let n = a.dim();
    if count == 0 || count > n {
        return Err(Error::InvalidInput(format!(
            "eigenpair count {count} out of range for dimension {n}"
        )));
    }
    let p = (count + 4).min(n);
    let factor = CholeskyFactor::new(a)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let mut theta = vec![0.0f64; p];

    let mut mx = vec![0.0f64; n];
    for _it in 0..max_iter {
        // M-orthonormalize the block (two modified Gram-Schmidt passes)
        for _pass in 0..2 {
            for j in 0..p {
                let (head, tail) = x.split_at_mut(j);
                let xj = &mut tail[0];
                for xi in head.iter() {
                    let c = m.inner(xi, xj);
                    for t in 0..n {
                        xj[t] -= c * xi[t];
                    }
                }
                let nrm = m.inner(xj, xj).sqrt();
                if !(nrm > 1e-300) {
                    // re-randomize a collapsed direction
                    for t in 0..n {
                        xj[t] = rng.gen_range(-1.0..1.0);
                    }
                    continue;
                }
                for t in 0..n {
                    xj[t] /= nrm;
                }
            }
        }
        // Y = A^-1 M X; since A Y = M X we get Y^T A Y = Y^T M X
        let mut y: Vec<Vec<f64>> = Vec::with_capacity(p);
        let mut mxs: Vec<Vec<f64>> = Vec::with_capacity(p);
        for xj in &x {
            m.apply(xj, &mut mx);
            mxs.push(mx.clone());
            y.push(factor.solve(&mx));
        }
        let mut ahat = vec![vec![0.0; p]; p];
        let mut bhat = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..p {
                ahat[i][j] = dot(&y[i], &mxs[j]);
                bhat[i][j] = m.inner(&y[i], &y[j]);
            }
        }
        // symmetrize against rounding
        for i in 0..p {
            for j in (i + 1)..p {
                let s = 0.5 * (ahat[i][j] + ahat[j][i]);
                ahat[i][j] = s;
                ahat[j][i] = s;
                let s = 0.5 * (bhat[i][j] + bhat[j][i]);
                bhat[i][j] = s;
                bhat[j][i] = s;
            }
        }
        let (vals, vecs) = sym_eig_dense_generalized(&ahat, &bhat)?;
        let mut xnew: Vec<Vec<f64>> = Vec::with_capacity(p);
        for c in &vecs {
            let mut col = vec![0.0; n];
            for (i, yi) in y.iter().enumerate() {
                let ci = c[i];
                for t in 0..n {
                    col[t] += ci * yi[t];
                }
            }
            xnew.push(col);
        }
        x = xnew;
        theta.copy_from_slice(&vals);

        // convergence of the leading `count` pairs
        let mut ok = true;
        let mut ax = vec![0.0; n];
        for j in 0..count {
            a.matvec(&x[j], &mut ax);
            m.apply(&x[j], &mut mx);
            let mut rss = 0.0;
            for t in 0..n {
                let r = ax[t] - theta[j] * mx[t];
                rss += r * r;
            }
            let rel = rss.sqrt() / (theta[j].abs() * norm2(&mx)).max(1e-300);
            if rel > tol {
                ok = false;
                break;
            }
        }
        if ok {
            let mut out = Vec::with_capacity(count);
            for j in 0..count {
                let mut v = x[j].clone();
                let nrm = m.inner(&v, &v).sqrt();
                for t in 0..n {
                    v[t] /= nrm;
                }
                // fix the sign by the entry of largest magnitude
                let mut imax = 0;
                for t in 1..n {
                    if v[t].abs() > v[imax].abs() {
                        imax = t;
                    }
                }
                if v[imax] < 0.0 {
                    for t in 0..n {
                        v[t] = -v[t];
                    }
                }
                out.push((theta[j], v));
            }
            return Ok(out);
        }
    }
    Err(Error::Linalg(format!(
        "block inverse iteration did not converge in {max_iter} iterations"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> SparseSpdMatrix {
        let h = 1.0 / (n + 1) as f64;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i as u32, i as u32, 2.0 / h));
            if i + 1 < n {
                t.push((i as u32, i as u32 + 1, -1.0 / h));
                t.push((i as u32 + 1, i as u32, -1.0 / h));
            }
        }
        SparseSpdMatrix::from_triplets(n, t)
    }

    #[test]
    fn cholesky_solves_tridiagonal_system() {
        let a = laplace_1d(50);
        let f = CholeskyFactor::new(&a).unwrap();
        let xs: Vec<f64> = (0..50).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut b = vec![0.0; 50];
        a.matvec(&xs, &mut b);
        let x = f.solve(&b);
        for (u, v) in x.iter().zip(&xs) {
            assert!((u - v).abs() < 1e-11);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = SparseSpdMatrix::from_triplets(
            2,
            vec![(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0)],
        );
        assert!(CholeskyFactor::new(&a).is_err());
    }

    #[test]
    fn pcg_matches_direct_solve() {
        let a = laplace_1d(80);
        let f = CholeskyFactor::new(&a).unwrap();
        let b: Vec<f64> = (0..80).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let mut x = vec![0.0; 80];
        let diag = a.diagonal();
        pcg(
            |v, out| a.matvec(v, out),
            |r, out| {
                for i in 0..r.len() {
                    out[i] = r[i] / diag[i];
                }
            },
            &b,
            &mut x,
            1e-13,
            10_000,
        )
        .unwrap();
        let xd = f.solve(&b);
        for (u, v) in x.iter().zip(&xd) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobi_eigensolver_small_matrix() {
        let a = vec![
            vec![2.0, -1.0, 0.0],
            vec![-1.0, 2.0, -1.0],
            vec![0.0, -1.0, 2.0],
        ];
        let (vals, vecs) = sym_eig_dense(&a);
        let exact = [2.0 - 2.0f64.sqrt(), 2.0, 2.0 + 2.0f64.sqrt()];
        for (v, e) in vals.iter().zip(exact) {
            assert!((v - e).abs() < 1e-12);
        }
        // residual check for the first eigenpair
        let v = &vecs[0];
        for i in 0..3 {
            let av: f64 = (0..3).map(|j| a[i][j] * v[j]).sum();
            assert!((av - vals[0] * v[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn generalized_eigs_match_closed_form() {
        // lumped 1D eigenproblem: S x = mu M x with closed-form eigenvalues
        let n = 31usize;
        let h = 1.0 / (n + 1) as f64;
        let s = laplace_1d(n);
        let mdiag = vec![h; n];
        let pairs =
            smallest_generalized_eigs(&s, &MassOp::Diag(&mdiag), 3, 1e-10, 400, 7).unwrap();
        for (k, (mu, _)) in pairs.iter().enumerate() {
            let kk = (k + 1) as f64;
            let exact =
                4.0 / (h * h) * (std::f64::consts::PI * kk * h / 2.0).sin().powi(2);
            assert!(
                (mu - exact).abs() < 1e-8 * exact,
                "mode {k}: {mu} vs {exact}"
            );
        }
        // eigenvectors are M-orthonormal
        let (v0, v1) = (&pairs[0].1, &pairs[1].1);
        let m = MassOp::Diag(&mdiag);
        assert!((m.inner(v0, v0) - 1.0).abs() < 1e-10);
        assert!(m.inner(v0, v1).abs() < 1e-8);
    }
}
