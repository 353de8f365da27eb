//! Sparse factorizations, DCT-based Neumann Poisson solves, and a
//! shift-invert Lanczos iteration for `A x = lambda M x` with diagonal `M`.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::domain::{Domain, GridKind};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Compressed rows

#[derive(Clone, Debug)]
pub struct Csr {
    pub n: usize,
    pub rowptr: Vec<usize>,
    pub col: Vec<usize>,
    pub val: Vec<f64>,
}

impl Csr {
    /// Duplicates are summed.
    pub fn from_triplets(n: usize, t: &[(usize, usize, f64)]) -> Self {
        let mut t: Vec<(usize, usize, f64)> = t.to_vec();
        t.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut rowptr = vec![0usize; n + 1];
        let mut col = Vec::with_capacity(t.len());
        let mut val: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *val.last_mut().unwrap() += v;
            } else {
                col.push(c);
                val.push(v);
                rowptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            rowptr[i + 1] += rowptr[i];
        }
        Csr { n, rowptr, col, val }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .into_par_iter()
            .map(|i| (self.rowptr[i]..self.rowptr[i + 1]).map(|p| self.val[p] * x[self.col[p]]).sum())
            .collect()
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut t = Vec::with_capacity(self.val.len());
        for i in 0..self.n {
            for p in self.rowptr[i]..self.rowptr[i + 1] {
                t.push((i, self.col[p], self.val[p]));
            }
        }
        t
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        (self.rowptr[i]..self.rowptr[i + 1]).find(|&p| self.col[p] == j).map_or(0.0, |p| self.val[p])
    }
}

fn to_faer(n: usize, t: &[(usize, usize, f64)]) -> Result<SparseColMat<usize, f64>> {
    let trip: Vec<Triplet<usize, usize, f64>> = t.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
    SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
        .map_err(|e| Error::LinearSolver { reason: format!("matrix assembly: {e:?}"), residual: f64::NAN })
}

fn solve_with<S: Solve<f64>>(s: &S, b: &[f64]) -> Vec<f64> {
    let rhs = Mat::<f64>::from_fn(b.len(), 1, |i, _| b[i]);
    let x = s.solve(&rhs);
    (0..b.len()).map(|i| x[(i, 0)]).collect()
}

/// Sparse Cholesky of a symmetric matrix given by both triangles.
/// Failure certifies that the matrix is not positive definite.
pub struct SparseCholesky {
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl SparseCholesky {
    pub fn new(n: usize, t: &[(usize, usize, f64)]) -> Result<Self> {
        let a = to_faer(n, t)?;
        let llt = a
            .sp_cholesky(Side::Lower)
            .map_err(|e| Error::LinearSolver { reason: format!("cholesky: {e:?}"), residual: f64::NAN })?;
        Ok(SparseCholesky { llt })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        solve_with(&self.llt, b)
    }
}

pub struct SparseLu {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl SparseLu {
    pub fn new(n: usize, t: &[(usize, usize, f64)]) -> Result<Self> {
        let a = to_faer(n, t)?;
        let lu = a.sp_lu().map_err(|e| Error::Singular(format!("lu: {e:?}")))?;
        Ok(SparseLu { lu })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        solve_with(&self.lu, b)
    }
}

// ---------------------------------------------------------------------------
// DCT-I and Neumann Poisson

struct Dct1 {
    n: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl Dct1 {
    fn new(n: usize, planner: &mut FftPlanner<f64>) -> Self {
        Dct1 { n, fft: planner.plan_fft_forward(2 * (n - 1)) }
    }

    /// `X_k = x_0 + (-1)^k x_{n-1} + 2 sum_{j=1}^{n-2} x_j cos(pi j k / (n-1))`.
    fn apply(&self, line: &mut [f64], buf: &mut Vec<Complex<f64>>) {
        let n = self.n;
        let m = 2 * (n - 1);
        buf.clear();
        buf.extend(line.iter().map(|&v| Complex::new(v, 0.0)));
        buf.extend((1..n - 1).rev().map(|j| Complex::new(line[j], 0.0)));
        debug_assert_eq!(buf.len(), m);
        self.fft.process(buf);
        for k in 0..n {
            line[k] = buf[k].re;
        }
    }
}

/// Solves `-L v = f - mean(f)` with `int v = 0` on the discrete grid.
pub struct PoissonSolver(Poisson);

enum Poisson {
    Dct {
        nx: usize,
        ny: usize,
        lx: Vec<f64>,
        ly: Vec<f64>,
        dx: Dct1,
        dy: Dct1,
    },
    Sparse {
        chol: SparseCholesky,
        weights: Vec<f64>,
    },
}

impl PoissonSolver {
    pub fn new(domain: &Domain) -> Result<Self> {
        match domain.kind {
            GridKind::Rect { nx, ny, hx, hy } => {
                let mut planner = FftPlanner::new();
                let eig = |n: usize, h: f64| -> Vec<f64> {
                    (0..n).map(|k| 2.0 / (h * h) * (1.0 - (std::f64::consts::PI * k as f64 / (n - 1) as f64).cos())).collect()
                };
                Ok(PoissonSolver(Poisson::Dct {
                    nx,
                    ny,
                    lx: eig(nx, hx),
                    ly: eig(ny, hy),
                    dx: Dct1::new(nx, &mut planner),
                    dy: Dct1::new(ny, &mut planner),
                }))
            }
            GridKind::Polar { .. } => {
                // Pin node 0 to make the stiffness definite, then re-center.
                let t: Vec<(usize, usize, f64)> = domain
                    .stiffness_triplets()
                    .into_iter()
                    .filter(|&(r, c, _)| r != 0 && c != 0)
                    .map(|(r, c, v)| (r - 1, c - 1, v))
                    .collect();
                let chol = SparseCholesky::new(domain.len() - 1, &t)?;
                Ok(PoissonSolver(Poisson::Sparse { chol, weights: domain.weights.clone() }))
            }
        }
    }

    /// Returns `(v, mean(f))`.
    pub fn solve(&self, weights: &[f64], f: &[f64]) -> (Vec<f64>, f64) {
        let area: f64 = weights.iter().sum();
        let mean = weights.iter().zip(f).map(|(w, v)| w * v).sum::<f64>() / area;
        match &self.0 {
            Poisson::Dct { nx, ny, lx, ly, dx, dy } => {
                let (nx, ny) = (*nx, *ny);
                let mut a: Vec<f64> = f.iter().map(|v| v - mean).collect();
                dct2(&mut a, nx, ny, dx, dy);
                for j in 0..ny {
                    for i in 0..nx {
                        let l = lx[i] + ly[j];
                        a[i + nx * j] = if i == 0 && j == 0 { 0.0 } else { a[i + nx * j] / l };
                    }
                }
                dct2(&mut a, nx, ny, dx, dy);
                let scale = 1.0 / (4.0 * (nx - 1) as f64 * (ny - 1) as f64);
                for v in &mut a {
                    *v *= scale;
                }
                let m = weights.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() / area;
                for v in &mut a {
                    *v -= m;
                }
                (a, mean)
            }
            Poisson::Sparse { chol, weights: w } => {
                let rhs: Vec<f64> = (1..f.len()).map(|k| w[k] * (f[k] - mean)).collect();
                let x = chol.solve(&rhs);
                let mut v = Vec::with_capacity(f.len());
                v.push(0.0);
                v.extend(x);
                let m = weights.iter().zip(&v).map(|(w, v)| w * v).sum::<f64>() / area;
                for e in &mut v {
                    *e -= m;
                }
                (v, mean)
            }
        }
    }
}

fn dct2(a: &mut [f64], nx: usize, ny: usize, dx: &Dct1, dy: &Dct1) {
    a.par_chunks_mut(nx).for_each_init(Vec::new, |buf, row| dx.apply(row, buf));
    let mut cols: Vec<Vec<f64>> = (0..nx).map(|i| (0..ny).map(|j| a[i + nx * j]).collect()).collect();
    cols.par_iter_mut().for_each_init(Vec::new, |buf, c| dy.apply(c, buf));
    for (i, c) in cols.iter().enumerate() {
        for j in 0..ny {
            a[i + nx * j] = c[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Iterative solves

/// Preconditioned conjugate gradients. Returns `(x, iterations, relative residual)`.
pub fn pcg(
    apply: &dyn Fn(&[f64]) -> Vec<f64>,
    precond: &dyn Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> (Vec<f64>, usize, f64) {
    let n = b.len();
    let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
    let bn = dot(b, b).sqrt();
    if bn == 0.0 {
        return (vec![0.0; n], 0, 0.0);
    }
    let mut x = precond(b);
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
    let mut z = precond(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut res = dot(&r, &r).sqrt() / bn;
    let mut it = 0;
    while it < max_iter && res > tol {
        let ap = apply(&p);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = dot(&r, &r).sqrt() / bn;
        it += 1;
    }
    (x, it, res)
}

// ---------------------------------------------------------------------------
// Eigenvalues

#[derive(Clone, Debug)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    /// M-orthonormal eigenvectors.
    pub vectors: Vec<Vec<f64>>,
}

/// Dense solve of `A x = lambda diag(m) x`.
pub fn dense_generalized(a: &DMatrix<f64>, m: &[f64], k: usize) -> EigenPairs {
    let n = m.len();
    let s: Vec<f64> = m.iter().map(|v| 1.0 / v.sqrt()).collect();
    let c = Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]) * s[i] * s[j]);
    let k = k.min(n);
    let mut values = Vec::with_capacity(k);
    let mut vectors = Vec::with_capacity(k);
    match c.self_adjoint_eigen(Side::Lower) {
        Ok(eig) => {
            let sv = eig.S().column_vector();
            let u = eig.U();
            for i in 0..k {
                values.push(sv[i]);
                vectors.push((0..n).map(|r| u[(r, i)] * s[r]).collect());
            }
        }
        Err(_) => {
            let c = DMatrix::from_fn(n, n, |i, j| c[(i, j)]);
            let eig = SymmetricEigen::new(c);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
            for &i in order.iter().take(k) {
                values.push(eig.eigenvalues[i]);
                vectors.push((0..n).map(|r| eig.eigenvectors[(r, i)] * s[r]).collect());
            }
        }
    }
    EigenPairs { values, vectors }
}

#[derive(Clone, Copy, Debug)]
pub struct LanczosOptions {
    pub max_dim: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions { max_dim: 400, tol: 1e-13, seed: 0x5eed }
    }
}

fn mdot(m: &[f64], a: &[f64], b: &[f64]) -> f64 {
    m.iter().zip(a).zip(b).map(|((w, x), y)| w * x * y).sum()
}

fn morth(m: &[f64], w: &mut [f64], basis: &[Vec<f64>]) {
    for q in basis {
        let c = mdot(m, w, q);
        for (a, b) in w.iter_mut().zip(q) {
            *a -= c * b;
        }
    }
}

/// Largest `k` eigenpairs of `T = S M` (self-adjoint in the M inner
/// product), with `S` supplied as `solve`. Vectors in `locked` are
/// deflated out of the Krylov space.
pub fn lanczos_largest(
    m: &[f64],
    solve: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    k: usize,
    locked: &[Vec<f64>],
    opts: LanczosOptions,
) -> Result<EigenPairs> {
    let n = m.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (locked.len() as u64).wrapping_mul(0x9e37_79b9));
    let mut q0: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    morth(m, &mut q0, locked);
    morth(m, &mut q0, locked);
    let nrm = mdot(m, &q0, &q0).sqrt();
    q0.iter_mut().for_each(|v| *v /= nrm);
    let mut q: Vec<Vec<f64>> = vec![q0];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let max_dim = opts.max_dim.min(n.saturating_sub(locked.len())).max(1);
    let mut converged: Option<(Vec<f64>, DMatrix<f64>)> = None;
    for j in 0..max_dim {
        let mq: Vec<f64> = q[j].iter().zip(m).map(|(a, b)| a * b).collect();
        let mut w = solve(&mq);
        let a = mdot(m, &w, &q[j]);
        alpha.push(a);
        for _ in 0..2 {
            morth(m, &mut w, locked);
            morth(m, &mut w, &q);
        }
        let b = mdot(m, &w, &w).sqrt();
        let dim = j + 1;
        let check = dim >= k && (dim % 5 == 0 || dim == max_dim || b <= 1e-14 * a.abs().max(1e-300));
        if check {
            let t = DMatrix::from_fn(dim, dim, |r, c| {
                if r == c {
                    alpha[r]
                } else if r + 1 == c {
                    beta[r]
                } else if c + 1 == r {
                    beta[c]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
            let top: Vec<usize> = order.into_iter().take(k).collect();
            let scale = eig.eigenvalues.iter().fold(0.0f64, |s, v| s.max(v.abs()));
            let ok = top.iter().all(|&i| (b * eig.eigenvectors[(dim - 1, i)]).abs() <= opts.tol * scale);
            if ok || dim == max_dim || b <= 1e-14 * scale {
                let vals: Vec<f64> = top.iter().map(|&i| eig.eigenvalues[i]).collect();
                let vecs = DMatrix::from_fn(dim, top.len(), |r, c| eig.eigenvectors[(r, top[c])]);
                if !ok && dim == max_dim && b > 1e-14 * scale {
                    let worst = top
                        .iter()
                        .map(|&i| (b * eig.eigenvectors[(dim - 1, i)]).abs() / scale)
                        .fold(0.0, f64::max);
                    return Err(Error::Spectral(format!("lanczos reached dimension {dim} with residual {worst:e}")));
                }
                converged = Some((vals, vecs));
                break;
            }
        }
        if b == 0.0 {
            break;
        }
        w.iter_mut().for_each(|v| *v /= b);
        beta.push(b);
        q.push(w);
    }
    let (vals, s) = converged.ok_or_else(|| Error::Spectral("lanczos broke down".into()))?;
    let dim = s.nrows();
    let vectors = (0..vals.len())
        .map(|c| {
            let mut x = vec![0.0; n];
            for r in 0..dim {
                let coef = s[(r, c)];
                for (xi, qi) in x.iter_mut().zip(&q[r]) {
                    *xi += coef * qi;
                }
            }
            let nrm = mdot(m, &x, &x).sqrt();
            x.iter_mut().for_each(|v| *v /= nrm);
            x
        })
        .collect();
    Ok(EigenPairs { values: vals, vectors })
}

/// `k` smallest eigenpairs of `A x = lambda M x` via shift-invert around
/// `sigma` (which must lie below the spectrum so `solve` is SPD). A second
/// deflated pass picks up eigenvalues hidden by exact multiplicity.
pub fn smallest_shift_invert(
    m: &[f64],
    sigma: f64,
    solve: &(dyn Fn(&[f64]) -> Vec<f64> + Sync),
    k: usize,
    opts: LanczosOptions,
) -> Result<EigenPairs> {
    let first = lanczos_largest(m, solve, k, &[], opts)?;
    let mut values: Vec<f64> = first.values.iter().map(|t| sigma + 1.0 / t).collect();
    let mut vectors = first.vectors;
    let kth = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let second = lanczos_largest(m, solve, k.min(4), &vectors, opts)?;
    for (t, v) in second.values.iter().zip(second.vectors) {
        let lam = sigma + 1.0 / t;
        if lam < kth - 1e-10 * (1.0 + kth.abs()) {
            values.push(lam);
            vectors.push(v);
        }
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    order.truncate(k);
    Ok(EigenPairs {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors: order.iter().map(|&i| vectors[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, DomainSpec};
    use std::f64::consts::PI;

    #[test]
    fn csr_sums_duplicates() {
        let a = Csr::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, 4.0), (0, 1, -1.0)]);
        assert_eq!(a.apply(&[1.0, 1.0]), vec![2.0, 4.0]);
    }

    #[test]
    fn dct_poisson_inverts_laplacian() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.5, 1.0], n: [33, 25] }).unwrap();
        let p = PoissonSolver::new(&d).unwrap();
        let f: Vec<f64> = (0..d.len()).map(|k| (d.x[k] * 3.0).sin() + d.y[k] * d.y[k]).collect();
        let (v, mean) = p.solve(&d.weights, &f);
        let lap = d.laplacian(&v);
        for k in 0..d.len() {
            assert!((-lap[k] - (f[k] - mean)).abs() < 1e-9);
        }
        assert!(d.integrate(&v).abs() < 1e-13);
    }

    #[test]
    fn polar_poisson_inverts_laplacian() {
        let d = build_domain(&DomainSpec::Disk { radius: 1.0, n: [16, 32] }).unwrap();
        let p = PoissonSolver::new(&d).unwrap();
        let f: Vec<f64> = (0..d.len()).map(|k| d.x[k] + (2.0 * d.y[k]).cos()).collect();
        let (v, mean) = p.solve(&d.weights, &f);
        let lap = d.laplacian(&v);
        for k in 0..d.len() {
            assert!((-lap[k] - (f[k] - mean)).abs() < 1e-8, "{k}");
        }
        assert!(d.integrate(&v).abs() < 1e-12);
    }

    #[test]
    fn lanczos_matches_dense_on_neumann_laplacian() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [20, 20] }).unwrap();
        let n = d.len();
        let sigma = -1.0;
        let mut t = d.stiffness_triplets();
        for k in 0..n {
            t.push((k, k, -sigma * d.weights[k]));
        }
        let chol = SparseCholesky::new(n, &t).unwrap();
        let pairs = smallest_shift_invert(&d.weights, sigma, &|b| chol.solve(b), 4, LanczosOptions::default()).unwrap();
        let mut a = DMatrix::zeros(n, n);
        for (r, c, v) in d.stiffness_triplets() {
            a[(r, c)] += v;
        }
        let dense = dense_generalized(&a, &d.weights, 4);
        for i in 0..4 {
            assert!((pairs.values[i] - dense.values[i]).abs() < 1e-8 * (1.0 + dense.values[i].abs()));
        }
        // Degenerate pair pi^2 (discrete) recovered twice.
        assert!((pairs.values[1] - pairs.values[2]).abs() < 1e-8);
        assert!((pairs.values[1] - PI * PI).abs() < 0.1);
    }
}
