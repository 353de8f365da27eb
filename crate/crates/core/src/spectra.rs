//! Linearized diffuse operators, interface Jacobi operators, and their
//! lowest eigenpairs.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{Domain, InterfaceCurve};
use crate::energies::{well_dd, ModelParams, Workspace};
use crate::error::{invalid, Error, Result};
use crate::fields::{check_grid, ScalarField};
use crate::linalg::{dense_generalized, pcg, smallest_shift_invert, Csr, EigenPairs, LanczosOptions, SparseCholesky};
use crate::sharp::NonlocalTerms;

/// Default cap on the number of requested eigenpairs.
pub const MAX_EIGENPAIRS: usize = 10;
/// Problems up to this many unknowns are solved densely.
pub const DENSE_LIMIT: usize = 2500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    Neumann,
    Dirichlet,
}

/// A symmetric pencil `A x = lambda M x` with diagonal `M`.
pub trait SpectralOperator: Sync {
    fn size(&self) -> usize;
    fn mass(&self) -> &[f64];
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    /// Lowest `k` eigenpairs, M-orthonormal.
    fn lowest(&self, k: usize, opts: LanczosOptions) -> Result<EigenPairs>;
}

/// `-eps Delta + W''(u)/eps (+ (8/3) gamma (-Delta)^{-1})` in weak form on the free nodes.
pub struct LinearizedOperator<'a> {
    pub eps: f64,
    pub gamma: f64,
    pub boundary: Boundary,
    /// Sizes at or below this use the dense solver.
    pub dense_limit: usize,
    /// Restrict to `int phi = 0` (mass-preserving perturbations).
    pub mass_constrained: bool,
    domain: &'a Domain,
    /// Grid index of each unknown.
    free: Vec<usize>,
    local: Csr,
    mass: Vec<f64>,
    ws: Option<Workspace<'a>>,
}

pub fn assemble_linearized<'a>(domain: &'a Domain, u: &ScalarField, p: &ModelParams, boundary: Boundary) -> Result<LinearizedOperator<'a>> {
    check_grid(domain.id, u.grid)?;
    p.validate()?;
    let n = domain.len();
    let free: Vec<usize> = match boundary {
        Boundary::Neumann => (0..n).collect(),
        Boundary::Dirichlet => (0..n).filter(|&k| !domain.is_boundary(k)).collect(),
    };
    let mut index = vec![usize::MAX; n];
    for (i, &k) in free.iter().enumerate() {
        index[k] = i;
    }
    let mut t = Vec::new();
    for (a, b, c) in domain.stiffness_triplets() {
        if index[a] != usize::MAX && index[b] != usize::MAX {
            t.push((index[a], index[b], p.eps * c));
        }
    }
    for (i, &k) in free.iter().enumerate() {
        t.push((i, i, domain.weights[k] * well_dd(u.values[k]) / p.eps));
    }
    let ws = if p.gamma != 0.0 { Some(Workspace::new(domain)?) } else { None };
    Ok(LinearizedOperator {
        eps: p.eps,
        gamma: p.gamma,
        boundary,
        dense_limit: DENSE_LIMIT,
        mass_constrained: false,
        domain,
        mass: free.iter().map(|&k| domain.weights[k]).collect(),
        local: Csr::from_triplets(free.len(), &t),
        free,
        ws,
    })
}

impl LinearizedOperator<'_> {
    /// Grid values of a vector of unknowns (zero at eliminated nodes).
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.domain.len()];
        for (i, &k) in self.free.iter().enumerate() {
            out[k] = x[i];
        }
        out
    }

    pub fn restrict(&self, f: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&k| f[k]).collect()
    }

    fn nonlocal_apply(&self, x: &[f64]) -> Option<Vec<f64>> {
        let ws = self.ws.as_ref()?;
        let (v, _) = ws.solve(&self.embed(x));
        let c = 8.0 / 3.0 * self.gamma;
        Some(self.free.iter().map(|&k| c * self.domain.weights[k] * v[k]).collect())
    }

    fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// `x - (int x / |Omega|) 1`.
    fn project(&self, x: &[f64]) -> Vec<f64> {
        let c = x.iter().zip(&self.mass).map(|(a, w)| a * w).sum::<f64>() / self.total_mass();
        x.iter().map(|a| a - c).collect()
    }

    /// Adjoint of [`Self::project`]: `y - M 1 (1^T y) / |Omega|`.
    fn project_dual(&self, y: &mut [f64]) {
        let c = y.iter().sum::<f64>() / self.total_mass();
        y.iter_mut().zip(&self.mass).for_each(|(a, w)| *a -= c * w);
    }

    fn shifted_triplets(&self, sigma: f64) -> Vec<(usize, usize, f64)> {
        let mut t = self.local.triplets();
        t.extend(self.mass.iter().enumerate().map(|(i, m)| (i, i, -sigma * m)));
        t
    }

    /// Largest `sigma` (to a relative tolerance) at which `A_local - sigma M`
    /// still factors; a lower bound on the spectrum of the full operator.
    fn certified_shift(&self) -> Result<(f64, SparseCholesky)> {
        let n = self.size();
        // Gershgorin lower bound and the smallest Rayleigh quotient of a unit vector.
        let mut lo = f64::INFINITY;
        let mut hi = f64::INFINITY;
        for i in 0..n {
            let (s, e) = (self.local.rowptr[i], self.local.rowptr[i + 1]);
            let mut d = 0.0;
            let mut off = 0.0;
            for q in s..e {
                if self.local.col[q] == i {
                    d += self.local.val[q];
                } else {
                    off += self.local.val[q].abs();
                }
            }
            lo = lo.min((d - off) / self.mass[i]);
            hi = hi.min(d / self.mass[i]);
        }
        lo -= 1e-6 * (1.0 + lo.abs());
        let mut best = SparseCholesky::new(n, &self.shifted_triplets(lo))
            .map_err(|_| Error::Spectral("shift below the Gershgorin bound failed to factor".into()))?;
        let width = 1e-3 * (1.0 + hi.abs().min(lo.abs()));
        while hi - lo > width {
            let mid = 0.5 * (lo + hi);
            match SparseCholesky::new(n, &self.shifted_triplets(mid)) {
                Ok(c) => {
                    lo = mid;
                    best = c;
                }
                Err(_) => hi = mid,
            }
        }
        // Step back so the factor is well conditioned.
        let sigma = lo - (hi - lo);
        if let Ok(c) = SparseCholesky::new(n, &self.shifted_triplets(sigma)) {
            return Ok((sigma, c));
        }
        Ok((lo, best))
    }

    /// Dense pencil matrix; with the mass constraint, `P^T A P` plus a large
    /// multiple of `M 1 1^T M` that moves the constant mode above the spectrum.
    fn dense_constrained(&self) -> DMatrix<f64> {
        let mut a = self.dense();
        if !self.mass_constrained {
            return a;
        }
        let n = self.size();
        let total = self.total_mass();
        let a1: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[(i, j)]).sum()).collect();
        let c11: f64 = a1.iter().sum();
        let mut bound = 0.0_f64;
        for i in 0..n {
            bound = bound.max((0..n).map(|j| a[(i, j)].abs()).sum::<f64>() / self.mass[i]);
        }
        let big = 10.0 * bound + 1.0;
        let m = &self.mass;
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] += -a1[i] * m[j] / total - m[i] * a1[j] / total + m[i] * m[j] * (c11 / (total * total) + big / total);
            }
        }
        a
    }

    fn dense(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut a = DMatrix::zeros(n, n);
        for i in 0..n {
            for q in self.local.rowptr[i]..self.local.rowptr[i + 1] {
                a[(i, self.local.col[q])] += self.local.val[q];
            }
        }
        if self.ws.is_some() {
            let cols: Vec<Vec<f64>> = {
                use rayon::prelude::*;
                (0..n)
                    .into_par_iter()
                    .map(|j| {
                        let mut e = vec![0.0; n];
                        e[j] = 1.0;
                        self.nonlocal_apply(&e).unwrap()
                    })
                    .collect()
            };
            for (j, c) in cols.iter().enumerate() {
                for i in 0..n {
                    a[(i, j)] += c[i];
                }
            }
        }
        a
    }
}

impl SpectralOperator for LinearizedOperator<'_> {
    fn size(&self) -> usize {
        self.free.len()
    }

    fn mass(&self) -> &[f64] {
        &self.mass
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let px;
        let x = if self.mass_constrained {
            px = self.project(x);
            &px[..]
        } else {
            x
        };
        let mut y = self.local.apply(x);
        if let Some(nl) = self.nonlocal_apply(x) {
            for (a, b) in y.iter_mut().zip(nl) {
                *a += b;
            }
        }
        if self.mass_constrained {
            self.project_dual(&mut y);
        }
        y
    }

    fn lowest(&self, k: usize, opts: LanczosOptions) -> Result<EigenPairs> {
        if self.size() <= self.dense_limit {
            return Ok(dense_generalized(&self.dense_constrained(), &self.mass, k));
        }
        let (sigma, chol) = self.certified_shift()?;
        let failure = std::sync::Mutex::new(None);
        let raw = |b: &[f64]| -> Vec<f64> {
            if self.ws.is_none() {
                return chol.solve(b);
            }
            let shifted = |x: &[f64]| {
                let mut y = self.local.apply(x);
                if let Some(nl) = self.nonlocal_apply(x) {
                    y.iter_mut().zip(nl).for_each(|(a, b)| *a += b);
                }
                for (i, v) in y.iter_mut().enumerate() {
                    *v -= sigma * self.mass[i] * x[i];
                }
                y
            };
            let pre = |r: &[f64]| chol.solve(r);
            let (x, _, rel) = pcg(&shifted, &pre, b, 1e-13, 500);
            if rel > 1e-10 {
                *failure.lock().unwrap() = Some(rel);
            }
            x
        };
        let out = if self.mass_constrained {
            // Resolvent of the constrained pencil: S b + mu S M 1 with int x = 0.
            let m1 = raw(&self.mass);
            let mint = |x: &[f64]| x.iter().zip(&self.mass).map(|(a, w)| a * w).sum::<f64>();
            let den = mint(&m1);
            let solve = |b: &[f64]| {
                let mut x = raw(b);
                let mu = mint(&x) / den;
                x.iter_mut().zip(&m1).for_each(|(a, c)| *a -= mu * c);
                x
            };
            smallest_shift_invert(&self.mass, sigma, &solve, k, opts)?
        } else {
            smallest_shift_invert(&self.mass, sigma, &raw, k, opts)?
        };
        if let Some(rel) = *failure.lock().unwrap() {
            return Err(Error::Spectral(format!("inner conjugate-gradient solve stalled at relative residual {rel:e}")));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobiBoundary {
    /// Natural condition of the form: outward co-normal derivative equals `A_dOmega(n, n) phi`.
    #[default]
    Robin,
    Dirichlet,
}

/// Discrete Jacobi form on the curve nodes: P1 stiffness, lumped mass.
#[derive(Clone, Debug)]
pub struct JacobiOperator {
    pub boundary: JacobiBoundary,
    pub gamma: f64,
    matrix: DMatrix<f64>,
    mass: Vec<f64>,
    free: Vec<usize>,
    nodes: usize,
}

/// `Q(phi) = int |grad phi|^2 - kappa^2 phi^2 - sum_ends A_dOmega(n,n) phi^2
/// + gamma (8 int int G phi phi + 4 int (grad v0 . n) phi^2)`.
pub fn jacobi_operator(curve: &InterfaceCurve, gamma: f64, nl: Option<&NonlocalTerms>, boundary: JacobiBoundary) -> Result<JacobiOperator> {
    if gamma < 0.0 {
        return Err(invalid("gamma", "must be nonnegative"));
    }
    let n = curve.len();
    let mut a = DMatrix::zeros(n, n);
    let segs = if curve.closed { n } else { n - 1 };
    for i in 0..segs {
        let j = (i + 1) % n;
        let c = 1.0 / curve.ds;
        a[(i, i)] += c;
        a[(j, j)] += c;
        a[(i, j)] -= c;
        a[(j, i)] -= c;
    }
    for i in 0..n {
        a[(i, i)] -= curve.weights[i] * curve.curvature[i].powi(2);
    }
    if boundary == JacobiBoundary::Robin {
        for end in &curve.endpoints {
            a[(end.node, end.node)] -= end.boundary_curvature;
        }
    }
    if gamma != 0.0 {
        let nl = nl.ok_or_else(|| Error::Contract("gamma > 0 needs v0 and the Green kernel".into()))?;
        let dn = nl.normal_derivative(curve);
        a += &nl.green * (8.0 * gamma);
        for i in 0..n {
            a[(i, i)] += 4.0 * gamma * curve.weights[i] * dn[i];
        }
    }
    let free: Vec<usize> = match boundary {
        JacobiBoundary::Dirichlet if !curve.closed => {
            let ends: Vec<usize> = curve.endpoints.iter().map(|e| e.node).collect();
            (0..n).filter(|i| !ends.contains(i)).collect()
        }
        _ => (0..n).collect(),
    };
    let matrix = DMatrix::from_fn(free.len(), free.len(), |i, j| a[(free[i], free[j])]);
    Ok(JacobiOperator {
        boundary,
        gamma,
        matrix,
        mass: free.iter().map(|&i| curve.weights[i]).collect(),
        free,
        nodes: n,
    })
}

impl JacobiOperator {
    /// Curve-node values of a vector of unknowns.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nodes];
        for (i, &k) in self.free.iter().enumerate() {
            out[k] = x[i];
        }
        out
    }
}

impl SpectralOperator for JacobiOperator {
    fn size(&self) -> usize {
        self.free.len()
    }

    fn mass(&self) -> &[f64] {
        &self.mass
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let v = nalgebra::DVector::from_column_slice(x);
        (&self.matrix * v).iter().copied().collect()
    }

    fn lowest(&self, k: usize, _opts: LanczosOptions) -> Result<EigenPairs> {
        Ok(dense_generalized(&self.matrix, &self.mass, k))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub eigenvalues: Vec<f64>,
    /// M-normalized, largest-magnitude entry positive.
    #[serde(skip)]
    pub eigenfunctions: Vec<Vec<f64>>,
    /// `|| M^{-1}(A phi - lambda M phi) ||_M`.
    pub residuals: Vec<f64>,
    /// `|<A phi, phi> - lambda|`.
    pub rayleigh_certificates: Vec<f64>,
    /// Largest off-diagonal entry of the M-Gram matrix minus the identity.
    pub gram_defect: f64,
}

/// Lowest `k` eigenpairs with residual and Rayleigh certificates.
pub fn eigenpairs(op: &dyn SpectralOperator, k: usize, opts: LanczosOptions) -> Result<SpectrumResult> {
    if k == 0 || k > MAX_EIGENPAIRS {
        return Err(invalid("k", format!("must lie in 1..={MAX_EIGENPAIRS}")));
    }
    if k > op.size() {
        return Err(invalid("k", "exceeds the number of unknowns"));
    }
    let pairs = op.lowest(k, opts)?;
    let m = op.mass();
    let mdot = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(m).map(|((x, y), w)| x * y * w).sum::<f64>();
    let mut eigenfunctions = Vec::with_capacity(k);
    let mut residuals = Vec::with_capacity(k);
    let mut certs = Vec::with_capacity(k);
    for (lam, mut v) in pairs.values.iter().copied().zip(pairs.vectors) {
        let nrm = mdot(&v, &v).sqrt();
        let big = v.iter().copied().fold(0.0_f64, |a, x| if x.abs() > a.abs() { x } else { a });
        let s = if big < 0.0 { -1.0 / nrm } else { 1.0 / nrm };
        v.iter_mut().for_each(|x| *x *= s);
        let av = op.apply(&v);
        let r: f64 = av.iter().zip(&v).zip(m).map(|((a, x), w)| (a - lam * w * x).powi(2) / w).sum::<f64>().sqrt();
        residuals.push(r);
        certs.push((av.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() - lam).abs());
        eigenfunctions.push(v);
    }
    let mut gram = 0.0_f64;
    for i in 0..eigenfunctions.len() {
        for j in 0..eigenfunctions.len() {
            let g = mdot(&eigenfunctions[i], &eigenfunctions[j]) - if i == j { 1.0 } else { 0.0 };
            gram = gram.max(g.abs());
        }
    }
    Ok(SpectrumResult { eigenvalues: pairs.values, eigenfunctions, residuals, rayleigh_certificates: certs, gram_defect: gram })
}

/// `<A phi, phi> / <M phi, phi>`.
pub fn rayleigh(op: &dyn SpectralOperator, phi: &[f64]) -> Result<f64> {
    if phi.len() != op.size() {
        return Err(Error::Contract("vector does not match the operator".into()));
    }
    let m: f64 = phi.iter().zip(op.mass()).map(|(x, w)| w * x * x).sum();
    if !(m > 0.0) {
        return Err(Error::Contract("zero vector".into()));
    }
    let a: f64 = op.apply(phi).iter().zip(phi).map(|(a, b)| a * b).sum();
    Ok(a / m)
}

/// Root of `mu tanh(mu) = a` by bisection; the lowest Robin eigenvalue of a
/// segment of half-length `l` with end coefficient `a` is `-(mu / l)^2` for `a l = mu tanh mu`.
pub fn robin_root(a: f64) -> f64 {
    let f = |m: f64| m * m.tanh() - a;
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
