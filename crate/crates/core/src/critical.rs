//! Heteroclinic profiles, Newton-solved critical points with optional mass
//! constraint and odd symmetry, and mass-corrected velocity fields.

use serde::{Deserialize, Serialize};

use crate::domain::{signed_distance_at, Domain, InterfaceCurve};
use crate::energies::{well_d, well_dd, ModelParams};
use crate::error::{invalid, Error, Result};
use crate::fields::{check_grid, divergence, ScalarField, VectorField};
use crate::linalg::SparseLu;

/// `tanh((x - x0) / eps)` at the given abscissae.
pub fn profile_1d(eps: f64, x: &[f64], x0: f64) -> Vec<f64> {
    x.iter().map(|&t| ((t - x0) / eps).tanh()).collect()
}

/// `-tanh(d / eps)`, which is `+1` on the `{u0 = 1}` side of the curve.
pub fn tanh_profile(domain: &Domain, curve: &InterfaceCurve, eps: f64) -> ScalarField {
    domain.scalar_fn(|x, y| -(signed_distance_at(curve, [x, y]) / eps).tanh())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    #[default]
    None,
    /// Odd under the reflection across the target interface line.
    OddAcrossInterface,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolveOptions {
    #[serde(default)]
    pub symmetry: Symmetry,
    /// Whether to backtrack on the residual norm.
    #[serde(default = "yes")]
    pub damping: bool,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn yes() -> bool {
    true
}
fn default_tol() -> f64 {
    1e-9
}
fn default_max_iter() -> usize {
    50
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { symmetry: Symmetry::None, damping: true, tol: default_tol(), max_iter: default_max_iter() }
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub u: ScalarField,
    /// Max-norm of the strong Euler–Lagrange residual.
    pub residual_norm: f64,
    pub lagrange_multiplier: Option<f64>,
    pub iterations: usize,
    pub symmetry: Symmetry,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveSummary {
    pub residual_norm: f64,
    pub lagrange_multiplier: Option<f64>,
    pub iterations: usize,
    pub symmetry: Symmetry,
    pub mass: f64,
}

impl SolveResult {
    pub fn summary(&self, domain: &Domain) -> SolveSummary {
        SolveSummary {
            residual_norm: self.residual_norm,
            lagrange_multiplier: self.lagrange_multiplier,
            iterations: self.iterations,
            symmetry: self.symmetry,
            mass: domain.mean(&self.u.values),
        }
    }
}

/// Strong residual `eps L_h u + W'(u)/eps + (8/3) gamma v - lambda` given
/// `v = (-Delta)^{-1} u`, and the multiplier minimizing it in the weighted
/// sense when the mass is constrained.
pub fn el_residual(domain: &Domain, p: &ModelParams, u: &[f64], v: Option<&[f64]>, constrained: bool) -> (Vec<f64>, Option<f64>) {
    let ku = domain.stiffness_apply(u);
    let mut r: Vec<f64> = (0..u.len())
        .map(|k| p.eps * ku[k] / domain.weights[k] + well_d(u[k]) / p.eps)
        .collect();
    if let Some(v) = v {
        for (rk, vk) in r.iter_mut().zip(v) {
            *rk += 8.0 / 3.0 * p.gamma * vk;
        }
    }
    let lambda = constrained.then(|| domain.mean(&r));
    if let Some(l) = lambda {
        r.iter_mut().for_each(|x| *x -= l);
    }
    (r, lambda)
}

/// Reduction to the odd subspace: `u = P alpha`, `u[rep] = alpha`,
/// `u[mirror] = -alpha`, nodes on the line fixed at zero.
struct OddMap {
    /// Reduced index and sign of each node (`None` on the line).
    slot: Vec<Option<(usize, f64)>>,
    reps: Vec<usize>,
}

impl OddMap {
    fn new(domain: &Domain, curve: &InterfaceCurve) -> Result<Self> {
        let (origin, normal) = match curve.kind {
            crate::domain::InterfaceKind::Segment { a, .. } | crate::domain::InterfaceKind::Diameter { a, .. } => (a, curve.normals[0]),
            crate::domain::InterfaceKind::Circle { .. } => {
                return Err(Error::Contract("odd symmetry needs a straight interface".into()));
            }
        };
        let refl = domain.reflection_map(origin, normal)?;
        let tol = 1e-9 * domain.diameter();
        let mut slot = vec![None; domain.len()];
        let mut reps = Vec::new();
        for k in 0..domain.len() {
            let d = signed_distance_at(curve, domain.point(k));
            if d < -tol {
                slot[k] = Some((reps.len(), 1.0));
                slot[refl[k]] = Some((reps.len(), -1.0));
                reps.push(k);
            }
        }
        for k in 0..domain.len() {
            let d = signed_distance_at(curve, domain.point(k));
            if d.abs() <= tol && refl[k] != k {
                return Err(Error::Geometry("reflection does not fix the nodes on the line".into()));
            }
        }
        Ok(OddMap { slot, reps })
    }
}

/// Damped Newton on the discrete Euler–Lagrange system
/// `eps K u + M W'(u)/eps + (8/3) gamma M v = lambda M 1`, `K v = M (u - mean u)`,
/// with `int v = 0` and, when `p.m` is set, `mean u = m`.
pub fn solve_critical(
    domain: &Domain,
    curve: Option<&InterfaceCurve>,
    p: &ModelParams,
    init: Option<&ScalarField>,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    p.validate()?;
    if !(opts.tol > 0.0) {
        return Err(invalid("tol", "must be positive"));
    }
    let n = domain.len();
    let mut u = match init {
        Some(f) => {
            check_grid(domain.id, f.grid)?;
            f.values.clone()
        }
        None => {
            let c = curve.ok_or_else(|| invalid("init", "needs an initial field or an interface"))?;
            tanh_profile(domain, c, p.eps).values
        }
    };
    let odd = match opts.symmetry {
        Symmetry::None => None,
        Symmetry::OddAcrossInterface => {
            let c = curve.ok_or_else(|| invalid("symmetry", "odd symmetry needs the interface"))?;
            if p.m.is_some_and(|m| m != 0.0) {
                return Err(invalid("m", "odd symmetry forces zero mass"));
            }
            let map = OddMap::new(domain, c)?;
            // Project the start onto the odd subspace.
            let mut w = vec![0.0; n];
            for k in 0..n {
                if let Some((s, sg)) = map.slot[k] {
                    w[k] = sg * u[map.reps[s]];
                }
            }
            u = w;
            Some(map)
        }
    };
    let constrained = p.m.is_some() && odd.is_none();
    if let (Some(m), None) = (p.m, &odd) {
        let shift = m - domain.mean(&u);
        u.iter_mut().for_each(|x| *x += shift);
    }
    let nonlocal = p.gamma != 0.0;
    let ws = if nonlocal { Some(crate::energies::Workspace::new(domain)?) } else { None };
    let potential = |u: &[f64]| ws.as_ref().map(|w| w.solve(u).0);

    let eval = |u: &[f64]| -> (Vec<f64>, Option<f64>, Option<Vec<f64>>) {
        let v = potential(u);
        let (r, l) = el_residual(domain, p, u, v.as_deref(), constrained);
        (r, l, v)
    };
    let norm = |r: &[f64]| r.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
    let wnorm = |r: &[f64]| domain.integrate(&r.iter().map(|x| x * x).collect::<Vec<_>>()).sqrt();

    let kt = domain.stiffness_triplets();
    let (mut r, mut lambda, mut v) = eval(&u);
    let mut res = norm(&r);
    let mut it = 0;
    while res > opts.tol {
        if it >= opts.max_iter {
            return Err(Error::NonConvergence { iterations: it, residual: res });
        }
        it += 1;
        // Core unknowns: u, then v when nonlocal. The multipliers nu (mean of v)
        // and lambda (mass) are dense borders handled by a Schur complement.
        let iv = n;
        let core = if nonlocal { 2 * n } else { n };
        let mut t: Vec<(usize, usize, f64)> = Vec::with_capacity(3 * kt.len());
        let mut rhs = vec![0.0; core];
        for &(a, b, c) in &kt {
            t.push((a, b, p.eps * c));
        }
        for k in 0..n {
            let w = domain.weights[k];
            t.push((k, k, w * well_dd(u[k]) / p.eps));
            // r already carries -lambda.
            rhs[k] = -w * r[k];
        }
        let mut border = Border::default();
        if nonlocal {
            let vv = v.as_ref().unwrap();
            let ubar = domain.mean(&u);
            let kv = domain.stiffness_apply(vv);
            for k in 0..n {
                let w = domain.weights[k];
                t.push((k, iv + k, 8.0 / 3.0 * p.gamma * w));
                t.push((iv + k, k, -w));
                rhs[iv + k] = -(kv[k] - w * (u[k] - ubar));
            }
            for &(a, b, c) in &kt {
                t.push((iv + a, iv + b, c));
            }
            let mut col = vec![0.0; core];
            let mut row = vec![0.0; core];
            for k in 0..n {
                col[iv + k] = domain.weights[k];
                row[iv + k] = domain.weights[k];
            }
            border.push(col, row, -domain.integrate(vv));
        }
        if constrained {
            let mut col = vec![0.0; core];
            let mut row = vec![0.0; core];
            for k in 0..n {
                col[k] = -domain.weights[k];
                row[k] = domain.weights[k];
            }
            border.push(col, row, -(domain.integrate(&u) - p.m.unwrap() * domain.measure()));
        }
        let step = match &odd {
            None => {
                if nonlocal {
                    // Pin the constant mode of the v-block; the rank-one
                    // correction goes into the border.
                    let c = kt.iter().filter(|e| e.0 == e.1).map(|e| e.2).fold(0.0, f64::max);
                    t.push((iv, iv, c));
                    let mut col = vec![0.0; core];
                    col[iv] = -c;
                    let mut row = vec![0.0; core];
                    row[iv] = 1.0;
                    border.push_with_diag(col, row, 0.0, -1.0);
                }
                let lu = SparseLu::new(core, &t).map_err(|_| singular_hint())?;
                border.solve(&lu, &rhs)?
            }
            Some(map) => reduced_step(map, n, nonlocal, &t, &rhs)?,
        };
        let mut s = 1.0;
        let base = wnorm(&r);
        loop {
            let trial: Vec<f64> = (0..n).map(|k| u[k] + s * step[k]).collect();
            let (rt, lt, vt) = eval(&trial);
            if !opts.damping || wnorm(&rt) < base || s <= 1.0 / 1024.0 {
                u = trial;
                r = rt;
                lambda = lt;
                v = vt;
                break;
            }
            s *= 0.5;
        }
        res = norm(&r);
        if !res.is_finite() {
            return Err(Error::NonConvergence { iterations: it, residual: res });
        }
    }
    let lagrange_multiplier = match (&odd, p.m) {
        (Some(_), Some(_)) => {
            let (r0, _) = el_residual(domain, p, &u, v.as_deref(), false);
            Some(domain.mean(&r0))
        }
        _ => lambda,
    };
    Ok(SolveResult {
        u: ScalarField::new(domain, u),
        residual_norm: res,
        lagrange_multiplier,
        iterations: it,
        symmetry: opts.symmetry,
    })
}

fn singular_hint() -> Error {
    Error::Singular("Newton Jacobian".into())
}

/// Galerkin reduction `P^T J P` of the Newton system onto the odd subspace
/// (both `u` and `v` are odd; the mean constraint on `v` is then automatic).
fn reduced_step(map: &OddMap, n: usize, nonlocal: bool, t: &[(usize, usize, f64)], rhs: &[f64]) -> Result<Vec<f64>> {
    let m = map.reps.len();
    let nred = if nonlocal { 2 * m } else { m };
    let red = |i: usize| -> Option<(usize, f64)> {
        if i < n {
            map.slot[i]
        } else if nonlocal && i < 2 * n {
            map.slot[i - n].map(|(s, g)| (m + s, g))
        } else {
            None
        }
    };
    let mut rt = Vec::with_capacity(t.len());
    for &(a, b, c) in t {
        if let (Some((ra, sa)), Some((rb, sb))) = (red(a), red(b)) {
            rt.push((ra, rb, sa * sb * c));
        }
    }
    let mut rr = vec![0.0; nred];
    for (i, &v) in rhs.iter().enumerate() {
        if let Some((ri, si)) = red(i) {
            rr[ri] += si * v;
        }
    }
    let lu = SparseLu::new(nred, &rt).map_err(|_| singular_hint())?;
    let x = lu.solve(&rr);
    let mut step = vec![0.0; n];
    for k in 0..n {
        if let Some((s, g)) = map.slot[k] {
            step[k] = g * x[s];
        }
    }
    Ok(step)
}

/// `eta^eps = eta + h beta` with `h = -int u div eta / int u div beta`,
/// so that `int u div eta^eps = 0`.
pub fn mass_correction_field(domain: &Domain, u: &ScalarField, eta: &VectorField, beta: &VectorField) -> Result<(VectorField, f64)> {
    check_grid(domain.id, u.grid)?;
    check_grid(domain.id, eta.grid)?;
    check_grid(domain.id, beta.grid)?;
    let de = divergence(domain, eta);
    let db = divergence(domain, beta);
    let num: f64 = domain.integrate(&u.values.iter().zip(&de).map(|(a, b)| a * b).collect::<Vec<_>>());
    let den: f64 = domain.integrate(&u.values.iter().zip(&db).map(|(a, b)| a * b).collect::<Vec<_>>());
    let scale = domain.integrate(&u.values.iter().zip(&db).map(|(a, b)| (a * b).abs()).collect::<Vec<_>>());
    if !(den.abs() > 1e-8 * scale.max(f64::MIN_POSITIVE)) {
        return Err(Error::Degenerate(format!("int u div beta = {den:e} is too small to correct the mass")));
    }
    let h = -num / den;
    let mut out = eta.axpy(h, beta);
    out.tangent = eta.tangent && beta.tangent;
    Ok((out, h))
}

/// Dense rank-k border `[[C, U], [V^T, D]]` around a sparse core `C`, where
/// `D` is diagonal.
#[derive(Default)]
struct Border {
    cols: Vec<Vec<f64>>,
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    diag: Vec<f64>,
}

impl Border {
    fn push(&mut self, col: Vec<f64>, row: Vec<f64>, rhs: f64) {
        self.push_with_diag(col, row, rhs, 0.0);
    }

    fn push_with_diag(&mut self, col: Vec<f64>, row: Vec<f64>, rhs: f64, d: f64) {
        self.cols.push(col);
        self.rows.push(row);
        self.rhs.push(rhs);
        self.diag.push(d);
    }

    /// Core part of the solution.
    fn solve(&self, lu: &SparseLu, b: &[f64]) -> Result<Vec<f64>> {
        let y0 = lu.solve(b);
        let k = self.cols.len();
        if k == 0 {
            return Ok(y0);
        }
        let cu: Vec<Vec<f64>> = self.cols.iter().map(|c| lu.solve(c)).collect();
        let dotv = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let s = nalgebra::DMatrix::from_fn(k, k, |i, j| (if i == j { self.diag[i] } else { 0.0 }) - dotv(&self.rows[i], &cu[j]));
        let g = nalgebra::DVector::from_fn(k, |i, _| self.rhs[i] - dotv(&self.rows[i], &y0));
        let z = s.lu().solve(&g).ok_or_else(singular_hint)?;
        let mut y = y0;
        for j in 0..k {
            for (yi, ci) in y.iter_mut().zip(&cu[j]) {
                *yi -= z[j] * ci;
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, build_interface, DomainSpec, InterfaceSpec};
    use crate::energies::allen_cahn_energy;

    fn lamella(n: usize) -> (Domain, InterfaceCurve) {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [n, n] }).unwrap();
        let c = build_interface(&d, &InterfaceSpec::Segment { x: Some(0.5), from: None, to: None, ds: None }).unwrap();
        (d, c)
    }

    #[test]
    fn profile_values() {
        let x = [0.3, 0.5, 10.0, -10.0];
        let u = profile_1d(0.1, &x, 0.5);
        assert!(u[1] == 0.0 && (u[2] - 1.0).abs() < 1e-12 && (u[3] + 1.0).abs() < 1e-12);
        assert!(u[0] < 0.0);
    }

    #[test]
    fn profile_energy_is_four_thirds() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 0.03], n: [801, 16] }).unwrap();
        let eps = 0.02;
        let u = d.scalar_fn(|x, _| ((x - 0.5) / eps).tanh());
        let e = allen_cahn_energy(&d, &u, &ModelParams::allen_cahn(eps).unwrap()).unwrap() / 0.03;
        assert!((e - 4.0 / 3.0).abs() < 1e-3, "{e}");
    }

    #[test]
    fn lamella_newton() {
        let (d, c) = lamella(65);
        let p = ModelParams::allen_cahn(0.05).unwrap();
        let r = solve_critical(&d, Some(&c), &p, None, &SolveOptions { tol: 1e-10, ..Default::default() }).unwrap();
        assert!(r.residual_norm <= 1e-10);
        // nodal line at x = 1/2: u vanishes on the middle column
        let h = 1.0 / 64.0;
        for k in 0..d.len() {
            if (d.x[k] - 0.5).abs() < 1e-12 {
                assert!(r.u.values[k].abs() < 1e-8);
            }
            if (d.x[k] - 0.5).abs() > h {
                assert!(r.u.values[k] * (0.5 - d.x[k]) > 0.0);
            }
        }
    }

    #[test]
    fn odd_symmetry_matches_full_solve() {
        let (d, c) = lamella(33);
        let p = ModelParams::new(0.08, 0.0, None).unwrap();
        let a = solve_critical(&d, Some(&c), &p, None, &SolveOptions::default()).unwrap();
        let b = solve_critical(&d, Some(&c), &p, None, &SolveOptions { symmetry: Symmetry::OddAcrossInterface, ..Default::default() }).unwrap();
        let diff = a.u.values.iter().zip(&b.u.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn disk_diameter_odd() {
        let d = build_domain(&DomainSpec::Disk { radius: 1.0, n: [41, 128] }).unwrap();
        let c = build_interface(&d, &InterfaceSpec::Diameter { angle: 0.0, ds: None }).unwrap();
        let p = ModelParams::allen_cahn(0.05).unwrap();
        let r = solve_critical(&d, Some(&c), &p, None, &SolveOptions { symmetry: Symmetry::OddAcrossInterface, ..Default::default() }).unwrap();
        assert!(r.residual_norm <= 1e-9);
        for k in 0..d.len() {
            if d.y[k].abs() < 1e-12 {
                assert_eq!(r.u.values[k], 0.0);
            }
        }
    }

    #[test]
    fn constrained_ok_lamella() {
        let (d, c) = lamella(65);
        let p = ModelParams::new(0.05, 1.0, Some(0.0)).unwrap();
        let r = solve_critical(&d, Some(&c), &p, None, &SolveOptions::default()).unwrap();
        assert!(r.lagrange_multiplier.unwrap().abs() <= 1e-8, "{:?}", r.lagrange_multiplier);
        assert!(d.mean(&r.u.values).abs() < 1e-10);
        // Off-center start: the multiplier is nonzero but the mass is held.
        let c2 = build_interface(&d, &InterfaceSpec::Segment { x: Some(0.375), from: None, to: None, ds: None }).unwrap();
        let p = ModelParams::new(0.05, 1.0, Some(-0.2)).unwrap();
        let r = solve_critical(&d, Some(&c2), &p, None, &SolveOptions::default()).unwrap();
        assert!((d.mean(&r.u.values) + 0.2).abs() < 1e-10);
        assert!(r.residual_norm <= 1e-9);
    }

    #[test]
    fn mass_correction() {
        let (d, _) = lamella(33);
        let u = d.scalar_fn(|x, _| (0.5 - x) * 3.0);
        let mut eta = d.vector_fn(|x, y| [(std::f64::consts::PI * x).sin() * y, 0.0]);
        eta.tangent = true;
        let mut beta = d.vector_fn(|x, _| [(std::f64::consts::PI * x).sin(), 0.0]);
        beta.tangent = true;
        let (e, h) = mass_correction_field(&d, &u, &eta, &beta).unwrap();
        let de = divergence(&d, &e);
        let c = d.integrate(&u.values.iter().zip(&de).map(|(a, b)| a * b).collect::<Vec<_>>());
        assert!(c.abs() < 1e-12, "{c}");
        assert!(h != 0.0);
        let (_, h0) = mass_correction_field(&d, &u, &e, &beta).unwrap();
        assert!(h0.abs() < 1e-12);
        let zero = VectorField::zeros(&d);
        assert!(matches!(mass_correction_field(&d, &u, &eta, &zero), Err(Error::Degenerate(_))));
    }
}
