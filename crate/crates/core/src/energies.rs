//! Allen–Cahn and Ohta–Kawasaki energies, equipartition diagnostics and the
//! Neumann Poisson problem behind the nonlocal term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Domain;
use crate::error::{invalid, Error, Result};
use crate::fields::{check_grid, gradient, ScalarField};
use crate::linalg::PoissonSolver;

/// A smooth density `F(z, p)` with its first and second partial derivatives.
pub trait Integrand: Send + Sync {
    fn name(&self) -> &str;
    fn f(&self, z: f64, p: [f64; 2]) -> f64;
    fn f_z(&self, z: f64, p: [f64; 2]) -> f64;
    fn f_p(&self, z: f64, p: [f64; 2]) -> [f64; 2];
    fn f_zz(&self, z: f64, p: [f64; 2]) -> f64;
    fn f_zp(&self, z: f64, p: [f64; 2]) -> [f64; 2];
    fn f_pp(&self, z: f64, p: [f64; 2]) -> [[f64; 2]; 2];
}

/// Compares the supplied derivatives against central differences of `F` at
/// random probes. Returns the worst relative error, or a contract error
/// above `1e-6`.
pub fn self_test(f: &dyn Integrand, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut check = |a: f64, b: f64, scale: f64| {
        let e = (a - b).abs() / (1.0 + scale + a.abs());
        worst = worst.max(e);
    };
    for _ in 0..32 {
        let z = rng.gen_range(-1.5..1.5);
        let p = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
        let h = 1e-5;
        let scale = f.f(z, p).abs();
        let dz = |g: &dyn Fn(f64) -> f64| (g(z + h) - g(z - h)) / (2.0 * h);
        let dp = |g: &dyn Fn([f64; 2]) -> f64, i: usize| {
            let (mut a, mut b) = (p, p);
            a[i] += h;
            b[i] -= h;
            (g(a) - g(b)) / (2.0 * h)
        };
        check(f.f_z(z, p), dz(&|s| f.f(s, p)), scale);
        check(f.f_zz(z, p), dz(&|s| f.f_z(s, p)), scale);
        let fp = f.f_p(z, p);
        let fzp = f.f_zp(z, p);
        let fpp = f.f_pp(z, p);
        check(fpp[0][1], fpp[1][0], scale);
        for i in 0..2 {
            check(fp[i], dp(&|q| f.f(z, q), i), scale);
            check(fzp[i], dz(&|s| f.f_p(s, p)[i]), scale);
            for j in 0..2 {
                check(fpp[i][j], dp(&|q| f.f_p(z, q)[i], j), scale);
            }
        }
    }
    if worst > 1e-6 {
        return Err(Error::Contract(format!("integrand '{}' derivatives disagree with finite differences ({worst:e})", f.name())));
    }
    Ok(worst)
}

pub fn well(u: f64) -> f64 {
    let a = 1.0 - u * u;
    0.5 * a * a
}

pub fn well_d(u: f64) -> f64 {
    2.0 * (u * u * u - u)
}

pub fn well_dd(u: f64) -> f64 {
    2.0 * (3.0 * u * u - 1.0)
}

/// `eps |p|^2 / 2 + (1 - z^2)^2 / (2 eps)`.
#[derive(Clone, Copy, Debug)]
pub struct AllenCahnIntegrand {
    pub eps: f64,
}

impl Integrand for AllenCahnIntegrand {
    fn name(&self) -> &str {
        "allen_cahn"
    }
    fn f(&self, z: f64, p: [f64; 2]) -> f64 {
        0.5 * self.eps * (p[0] * p[0] + p[1] * p[1]) + well(z) / self.eps
    }
    fn f_z(&self, z: f64, _: [f64; 2]) -> f64 {
        well_d(z) / self.eps
    }
    fn f_p(&self, _: f64, p: [f64; 2]) -> [f64; 2] {
        [self.eps * p[0], self.eps * p[1]]
    }
    fn f_zz(&self, z: f64, _: [f64; 2]) -> f64 {
        well_dd(z) / self.eps
    }
    fn f_zp(&self, _: f64, _: [f64; 2]) -> [f64; 2] {
        [0.0, 0.0]
    }
    fn f_pp(&self, _: f64, _: [f64; 2]) -> [[f64; 2]; 2] {
        [[self.eps, 0.0], [0.0, self.eps]]
    }
}

/// `|p|^2 / 2`.
#[derive(Clone, Copy, Debug)]
pub struct DirichletIntegrand;

impl Integrand for DirichletIntegrand {
    fn name(&self) -> &str {
        "dirichlet"
    }
    fn f(&self, _: f64, p: [f64; 2]) -> f64 {
        0.5 * (p[0] * p[0] + p[1] * p[1])
    }
    fn f_z(&self, _: f64, _: [f64; 2]) -> f64 {
        0.0
    }
    fn f_p(&self, _: f64, p: [f64; 2]) -> [f64; 2] {
        p
    }
    fn f_zz(&self, _: f64, _: [f64; 2]) -> f64 {
        0.0
    }
    fn f_zp(&self, _: f64, _: [f64; 2]) -> [f64; 2] {
        [0.0, 0.0]
    }
    fn f_pp(&self, _: f64, _: [f64; 2]) -> [[f64; 2]; 2] {
        [[1.0, 0.0], [0.0, 1.0]]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantIntegrand(pub f64);

impl Integrand for ConstantIntegrand {
    fn name(&self) -> &str {
        "constant"
    }
    fn f(&self, _: f64, _: [f64; 2]) -> f64 {
        self.0
    }
    fn f_z(&self, _: f64, _: [f64; 2]) -> f64 {
        0.0
    }
    fn f_p(&self, _: f64, _: [f64; 2]) -> [f64; 2] {
        [0.0, 0.0]
    }
    fn f_zz(&self, _: f64, _: [f64; 2]) -> f64 {
        0.0
    }
    fn f_zp(&self, _: f64, _: [f64; 2]) -> [f64; 2] {
        [0.0, 0.0]
    }
    fn f_pp(&self, _: f64, _: [f64; 2]) -> [[f64; 2]; 2] {
        [[0.0, 0.0], [0.0, 0.0]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub eps: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub m: Option<f64>,
}

impl ModelParams {
    pub fn new(eps: f64, gamma: f64, m: Option<f64>) -> Result<Self> {
        let p = ModelParams { eps, gamma, m };
        p.validate()?;
        Ok(p)
    }

    pub fn allen_cahn(eps: f64) -> Result<Self> {
        Self::new(eps, 0.0, None)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(invalid("eps", format!("must be positive, got {}", self.eps)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(invalid("gamma", format!("must be nonnegative, got {}", self.gamma)));
        }
        if let Some(m) = self.m {
            if !(m > -1.0 && m < 1.0) {
                return Err(invalid("m", format!("must lie in (-1, 1), got {m}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct EnergyReport {
    pub ac_energy: f64,
    pub nonlocal_energy: f64,
    pub total: f64,
    pub discrepancy_L1: f64,
    pub phi_total_variation: f64,
    pub phi_vs_gradient: f64,
}

/// `Phi(a) = int_0^a |s^2 - 1| ds`.
pub fn phi(a: f64) -> f64 {
    if a.abs() <= 1.0 {
        a - a * a * a / 3.0
    } else {
        a * a * a / 3.0 - a + a.signum() * 4.0 / 3.0
    }
}

/// Discrete Allen–Cahn energy: `eps/2 u^T K u + sum_k w_k W(u_k) / eps`.
///
/// The gradient part is the edge form of the grid stiffness, so Newton,
/// spectra and variations all differentiate the same discrete functional.
pub fn allen_cahn_energy(domain: &Domain, u: &ScalarField, p: &ModelParams) -> Result<f64> {
    check_grid(domain.id, u.grid)?;
    p.validate()?;
    let v = &u.values;
    let grad = 0.5 * p.eps * domain.dirichlet_form(v, v);
    let pot: f64 = domain.weights.iter().zip(v).map(|(w, &x)| w * well(x)).sum::<f64>() / p.eps;
    Ok(grad + pot)
}

/// Equipartition diagnostics with nodal stencil gradients. The nonlocal
/// entries are left at zero; `total` equals `ac_energy`.
pub fn discrepancy_report(domain: &Domain, u: &ScalarField, p: &ModelParams) -> Result<EnergyReport> {
    let ac = allen_cahn_energy(domain, u, p)?;
    let v = &u.values;
    let g = gradient(domain, v);
    let ph: Vec<f64> = v.iter().map(|&a| phi(a)).collect();
    let gp = gradient(domain, &ph);
    let (mut disc, mut tv, mut pvg) = (0.0, 0.0, 0.0);
    for k in 0..domain.len() {
        let w = domain.weights[k];
        let g2 = g.x[k] * g.x[k] + g.y[k] * g.y[k];
        let a = 1.0 - v[k] * v[k];
        disc += w * (p.eps * g2 - a * a / p.eps).abs();
        let gphi = gp.x[k].hypot(gp.y[k]);
        tv += w * gphi;
        pvg += w * (p.eps * g2 - gphi).abs();
    }
    Ok(EnergyReport {
        ac_energy: ac,
        nonlocal_energy: 0.0,
        total: ac,
        discrepancy_L1: disc,
        phi_total_variation: tv,
        phi_vs_gradient: pvg,
    })
}

/// A domain together with its factored Neumann Poisson solver.
pub struct Workspace<'a> {
    pub domain: &'a Domain,
    solver: PoissonSolver,
}

#[derive(Clone, Debug)]
pub struct PoissonResult {
    pub v: ScalarField,
    pub mean: f64,
    /// Max-norm residual of `-L v - (u - mean)`.
    pub residual: f64,
}

impl<'a> Workspace<'a> {
    pub fn new(domain: &'a Domain) -> Result<Self> {
        Ok(Workspace { domain, solver: PoissonSolver::new(domain)? })
    }

    /// Raw solve of `-L v = f - mean(f)`, `int v = 0`.
    pub fn solve(&self, f: &[f64]) -> (Vec<f64>, f64) {
        self.solver.solve(&self.domain.weights, f)
    }

    /// Discrete B form `v_a^T K v_b`; equals `int v_a (b - mean b)`.
    pub fn b_form(&self, a: &[f64], b: &[f64]) -> f64 {
        let (va, _) = self.solve(a);
        let (vb, _) = self.solve(b);
        self.domain.dirichlet_form(&va, &vb)
    }
}

pub fn poisson_neumann(ws: &Workspace, u: &ScalarField) -> Result<PoissonResult> {
    let d = ws.domain;
    check_grid(d.id, u.grid)?;
    let (mut v, mean) = ws.solve(&u.values);
    let resid = |v: &[f64]| -> Vec<f64> {
        let lap = d.laplacian(v);
        (0..v.len()).map(|k| u.values[k] - mean + lap[k]).collect()
    };
    let scale = u.values.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut r = resid(&v);
    let mut res = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if res > 1e-10 * scale {
        // One step of iterative refinement.
        let (dv, _) = ws.solve(&r);
        for (a, b) in v.iter_mut().zip(&dv) {
            *a += b;
        }
        r = resid(&v);
        res = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if res > 1e-10 * scale {
            return Err(Error::LinearSolver { reason: "neumann poisson".into(), residual: res });
        }
    }
    Ok(PoissonResult { v: ScalarField::new(d, v), mean, residual: res })
}

/// `B(u) = int |grad v|^2` in the discrete form `v^T K v`.
pub fn nonlocal_energy(ws: &Workspace, u: &ScalarField) -> Result<f64> {
    let pr = poisson_neumann(ws, u)?;
    Ok(ws.domain.dirichlet_form(&pr.v.values, &pr.v.values))
}

pub fn ohta_kawasaki_energy(ws: &Workspace, u: &ScalarField, p: &ModelParams) -> Result<EnergyReport> {
    let mut r = discrepancy_report(ws.domain, u, p)?;
    r.nonlocal_energy = if p.gamma == 0.0 { 0.0 } else { nonlocal_energy(ws, u)? };
    r.total = r.ac_energy + 4.0 / 3.0 * p.gamma * r.nonlocal_energy;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, DomainSpec};
    use std::f64::consts::PI;

    #[test]
    fn shipped_integrands_pass_self_test() {
        assert!(self_test(&AllenCahnIntegrand { eps: 0.1 }, 1).unwrap() < 1e-7);
        assert!(self_test(&DirichletIntegrand, 2).is_ok());
        assert!(self_test(&ConstantIntegrand(2.0), 3).is_ok());
    }

    struct Broken;
    impl Integrand for Broken {
        fn name(&self) -> &str {
            "broken"
        }
        fn f(&self, z: f64, _: [f64; 2]) -> f64 {
            z * z
        }
        fn f_z(&self, z: f64, _: [f64; 2]) -> f64 {
            z
        }
        fn f_p(&self, _: f64, _: [f64; 2]) -> [f64; 2] {
            [0.0; 2]
        }
        fn f_zz(&self, _: f64, _: [f64; 2]) -> f64 {
            2.0
        }
        fn f_zp(&self, _: f64, _: [f64; 2]) -> [f64; 2] {
            [0.0; 2]
        }
        fn f_pp(&self, _: f64, _: [f64; 2]) -> [[f64; 2]; 2] {
            [[0.0; 2]; 2]
        }
    }

    #[test]
    fn self_test_rejects_wrong_derivative() {
        assert!(matches!(self_test(&Broken, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn energy_trivial_values() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [17, 17] }).unwrap();
        let p = ModelParams::allen_cahn(0.1).unwrap();
        assert_eq!(allen_cahn_energy(&d, &ScalarField::constant(&d, 1.0), &p).unwrap(), 0.0);
        let e0 = allen_cahn_energy(&d, &ScalarField::zeros(&d), &p).unwrap();
        assert!((e0 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn phi_values() {
        assert!((phi(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((phi(-1.0) + 2.0 / 3.0).abs() < 1e-15);
        // continuity and derivative |a^2 - 1| outside
        assert!((phi(1.0 + 1e-9) - phi(1.0)).abs() < 1e-12);
        let h = 1e-6;
        assert!(((phi(2.0 + h) - phi(2.0 - h)) / (2.0 * h) - 3.0).abs() < 1e-6);
        assert!(((phi(-2.0 + h) - phi(-2.0 - h)) / (2.0 * h) - 3.0).abs() < 1e-6);
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(-0.1, 0.0, None).is_err());
        assert!(ModelParams::new(0.1, -1.0, None).is_err());
        assert!(ModelParams::new(0.1, 1.0, Some(1.0)).is_err());
        assert!(ModelParams::new(0.1, 1.0, Some(0.2)).is_ok());
    }

    #[test]
    fn poisson_on_cosine_mode() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [2.0, 1.0], n: [129, 65] }).unwrap();
        let ws = Workspace::new(&d).unwrap();
        let u = d.scalar_fn(|x, _| (PI * x / 2.0).cos());
        let pr = poisson_neumann(&ws, &u).unwrap();
        let c = (2.0 / PI) * (2.0 / PI);
        for k in 0..d.len() {
            assert!((pr.v.values[k] - c * u.values[k]).abs() < 1e-4 * c);
        }
        let b = nonlocal_energy(&ws, &u).unwrap();
        assert!((b - c * 1.0).abs() < 1e-3 * c);
        let ibp = d.integrate(&pr.v.values.iter().zip(&u.values).map(|(a, b)| a * (b - pr.mean)).collect::<Vec<_>>());
        assert!((b - ibp).abs() < 1e-10 * b);
    }

    #[test]
    fn ok_total_combines_terms() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [33, 33] }).unwrap();
        let ws = Workspace::new(&d).unwrap();
        let u = d.scalar_fn(|x, _| ((x - 0.5) / 0.1).tanh());
        let p = ModelParams::new(0.1, 1.0, Some(0.0)).unwrap();
        let r = ohta_kawasaki_energy(&ws, &u, &p).unwrap();
        assert!(r.nonlocal_energy > 0.0);
        assert!((r.total - r.ac_energy - 4.0 / 3.0 * r.nonlocal_energy).abs() <= 1e-12 * r.total);
        let r0 = ohta_kawasaki_energy(&ws, &u, &ModelParams::allen_cahn(0.1).unwrap()).unwrap();
        assert_eq!(r0.total, r0.ac_energy);
    }
}
