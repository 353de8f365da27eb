//! First and second Gateaux and inner variations, a deformation oracle
//! and the identity auditor.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energies::{self_test, well, well_d, well_dd, AllenCahnIntegrand, Integrand, ModelParams, Workspace};
use crate::error::{Error, Result};
use crate::fields::{check_grid, gradient, jacobian, polynomial_preimages, variation_fields, StencilInterpolant, ScalarField, VectorField};

/// A functional on grid fields.
///
/// `Local` integrates `F(u, grad u)` with nodal stencil gradients.
/// `AllenCahn` uses the stiffness edge form for the gradient term (the
/// functional the critical-point and spectral solvers work with).
#[derive(Clone)]
pub enum Functional {
    Local(Arc<dyn Integrand>),
    AllenCahn { eps: f64 },
    NonlocalB,
    OhtaKawasaki(ModelParams),
}

impl std::fmt::Debug for Functional {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Functional::Local(i) => write!(f, "Local({})", i.name()),
            Functional::AllenCahn { eps } => write!(f, "AllenCahn {{ eps: {eps} }}"),
            Functional::NonlocalB => write!(f, "NonlocalB"),
            Functional::OhtaKawasaki(p) => write!(f, "OhtaKawasaki({p:?})"),
        }
    }
}

impl Functional {
    /// Registers a local integrand after its derivative self-test.
    pub fn local(integrand: Arc<dyn Integrand>) -> Result<Self> {
        self_test(integrand.as_ref(), 0x1d)?;
        Ok(Functional::Local(integrand))
    }

    fn parts(&self) -> (Option<Local>, f64) {
        match self {
            Functional::Local(i) => (Some(Local::Nodal(i.clone())), 0.0),
            Functional::AllenCahn { eps } => (Some(Local::Edge(*eps)), 0.0),
            Functional::NonlocalB => (None, 1.0),
            Functional::OhtaKawasaki(p) => (Some(Local::Edge(p.eps)), 4.0 / 3.0 * p.gamma),
        }
    }

    pub fn value(&self, ws: &Workspace, u: &[f64]) -> f64 {
        let (loc, c) = self.parts();
        let mut a = loc.map_or(0.0, |l| l.value(ws, u));
        if c != 0.0 {
            let (v, _) = ws.solve(u);
            a += c * ws.domain.dirichlet_form(&v, &v);
        }
        a
    }

    /// `dA(u, phi)`.
    pub fn first(&self, ws: &Workspace, u: &[f64], phi: &[f64]) -> f64 {
        let (loc, c) = self.parts();
        let mut a = loc.map_or(0.0, |l| l.first(ws, u, phi));
        if c != 0.0 {
            let (v, _) = ws.solve(u);
            a += c * 2.0 * ws.domain.integrate(&mul(&v, phi));
        }
        a
    }

    /// `d^2 A(u, phi)`.
    pub fn second(&self, ws: &Workspace, u: &[f64], phi: &[f64]) -> f64 {
        let (loc, c) = self.parts();
        let mut a = loc.map_or(0.0, |l| l.second(ws, u, phi));
        if c != 0.0 {
            let (v, _) = ws.solve(phi);
            a += c * 2.0 * ws.domain.dirichlet_form(&v, &v);
        }
        a
    }
}

enum Local {
    Nodal(Arc<dyn Integrand>),
    Edge(f64),
}

fn mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

impl Local {
    fn value(&self, ws: &Workspace, u: &[f64]) -> f64 {
        let d = ws.domain;
        match self {
            Local::Edge(eps) => {
                0.5 * eps * d.dirichlet_form(u, u) + d.weights.iter().zip(u).map(|(w, &x)| w * well(x)).sum::<f64>() / eps
            }
            Local::Nodal(f) => {
                let g = gradient(d, u);
                (0..d.len()).map(|k| d.weights[k] * f.f(u[k], g.at(k))).sum()
            }
        }
    }

    fn first(&self, ws: &Workspace, u: &[f64], phi: &[f64]) -> f64 {
        let d = ws.domain;
        match self {
            Local::Edge(eps) => {
                eps * d.dirichlet_form(u, phi)
                    + (0..d.len()).map(|k| d.weights[k] * well_d(u[k]) * phi[k]).sum::<f64>() / eps
            }
            Local::Nodal(f) => {
                let g = gradient(d, u);
                let gp = gradient(d, phi);
                (0..d.len())
                    .map(|k| {
                        let p = g.at(k);
                        let fp = f.f_p(u[k], p);
                        d.weights[k] * (f.f_z(u[k], p) * phi[k] + fp[0] * gp.x[k] + fp[1] * gp.y[k])
                    })
                    .sum()
            }
        }
    }

    fn second(&self, ws: &Workspace, u: &[f64], phi: &[f64]) -> f64 {
        let d = ws.domain;
        match self {
            Local::Edge(eps) => {
                eps * d.dirichlet_form(phi, phi)
                    + (0..d.len()).map(|k| d.weights[k] * well_dd(u[k]) * phi[k] * phi[k]).sum::<f64>() / eps
            }
            Local::Nodal(f) => {
                let g = gradient(d, u);
                let gp = gradient(d, phi);
                (0..d.len())
                    .map(|k| {
                        let p = g.at(k);
                        let q = gp.at(k);
                        let zp = f.f_zp(u[k], p);
                        let pp = f.f_pp(u[k], p);
                        let quad = pp[0][0] * q[0] * q[0] + 2.0 * pp[0][1] * q[0] * q[1] + pp[1][1] * q[1] * q[1];
                        d.weights[k]
                            * (f.f_zz(u[k], p) * phi[k] * phi[k] + 2.0 * phi[k] * (zp[0] * q[0] + zp[1] * q[1]) + quad)
                    })
                    .sum()
            }
        }
    }
}

/// `(dA(u, phi), d^2A(u, phi))`.
pub fn gateaux(ws: &Workspace, f: &Functional, u: &ScalarField, phi: &ScalarField) -> Result<(f64, f64)> {
    check_grid(ws.domain.id, u.grid)?;
    check_grid(ws.domain.id, phi.grid)?;
    Ok((f.first(ws, &u.values, &phi.values), f.second(ws, &u.values, &phi.values)))
}

/// `grad u . eta` at the nodes.
pub fn normal_derivative_field(ws: &Workspace, u: &ScalarField, eta: &VectorField) -> Vec<f64> {
    let g = gradient(ws.domain, &u.values);
    (0..u.len()).map(|k| g.x[k] * eta.x[k] + g.y[k] * eta.y[k]).collect()
}

fn check3(ws: &Workspace, u: &ScalarField, eta: &VectorField, zeta: Option<&VectorField>) -> Result<()> {
    check_grid(ws.domain.id, u.grid)?;
    check_grid(ws.domain.id, eta.grid)?;
    if let Some(z) = zeta {
        check_grid(ws.domain.id, z.grid)?;
    }
    Ok(())
}

/// Inner variations by direct calculation: the local part integrates the
/// closed-form integrands in `psi = grad u . eta` and `X0`; the nonlocal part
/// uses the Green representation `-2 int v (grad u . eta)` and
/// `2 int int G psi psi + 2 int v X0`.
pub fn inner_direct(ws: &Workspace, f: &Functional, u: &ScalarField, eta: &VectorField, zeta: &VectorField) -> Result<(f64, f64)> {
    check3(ws, u, eta, Some(zeta))?;
    let d = ws.domain;
    let vf = variation_fields(d, eta, Some(zeta), u)?;
    let psi = normal_derivative_field(ws, u, eta);
    let x0 = &vf.x0.values;
    let (loc, c) = f.parts();
    let (mut a1, mut a2) = (0.0, 0.0);
    if let Some(l) = loc {
        match &l {
            Local::Nodal(fi) => {
                let g = gradient(d, &u.values);
                let gpsi = gradient(d, &psi);
                let gx0 = gradient(d, x0);
                for k in 0..d.len() {
                    let (z, p) = (u.values[k], g.at(k));
                    let fp = fi.f_p(z, p);
                    let zp = fi.f_zp(z, p);
                    let pp = fi.f_pp(z, p);
                    let q = gpsi.at(k);
                    let w = d.weights[k];
                    a1 += w * (fi.f_z(z, p) * (-psi[k]) + fp[0] * (-q[0]) + fp[1] * (-q[1]));
                    let quad = pp[0][0] * q[0] * q[0] + 2.0 * pp[0][1] * q[0] * q[1] + pp[1][1] * q[1] * q[1];
                    a2 += w
                        * (fi.f_zz(z, p) * psi[k] * psi[k] + 2.0 * psi[k] * (zp[0] * q[0] + zp[1] * q[1]) + quad);
                    a2 += w * (fi.f_z(z, p) * x0[k] + fp[0] * gx0.x[k] + fp[1] * gx0.y[k]);
                }
            }
            Local::Edge(_) => {
                let mpsi: Vec<f64> = psi.iter().map(|v| -v).collect();
                a1 += l.first(ws, &u.values, &mpsi);
                a2 += l.second(ws, &u.values, &mpsi) + l.first(ws, &u.values, x0);
            }
        }
    }
    if c != 0.0 {
        let (v, _) = ws.solve(&u.values);
        let (vpsi, _) = ws.solve(&psi);
        a1 += c * (-2.0 * d.integrate(&mul(&v, &psi)));
        a2 += c * (2.0 * d.dirichlet_form(&vpsi, &vpsi) + 2.0 * d.integrate(&mul(&v, x0)));
    }
    Ok((a1, a2))
}

/// Inner variations for tangent `eta` with `zeta = Z` by the change-of-variables
/// formulas (`F div eta - F_p . (grad u . grad eta)` and its second-order
/// analogue with `X`, `Y`). The Allen–Cahn gradient term is integrated
/// nodally here. The nonlocal part has no separate tangent formula and is
/// taken from [`inner_direct`] with `zeta = Z`.
pub fn inner_tangent(ws: &Workspace, f: &Functional, u: &ScalarField, eta: &VectorField) -> Result<(f64, f64)> {
    check3(ws, u, eta, None)?;
    if !eta.tangent {
        return Err(Error::Contract("inner_tangent requires a tangency-flagged velocity field".into()));
    }
    let d = ws.domain;
    let (loc, c) = f.parts();
    let (mut a1, mut a2) = (0.0, 0.0);
    let vf = variation_fields(d, eta, None, u)?;
    if let Some(l) = loc {
        let fi: Arc<dyn Integrand> = match l {
            Local::Nodal(fi) => fi,
            Local::Edge(eps) => Arc::new(AllenCahnIntegrand { eps }),
        };
        let g = gradient(d, &u.values);
        let j = jacobian(d, eta);
        for k in 0..d.len() {
            let (z, p) = (u.values[k], g.at(k));
            let fv = fi.f(z, p);
            let fp = fi.f_p(z, p);
            let pp = fi.f_pp(z, p);
            // (grad u . grad eta)^i = u_j d_i eta^j, with J[j][i] = d_i eta^j
            let b = [p[0] * j.xx[k] + p[1] * j.yx[k], p[0] * j.xy[k] + p[1] * j.yy[k]];
            let div = vf.div_eta[k];
            let fpb = fp[0] * b[0] + fp[1] * b[1];
            let y = vf.y.at(k);
            let w = d.weights[k];
            a1 += w * (fv * div - fpb);
            let quad = pp[0][0] * b[0] * b[0] + 2.0 * pp[0][1] * b[0] * b[1] + pp[1][1] * b[1] * b[1];
            a2 += w * (fv * vf.x.values[k] - 2.0 * fpb * div - 2.0 * (fp[0] * y[0] + fp[1] * y[1]) + quad);
        }
    }
    if c != 0.0 {
        let (b1, b2) = inner_direct(ws, &Functional::NonlocalB, u, eta, &vf.z)?;
        a1 += c * b1;
        a2 += c * b2;
    }
    Ok((a1, a2))
}

/// Default oracle step `1e-2 * diameter / max|eta|`.
pub fn default_t0(ws: &Workspace, eta: &VectorField) -> f64 {
    let m = eta.max_norm();
    if m == 0.0 {
        1e-2
    } else {
        1e-2 * ws.domain.diameter() / m
    }
}

/// Deformation oracle: `A(u o Phi_t^{-1})` on the fixed grid with
/// `Phi_t = x + t eta + t^2/2 zeta`, central differences at `t0` and
/// `t0/2`, Richardson-combined.
pub fn inner_fd_oracle(
    ws: &Workspace,
    f: &Functional,
    u: &ScalarField,
    eta: &VectorField,
    zeta: &VectorField,
    t0: f64,
) -> Result<(f64, f64)> {
    check3(ws, u, eta, Some(zeta))?;
    if eta.max_norm() == 0.0 && zeta.max_norm() == 0.0 {
        return Ok((0.0, 0.0));
    }
    let d = ws.domain;
    let interp = StencilInterpolant::new(d, &u.values);
    let eval = |t: f64| -> Result<f64> {
        let pre = polynomial_preimages(d, eta, zeta, t)?;
        let vals: Vec<f64> = pre.par_iter().map(|&p| interp.eval(d, p)).collect();
        Ok(f.value(ws, &vals))
    };
    let a0 = f.value(ws, &u.values);
    let diffs = |t: f64| -> Result<(f64, f64)> {
        let (ap, am) = (eval(t)?, eval(-t)?);
        Ok(((ap - am) / (2.0 * t), (ap - 2.0 * a0 + am) / (t * t)))
    };
    // Central differences carry t^2 and, across interpolant cell faces,
    // |t|^3 error terms; two Richardson levels remove both.
    let (a1, a2) = diffs(t0)?;
    let (b1, b2) = diffs(0.5 * t0)?;
    let (c1, c2) = diffs(0.25 * t0)?;
    let r = |a: f64, b: f64, c: f64| {
        let (ab, bc) = ((4.0 * b - a) / 3.0, (4.0 * c - b) / 3.0);
        (8.0 * bc - ab) / 7.0
    };
    Ok((r(a1, b1, c1), r(a2, b2, c2)))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Residual {
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Residual {
    pub fn new(value: f64, tol: f64) -> Self {
        Residual { value, tol, pass: value.is_finite() && value <= tol }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct VariationReport {
    pub first_gateaux: f64,
    pub second_gateaux: f64,
    pub first_inner: f64,
    pub second_inner: f64,
    pub oracle_first: Option<f64>,
    pub oracle_second: Option<f64>,
    pub residuals: BTreeMap<String, Residual>,
}

impl VariationReport {
    pub fn pass(&self) -> bool {
        self.residuals.values().all(|r| r.pass)
    }
}

#[derive(Clone, Debug)]
pub struct AuditOptions {
    /// Relative tolerance for the algebraic identities.
    pub identity_tol: f64,
    /// Second acceleration field for the zeta-independence check, with its tolerance.
    pub zeta_alt: Option<(VectorField, f64)>,
    /// Oracle step; `None` skips the deformation oracle.
    pub oracle_t0: Option<f64>,
    pub oracle_rel: f64,
    pub oracle_abs: f64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions { identity_tol: 1e-10, zeta_alt: None, oracle_t0: None, oracle_rel: 1e-3, oracle_abs: 1e-8 }
    }
}

/// Residuals of `dA = dA(u, -grad u . eta)` and
/// `d2A = d^2A(u, -grad u . eta) + dA(u, X0)`, plus optional checks.
pub fn identity_audit(
    ws: &Workspace,
    f: &Functional,
    u: &ScalarField,
    eta: &VectorField,
    zeta: &VectorField,
    opts: &AuditOptions,
) -> Result<VariationReport> {
    check3(ws, u, eta, Some(zeta))?;
    let d = ws.domain;
    let psi: Vec<f64> = normal_derivative_field(ws, u, eta).iter().map(|v| -v).collect();
    let vf = variation_fields(d, eta, Some(zeta), u)?;
    let g1 = f.first(ws, &u.values, &psi);
    let g2 = f.second(ws, &u.values, &psi);
    let gx0 = f.first(ws, &u.values, &vf.x0.values);
    let (i1, i2) = inner_direct(ws, f, u, eta, zeta)?;
    let mut residuals = BTreeMap::new();
    let s1 = g1.abs().max(i1.abs()).max(f64::MIN_POSITIVE);
    let s2 = (g2.abs() + gx0.abs()).max(i2.abs()).max(f64::MIN_POSITIVE);
    residuals.insert("first_identity".to_string(), Residual::new((i1 - g1).abs() / s1, opts.identity_tol));
    residuals.insert("second_identity".to_string(), Residual::new((i2 - g2 - gx0).abs() / s2, opts.identity_tol));
    if let Some((z2, tol)) = &opts.zeta_alt {
        let (_, j2) = inner_direct(ws, f, u, eta, z2)?;
        residuals.insert("zeta_independence".to_string(), Residual::new((i2 - j2).abs(), *tol));
    }
    let (mut o1, mut o2) = (None, None);
    if let Some(t0) = opts.oracle_t0 {
        let (a, b) = inner_fd_oracle(ws, f, u, eta, zeta, t0)?;
        o1 = Some(a);
        o2 = Some(b);
        let gap = |x: f64, y: f64| {
            let tol = (opts.oracle_rel * y.abs()).max(opts.oracle_abs);
            Residual { value: (x - y).abs(), tol, pass: (x - y).abs() <= tol }
        };
        residuals.insert("oracle_first".to_string(), gap(a, i1));
        residuals.insert("oracle_second".to_string(), gap(b, i2));
    }
    Ok(VariationReport {
        first_gateaux: g1,
        second_gateaux: g2,
        first_inner: i1,
        second_inner: i2,
        oracle_first: o1,
        oracle_second: o2,
        residuals,
    })
}
