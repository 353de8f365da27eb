//! Neumann Green's functions and the interface double-layer form
//! `int_Gamma int_Gamma G(x, y) xi(x) psi(y)`.
//!
//! Rectangle: four images of the doubly periodic Green function on the
//! `2L1 x 2L2` torus, written with the Jacobi theta function. A cosine
//! eigen-series evaluator is kept as an independent realization.
//! Disk: closed-form Neumann function with the Kelvin image.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex;

use crate::domain::{Domain, InterfaceCurve, InterfaceKind, NormalSpeed, Shape};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub enum GreenKernel {
    Rectangle(RectGreen),
    Disk { radius: f64 },
}

#[derive(Clone, Debug)]
pub struct RectGreen {
    pub lx: f64,
    pub ly: f64,
    swap: bool,
    a: f64,
    b: f64,
    q: f64,
    log_prod: Vec<f64>,
    c0: f64,
}

const THETA_TERMS_TOL: f64 = 1e-18;

impl RectGreen {
    fn new(lx: f64, ly: f64) -> Self {
        let swap = ly < lx;
        let (a, b) = if swap { (2.0 * ly, 2.0 * lx) } else { (2.0 * lx, 2.0 * ly) };
        let q = (-PI * b / a).exp();
        let mut log_prod = Vec::new();
        let mut n = 1;
        loop {
            let q2n = q.powi(2 * n);
            if q2n * (PI * b / a).exp() < THETA_TERMS_TOL || n > 64 {
                break;
            }
            log_prod.push(q2n);
            n += 1;
        }
        let s: f64 = log_prod.iter().map(|&t| (1.0 - t).ln()).sum();
        let c0 = s / (2.0 * PI) - b / (24.0 * a);
        RectGreen { lx, ly, swap, a, b, q, log_prod, c0 }
    }

    /// Mean-zero Green function of the torus `[0,a) x [0,b)`.
    fn periodic(&self, dx: f64, dy: f64) -> f64 {
        let (a, b) = (self.a, self.b);
        let mut x = dx - a * (dx / a).round();
        let y = dy - b * (dy / b).round();
        if x == 0.0 && y == 0.0 {
            x = f64::MIN_POSITIVE;
        }
        let w = Complex::new(PI * x / a, PI * y / a);
        let (u, v) = (w.re, w.im);
        // |sin w|^2 = sin^2 u + sinh^2 v
        let ls = 0.5 * (u.sin().powi(2) + v.sinh().powi(2)).ln();
        let c2 = (w * 2.0).cos();
        let mut acc = 0.0;
        for &q2n in &self.log_prod {
            let t = Complex::new(1.0 + q2n * q2n, 0.0) - c2 * (2.0 * q2n);
            acc += t.norm().ln() + (1.0 - q2n).ln();
        }
        let log_theta = 2f64.ln() + 0.25 * self.q.ln() + ls + acc;
        -log_theta / (2.0 * PI) + y * y / (2.0 * a * b) + self.c0
    }

    fn eval(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        let (x, y) = if self.swap { ([x[1], x[0]], [y[1], y[0]]) } else { (x, y) };
        let mut g = 0.0;
        for sx in [1.0, -1.0] {
            for sy in [1.0, -1.0] {
                g += self.periodic(x[0] - sx * y[0], x[1] - sy * y[1]);
            }
        }
        g
    }

    /// Truncated cosine eigen-series. Each x-mode is summed in closed form
    /// over the y-modes, so convergence is geometric when `x2 != y2`.
    pub fn series(&self, x: [f64; 2], y: [f64; 2], tol: f64, max_modes: usize) -> f64 {
        let (l1, l2) = (self.lx, self.ly);
        let (lo, hi) = if x[1] < y[1] { (x[1], y[1]) } else { (y[1], x[1]) };
        let mut g = ((x[1] * x[1] + y[1] * y[1]) / (2.0 * l2) - hi + l2 / 3.0) / l1;
        let mut small = 0;
        for m in 1..=max_modes {
            let k = m as f64 * PI / l1;
            let (a, b, c) = (k * (l2 - hi), k * lo, k * l2);
            let gk = (a + b - c).exp() * (1.0 + (-2.0 * a).exp()) * (1.0 + (-2.0 * b).exp())
                / (2.0 * k * (1.0 - (-2.0 * c).exp()));
            let term = 2.0 / l1 * (k * x[0]).cos() * (k * y[0]).cos() * gk;
            g += term;
            if term.abs() < tol * g.abs().max(1e-3) {
                small += 1;
                if small > 4 {
                    break;
                }
            } else {
                small = 0;
            }
        }
        g
    }
}

impl GreenKernel {
    pub fn new(domain: &Domain) -> Self {
        match domain.shape {
            Shape::Rectangle { lx, ly } => GreenKernel::Rectangle(RectGreen::new(lx, ly)),
            Shape::Disk { radius } => GreenKernel::Disk { radius },
        }
    }

    pub fn eval(&self, x: [f64; 2], y: [f64; 2]) -> f64 {
        match self {
            GreenKernel::Rectangle(r) => r.eval(x, y),
            GreenKernel::Disk { radius } => {
                let r = *radius;
                let (x, y) = ([x[0] / r, x[1] / r], [y[0] / r, y[1] / r]);
                let d = (x[0] - y[0]).hypot(x[1] - y[1]);
                let ny = y[0].hypot(y[1]);
                let kelvin = if ny == 0.0 {
                    1.0
                } else {
                    (ny * x[0] - y[0] / ny).hypot(ny * x[1] - y[1] / ny)
                };
                let x2 = x[0] * x[0] + x[1] * x[1];
                let y2 = y[0] * y[0] + y[1] * y[1];
                -(d.ln() + kelvin.ln()) / (2.0 * PI) + (x2 + y2) / (4.0 * PI) - 3.0 / (8.0 * PI)
            }
        }
    }

    /// Singular images of `y` handled analytically by the surface form:
    /// `G(x, y) + (1/2pi) sum log|x - y'|` is smooth for `x, y` in the closure.
    fn images(&self, y: [f64; 2], kelvin: bool) -> Vec<[f64; 2]> {
        match self {
            GreenKernel::Rectangle(r) => {
                let xs = [y[0], -y[0], 2.0 * r.lx - y[0]];
                let ys = [y[1], -y[1], 2.0 * r.ly - y[1]];
                let mut out = Vec::with_capacity(9);
                for &a in &xs {
                    for &b in &ys {
                        out.push([a, b]);
                    }
                }
                out
            }
            GreenKernel::Disk { radius } => {
                let n2 = y[0] * y[0] + y[1] * y[1];
                if kelvin && n2 > 0.0 {
                    let s = radius * radius / n2;
                    vec![y, [s * y[0], s * y[1]]]
                } else {
                    vec![y]
                }
            }
        }
    }
}

/// `int log|x - y(tau)|` against the hat weights `(1 - tau/L, tau/L)` over
/// the chord `y(tau) = a + tau (b - a)/L`.
fn log_panel(x: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
    let r = [x[0] - a[0], x[1] - a[1]];
    let p = r[0] * t[0] + r[1] * t[1];
    let d = (r[0] * t[1] - r[1] * t[0]).abs();
    // primitives in sigma = tau - p
    let f0 = |s: f64| -> f64 {
        let q = s * s + d * d;
        let lg = if q > 0.0 { q.ln() } else { 0.0 };
        let at = if d > 0.0 { 2.0 * d * (s / d).atan() } else { 0.0 };
        0.5 * (s * lg - 2.0 * s + at)
    };
    let f1 = |s: f64| -> f64 {
        let q = s * s + d * d;
        let lg = if q > 0.0 { q.ln() } else { 0.0 };
        0.25 * (q * lg - s * s)
    };
    let (s0, s1) = (-p, len - p);
    let i0 = f0(s1) - f0(s0);
    // int tau log = int (sigma + p) log
    let i1 = f1(s1) - f1(s0) + p * i0;
    (i0 - i1 / len, i1 / len)
}

const GAUSS: [(f64, f64); 4] = [
    (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
    (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
    (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
];

/// Symmetric matrix `S` with `xi^T S psi ~ int int G xi psi` for nodal
/// values interpolated piecewise linearly along the curve.
pub fn green_surface_matrix(g: &GreenKernel, curve: &InterfaceCurve) -> DMatrix<f64> {
    let n = curve.len();
    let panels: Vec<(usize, usize)> = if curve.closed {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    } else {
        (0..n - 1).map(|i| (i, i + 1)).collect()
    };
    let kelvin_line = matches!(curve.kind, InterfaceKind::Diameter { .. });
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = curve.points[i];
            let mut row = vec![0.0; n];
            for &(ia, ib) in &panels {
                let (a, b) = (curve.points[ia], curve.points[ib]);
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                let kelvin = match g {
                    GreenKernel::Disk { radius } => kelvin_line || mid[0].hypot(mid[1]) > 0.5 * radius,
                    _ => false,
                };
                let ia_img = g.images(a, kelvin);
                let ib_img = g.images(b, kelvin);
                let (mut wa, mut wb) = (0.0, 0.0);
                for (pa, pb) in ia_img.iter().zip(&ib_img) {
                    let (ca, cb) = log_panel(x, *pa, *pb);
                    wa -= ca / (2.0 * PI);
                    wb -= cb / (2.0 * PI);
                }
                for &(gx, gw) in &GAUSS {
                    let s = 0.5 * (gx + 1.0);
                    let y = [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])];
                    let mut rem = g.eval(x, y);
                    for (pa, pb) in ia_img.iter().zip(&ib_img) {
                        let yi = [pa[0] + s * (pb[0] - pa[0]), pa[1] + s * (pb[1] - pa[1])];
                        rem += (x[0] - yi[0]).hypot(x[1] - yi[1]).ln() / (2.0 * PI);
                    }
                    let c = 0.5 * gw * len * rem;
                    wa += c * (1.0 - s);
                    wb += c * s;
                }
                row[ia] += wa;
                row[ib] += wb;
            }
            row.iter_mut().for_each(|v| *v *= curve.weights[i]);
            row
        })
        .collect();
    let s = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    (&s + s.transpose()) * 0.5
}

/// `int_Gamma int_Gamma G(x, y) xi(x) psi(y)`.
pub fn green_cross_form(g: &GreenKernel, curve: &InterfaceCurve, xi: &NormalSpeed, psi: &NormalSpeed) -> Result<f64> {
    if xi.values.len() != curve.len() || psi.values.len() != curve.len() {
        return Err(Error::Contract("normal speed does not match the curve".into()));
    }
    let s = green_surface_matrix(g, curve);
    let mut acc = 0.0;
    for i in 0..curve.len() {
        for j in 0..curve.len() {
            acc += xi.values[i] * s[(i, j)] * psi.values[j];
        }
    }
    Ok(acc)
}

pub fn green_surface_form(g: &GreenKernel, curve: &InterfaceCurve, xi: &NormalSpeed) -> Result<f64> {
    green_cross_form(g, curve, xi, xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, build_interface, DomainSpec, InterfaceSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn theta_matches_series() {
        for (lx, ly) in [(1.0, 1.0), (2.0, 1.0), (1.0, 1.5)] {
            let g = RectGreen::new(lx, ly);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..50 {
                let x = [rng.gen_range(0.0..lx), rng.gen_range(0.0..ly)];
                let y = [rng.gen_range(0.0..lx), rng.gen_range(0.0..ly)];
                if (x[1] - y[1]).abs() < 0.05 {
                    continue;
                }
                let a = g.eval(x, y);
                let b = g.series(x, y, 1e-14, 100_000);
                assert!((a - b).abs() < 1e-9, "{lx} {ly} {x:?} {y:?}: {a} {b}");
                assert!((a - g.eval(y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rect_green_is_mean_zero() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.5, 1.0], n: [301, 201] }).unwrap();
        let g = GreenKernel::new(&d);
        let y = [0.4123, 0.2711];
        let f: Vec<f64> = (0..d.len()).map(|k| g.eval(d.point(k), y)).collect();
        assert!(d.integrate(&f).abs() < 2e-4);
    }

    #[test]
    fn disk_green_is_harmonic_neumann_mean_zero() {
        let g = GreenKernel::Disk { radius: 2.0 };
        let y = [0.7, -0.4];
        let h = 1e-3;
        let x = [-0.5, 0.9];
        let lap = (g.eval([x[0] + h, x[1]], y) + g.eval([x[0] - h, x[1]], y) + g.eval([x[0], x[1] + h], y)
            + g.eval([x[0], x[1] - h], y)
            - 4.0 * g.eval(x, y))
            / (h * h);
        assert!((-lap - (-1.0 / (PI * 4.0))).abs() < 1e-5);
        for th in [0.3f64, 2.0, 4.5] {
            let nrm = [th.cos(), th.sin()];
            let p = |s: f64| [s * nrm[0], s * nrm[1]];
            let dn = (g.eval(p(2.0 + h), y) - g.eval(p(2.0 - h), y)) / (2.0 * h);
            assert!(dn.abs() < 1e-6);
        }
        assert!((g.eval(x, y) - g.eval(y, x)).abs() < 1e-12);
        let d = build_domain(&DomainSpec::Disk { radius: 2.0, n: [200, 256] }).unwrap();
        let f: Vec<f64> = (0..d.len()).map(|k| g.eval(d.point(k), y)).collect();
        assert!(d.integrate(&f).abs() < 1e-3);
    }

    #[test]
    fn lamella_form_matches_one_dimensional_green() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [64, 64] }).unwrap();
        let c = build_interface(&d, &InterfaceSpec::Segment { x: Some(0.5), from: None, to: None, ds: Some(1.0 / 100.0) })
            .unwrap();
        let g = GreenKernel::new(&d);
        let one = NormalSpeed::from_fn(&c, |_| 1.0);
        let v = green_surface_form(&g, &c, &one).unwrap();
        assert!((v - 1.0 / 12.0).abs() < 1e-4, "{v}");
    }

    #[test]
    fn log_panel_matches_quadrature() {
        let x = [0.3, 0.1];
        let (a, b) = ([0.0, 0.0], [1.0, 0.5]);
        let (ca, cb) = log_panel(x, a, b);
        let len = 1.25f64.sqrt();
        let m = 200_000;
        let (mut qa, mut qb) = (0.0, 0.0);
        for k in 0..m {
            let s = (k as f64 + 0.5) / m as f64;
            let y = [s, 0.5 * s];
            let l = (x[0] - y[0]).hypot(x[1] - y[1]).ln() * len / m as f64;
            qa += (1.0 - s) * l;
            qb += s * l;
        }
        assert!((ca - qa).abs() < 1e-7 && (cb - qb).abs() < 1e-7);
    }
}
