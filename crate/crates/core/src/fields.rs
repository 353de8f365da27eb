//! Grid fields, finite-difference calculus, interpolation and flow maps.

use std::f64::consts::PI;

use rayon::prelude::*;
use std::sync::OnceLock;

use crate::domain::{catmull_rom, Domain, GridId, GridKind};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: GridId,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(domain: &Domain, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), domain.len(), "field length does not match grid");
        ScalarField { grid: domain.id, values }
    }

    pub fn zeros(domain: &Domain) -> Self {
        Self::new(domain, vec![0.0; domain.len()])
    }

    pub fn constant(domain: &Domain, c: f64) -> Self {
        Self::new(domain, vec![c; domain.len()])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.grid, other.grid);
        ScalarField {
            grid: self.grid,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub grid: GridId,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Asserts `eta . nu = 0` at boundary nodes.
    pub tangent: bool,
}

impl VectorField {
    pub fn new(domain: &Domain, x: Vec<f64>, y: Vec<f64>) -> Self {
        assert_eq!(x.len(), domain.len());
        assert_eq!(y.len(), domain.len());
        VectorField { grid: domain.id, x, y, tangent: false }
    }

    pub fn zeros(domain: &Domain) -> Self {
        Self::new(domain, vec![0.0; domain.len()], vec![0.0; domain.len()])
    }

    pub fn at(&self, k: usize) -> [f64; 2] {
        [self.x[k], self.y[k]]
    }

    pub fn max_norm(&self) -> f64 {
        self.x.iter().zip(&self.y).fold(0.0, |m, (a, b)| m.max(a.hypot(*b)))
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        VectorField {
            grid: self.grid,
            x: self.x.iter().map(|v| c * v).collect(),
            y: self.y.iter().map(|v| c * v).collect(),
            tangent: self.tangent,
        }
    }

    /// `self + c * other`; tangency holds if both inputs are tangent.
    pub fn axpy(&self, c: f64, other: &VectorField) -> Self {
        assert_eq!(self.grid, other.grid);
        VectorField {
            grid: self.grid,
            x: self.x.iter().zip(&other.x).map(|(a, b)| a + c * b).collect(),
            y: self.y.iter().zip(&other.y).map(|(a, b)| a + c * b).collect(),
            tangent: self.tangent && other.tangent,
        }
    }

    /// Checks the tangency flag against the boundary data.
    pub fn verify_tangent(&self, domain: &Domain) -> bool {
        domain.tangency_defect(self) <= 1e-10 * (1.0 + self.max_norm())
    }

    pub fn dot(&self, g: &VectorField) -> Vec<f64> {
        (0..self.x.len()).map(|k| self.x[k] * g.x[k] + self.y[k] * g.y[k]).collect()
    }
}

/// Symmetric 2x2 matrix field.
#[derive(Clone, Debug)]
pub struct SymField {
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yy: Vec<f64>,
}

/// Full Jacobian `J[i][j] = d eta^i / d x_j` per node.
#[derive(Clone, Debug)]
pub struct JacobianField {
    pub xx: Vec<f64>,
    pub xy: Vec<f64>,
    pub yx: Vec<f64>,
    pub yy: Vec<f64>,
}

impl JacobianField {
    pub fn div(&self) -> Vec<f64> {
        self.xx.iter().zip(&self.yy).map(|(a, b)| a + b).collect()
    }
}

pub fn check_grid(a: GridId, b: GridId) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::GridMismatch)
    }
}

// ---------------------------------------------------------------------------
// Differentiation

/// First derivative along one axis of a line of `n` samples with spacing `h`.
fn d1_line(v: &[f64], h: f64, out: &mut [f64]) {
    let n = v.len();
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
    }
    out[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
    out[n - 1] = (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * h);
}

fn d2_line(v: &[f64], h: f64, out: &mut [f64]) {
    let n = v.len();
    let h2 = h * h;
    for i in 1..n - 1 {
        out[i] = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / h2;
    }
    if n >= 4 {
        out[0] = (2.0 * v[0] - 5.0 * v[1] + 4.0 * v[2] - v[3]) / h2;
        out[n - 1] = (2.0 * v[n - 1] - 5.0 * v[n - 2] + 4.0 * v[n - 3] - v[n - 4]) / h2;
    } else {
        out[0] = out[1];
        out[n - 1] = out[n - 2];
    }
}

fn rect_axis(values: &[f64], nx: usize, ny: usize, h: f64, axis: usize, second: bool) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    let op = if second { d2_line } else { d1_line };
    if axis == 0 {
        out.par_chunks_mut(nx).zip(values.par_chunks(nx)).for_each(|(o, v)| op(v, h, o));
    } else {
        let mut line = vec![0.0; ny];
        let mut res = vec![0.0; ny];
        for i in 0..nx {
            for j in 0..ny {
                line[j] = values[i + nx * j];
            }
            op(&line, h, &mut res);
            for j in 0..ny {
                out[i + nx * j] = res[j];
            }
        }
    }
    out
}

struct Polar<'a> {
    v: &'a [f64],
    nr: usize,
    nt: usize,
}

impl Polar<'_> {
    fn get(&self, i: usize, j: usize) -> f64 {
        if i == 0 {
            self.v[0]
        } else {
            self.v[1 + (i - 1) * self.nt + j % self.nt]
        }
    }
}

/// Radial and angular derivatives on the polar grid: `(u_r, u_t, u_rr, u_tt)`.
fn polar_parts(v: &[f64], nr: usize, nt: usize, hr: f64, dt: f64) -> [Vec<f64>; 4] {
    let p = Polar { v, nr, nt };
    let n = v.len();
    let mut ur = vec![0.0; n];
    let mut ut = vec![0.0; n];
    let mut urr = vec![0.0; n];
    let mut utt = vec![0.0; n];
    for i in 1..p.nr {
        for j in 0..nt {
            let k = 1 + (i - 1) * nt + j;
            let c = p.get(i, j);
            if i < nr - 1 {
                ur[k] = (p.get(i + 1, j) - p.get(i - 1, j)) / (2.0 * hr);
                urr[k] = (p.get(i + 1, j) - 2.0 * c + p.get(i - 1, j)) / (hr * hr);
            } else {
                ur[k] = (3.0 * c - 4.0 * p.get(i - 1, j) + p.get(i - 2, j)) / (2.0 * hr);
                urr[k] = (2.0 * c - 5.0 * p.get(i - 1, j) + 4.0 * p.get(i - 2, j) - p.get(i - 3, j)) / (hr * hr);
            }
            let jp = (j + 1) % nt;
            let jm = (j + nt - 1) % nt;
            ut[k] = (p.get(i, jp) - p.get(i, jm)) / (2.0 * dt);
            utt[k] = (p.get(i, jp) - 2.0 * c + p.get(i, jm)) / (dt * dt);
        }
    }
    [ur, ut, urr, utt]
}

/// Fourier coefficients `(c0, a1, b1, a2, b2)` of ring `i`.
fn ring_modes(v: &[f64], i: usize, nt: usize, dt: f64) -> [f64; 5] {
    let mut m = [0.0; 5];
    for j in 0..nt {
        let u = v[1 + (i - 1) * nt + j];
        let th = j as f64 * dt;
        m[0] += u;
        m[1] += u * th.cos();
        m[2] += u * th.sin();
        m[3] += u * (2.0 * th).cos();
        m[4] += u * (2.0 * th).sin();
    }
    m[0] /= nt as f64;
    for c in &mut m[1..] {
        *c *= 2.0 / nt as f64;
    }
    m
}

/// Pole gradient and Hessian from the first two rings by Richardson on the
/// Fourier modes: `c1(r) = r g + O(r^3)`, `c0(r) - u0, c2(r) = O(r^2) + O(r^4)`.
fn pole_derivatives(v: &[f64], nt: usize, hr: f64, dt: f64) -> ([f64; 2], [f64; 3]) {
    let m1 = ring_modes(v, 1, nt, dt);
    let m2 = ring_modes(v, 2, nt, dt);
    let lin = |a: f64, b: f64| (8.0 * a - b) / (6.0 * hr);
    let quad = |a: f64, b: f64| (16.0 * a - b) / (12.0 * hr * hr);
    let g = [lin(m1[1], m2[1]), lin(m1[2], m2[2])];
    let lap = 4.0 * quad(m1[0] - v[0], m2[0] - v[0]);
    let diff = 4.0 * quad(m1[3], m2[3]);
    let hxy = 2.0 * quad(m1[4], m2[4]);
    (g, [(lap + diff) / 2.0, hxy, (lap - diff) / 2.0])
}

/// Gradient by second-order stencils (one-sided at the boundary).
pub fn gradient(domain: &Domain, u: &[f64]) -> VectorField {
    match domain.kind {
        GridKind::Rect { nx, ny, hx, hy } => {
            VectorField::new(domain, rect_axis(u, nx, ny, hx, 0, false), rect_axis(u, nx, ny, hy, 1, false))
        }
        GridKind::Polar { nr, nt, hr, dt } => {
            let [ur, ut, _, _] = polar_parts(u, nr, nt, hr, dt);
            let n = u.len();
            let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
            for k in 1..n {
                let r = domain.x[k].hypot(domain.y[k]);
                let (s, c) = (domain.y[k] / r, domain.x[k] / r);
                gx[k] = c * ur[k] - s * ut[k] / r;
                gy[k] = s * ur[k] + c * ut[k] / r;
            }
            let (g, _) = pole_derivatives(u, nt, hr, dt);
            gx[0] = g[0];
            gy[0] = g[1];
            VectorField::new(domain, gx, gy)
        }
    }
}

/// Gradient and symmetric Hessian of `u`.
pub fn differentiate(domain: &Domain, u: &ScalarField) -> (VectorField, SymField) {
    assert_eq!(u.grid, domain.id, "field does not live on this grid");
    let v = &u.values;
    match domain.kind {
        GridKind::Rect { nx, ny, hx, hy } => {
            let gx = rect_axis(v, nx, ny, hx, 0, false);
            let gy = rect_axis(v, nx, ny, hy, 1, false);
            let xx = rect_axis(v, nx, ny, hx, 0, true);
            let yy = rect_axis(v, nx, ny, hy, 1, true);
            let xy = rect_axis(&gy, nx, ny, hx, 0, false);
            (VectorField::new(domain, gx, gy), SymField { xx, xy, yy })
        }
        GridKind::Polar { nr, nt, hr, dt } => {
            let [ur, ut, urr, utt] = polar_parts(v, nr, nt, hr, dt);
            // Mixed derivative: radial stencil applied to u_theta (zero at the pole).
            let mut ut_pole = ut.clone();
            ut_pole[0] = 0.0;
            let [urt, _, _, _] = polar_parts(&ut_pole, nr, nt, hr, dt);
            let n = v.len();
            let mut gx = vec![0.0; n];
            let mut gy = vec![0.0; n];
            let mut xx = vec![0.0; n];
            let mut xy = vec![0.0; n];
            let mut yy = vec![0.0; n];
            for k in 1..n {
                let r = domain.x[k].hypot(domain.y[k]);
                let (s, c) = (domain.y[k] / r, domain.x[k] / r);
                gx[k] = c * ur[k] - s * ut[k] / r;
                gy[k] = s * ur[k] + c * ut[k] / r;
                let (r1, r2) = (1.0 / r, 1.0 / (r * r));
                xx[k] = c * c * urr[k] - 2.0 * s * c * r1 * urt[k] + s * s * r1 * ur[k] + 2.0 * s * c * r2 * ut[k]
                    + s * s * r2 * utt[k];
                yy[k] = s * s * urr[k] + 2.0 * s * c * r1 * urt[k] + c * c * r1 * ur[k] - 2.0 * s * c * r2 * ut[k]
                    + c * c * r2 * utt[k];
                xy[k] = s * c * urr[k] + (c * c - s * s) * r1 * urt[k] - s * c * r1 * ur[k]
                    - (c * c - s * s) * r2 * ut[k]
                    - s * c * r2 * utt[k];
            }
            let (g, h) = pole_derivatives(v, nt, hr, dt);
            gx[0] = g[0];
            gy[0] = g[1];
            xx[0] = h[0];
            xy[0] = h[1];
            yy[0] = h[2];
            (VectorField::new(domain, gx, gy), SymField { xx, xy, yy })
        }
    }
}

pub fn jacobian(domain: &Domain, eta: &VectorField) -> JacobianField {
    let a = gradient(domain, &eta.x);
    let b = gradient(domain, &eta.y);
    JacobianField { xx: a.x, xy: a.y, yx: b.x, yy: b.y }
}

pub fn divergence(domain: &Domain, eta: &VectorField) -> Vec<f64> {
    jacobian(domain, eta).div()
}

// ---------------------------------------------------------------------------
// Interpolation

/// Extension parity per axis for rectangle sampling: `+1` even, `-1` odd.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Parity(pub f64, pub f64);

fn fold_index(i: isize, n: usize) -> (usize, f64) {
    // Even reflection about 0 and n-1, periodic with period 2(n-1).
    let p = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(p);
    let mut flips = (i.div_euclid(p)) * 2;
    if m > n as isize - 1 {
        m = p - m;
        flips += 1;
    }
    (m as usize, if flips.rem_euclid(2) == 0 { 1.0 } else { -1.0 })
}

fn rect_sample(values: &[f64], nx: usize, ny: usize, hx: f64, hy: f64, p: [f64; 2], par: Parity) -> f64 {
    let tx = p[0] / hx;
    let ty = p[1] / hy;
    let ix = tx.floor();
    let iy = ty.floor();
    let (wx, _) = catmull_rom(tx - ix);
    let (wy, _) = catmull_rom(ty - iy);
    let (ix, iy) = (ix as isize, iy as isize);
    let mut acc = 0.0;
    for b in 0..4 {
        let (j, sy) = fold_index(iy - 1 + b as isize, ny);
        let sy = if par.1 < 0.0 { sy } else { 1.0 };
        let mut row = 0.0;
        for a in 0..4 {
            let (i, sx) = fold_index(ix - 1 + a as isize, nx);
            let sx = if par.0 < 0.0 { sx } else { 1.0 };
            row += wx[a] * sx * values[i + nx * j];
        }
        acc += wy[b] * sy * row;
    }
    acc
}

/// Polar CR sampling; `get(row, j)` handles pole and reflected rows.
fn polar_sample<T, F>(nr: usize, nt: usize, hr: f64, dt: f64, p: [f64; 2], get: F) -> T
where
    T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    F: Fn(isize, usize) -> T,
{
    let _ = nr;
    let r = p[0].hypot(p[1]);
    let th = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
    let tr = r / hr;
    let ir = tr.floor();
    let (wr, _) = catmull_rom(tr - ir);
    let tt = th / dt;
    let it = tt.floor();
    let (wt, _) = catmull_rom(tt - it);
    let (ir, it) = (ir as isize, it as isize);
    let mut acc = T::default();
    for a in 0..4 {
        let row = ir - 1 + a as isize;
        let mut line = T::default();
        for b in 0..4 {
            let j = (it - 1 + b as isize).rem_euclid(nt as isize) as usize;
            line = line + get(row, j) * wt[b];
        }
        acc = acc + line * wr[a];
    }
    acc
}

#[derive(Clone, Copy, Default)]
struct V2(f64, f64);

impl std::ops::Add for V2 {
    type Output = V2;
    fn add(self, o: V2) -> V2 {
        V2(self.0 + o.0, self.1 + o.1)
    }
}

impl std::ops::Mul<f64> for V2 {
    type Output = V2;
    fn mul(self, c: f64) -> V2 {
        V2(self.0 * c, self.1 * c)
    }
}

/// Bicubic sample of a scalar with even extension beyond the boundary.
pub fn sample_scalar(domain: &Domain, values: &[f64], p: [f64; 2]) -> f64 {
    match domain.kind {
        GridKind::Rect { nx, ny, hx, hy } => rect_sample(values, nx, ny, hx, hy, p, Parity(1.0, 1.0)),
        GridKind::Polar { nr, nt, hr, dt } => {
            let pol = Polar { v: values, nr, nt };
            polar_sample(nr, nt, hr, dt, p, |row, j| {
                if row < 0 {
                    pol.get((-row) as usize, j + nt / 2)
                } else if row as usize > nr - 1 {
                    let m = 2 * (nr - 1) - row as usize;
                    pol.get(m, j)
                } else {
                    pol.get(row as usize, j)
                }
            })
        }
    }
}

/// Bicubic sample of a vector field. Tangent fields use the mirror
/// extension (normal component odd, tangential even); others extend each
/// Cartesian component evenly.
pub fn sample_vector(domain: &Domain, f: &VectorField, p: [f64; 2]) -> [f64; 2] {
    match domain.kind {
        GridKind::Rect { nx, ny, hx, hy } => {
            let (px, py) = if f.tangent { (Parity(-1.0, 1.0), Parity(1.0, -1.0)) } else { (Parity(1.0, 1.0), Parity(1.0, 1.0)) };
            [rect_sample(&f.x, nx, ny, hx, hy, p, px), rect_sample(&f.y, nx, ny, hx, hy, p, py)]
        }
        GridKind::Polar { nr, nt, hr, dt } => {
            let ax = Polar { v: &f.x, nr, nt };
            let ay = Polar { v: &f.y, nr, nt };
            let v = polar_sample(nr, nt, hr, dt, p, |row, j| {
                if row < 0 {
                    let m = (-row) as usize;
                    V2(ax.get(m, j + nt / 2), ay.get(m, j + nt / 2))
                } else if row as usize > nr - 1 {
                    let m = 2 * (nr - 1) - row as usize;
                    let (vx, vy) = (ax.get(m, j), ay.get(m, j));
                    if f.tangent {
                        let th = j as f64 * dt;
                        let (s, c) = th.sin_cos();
                        let d = vx * c + vy * s;
                        V2(vx - 2.0 * d * c, vy - 2.0 * d * s)
                    } else {
                        V2(vx, vy)
                    }
                } else {
                    V2(ax.get(row as usize, j), ay.get(row as usize, j))
                }
            });
            [v.0, v.1]
        }
    }
}

/// Monomial coefficients of the septic Hermite basis on `[0, 1]`: entry
/// `4 e + a` interpolates the `a`-th derivative at end `e`.
fn septic_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        // Row 4 e + a: a-th derivative of s^i at s = e.
        let m = nalgebra::SMatrix::<f64, 8, 8>::from_fn(|r, i| {
            let (e, a) = (r / 4, r % 4);
            if i < a {
                return 0.0;
            }
            let fall: f64 = (0..a).map(|q| (i - q) as f64).product();
            if e == 0 {
                if i == a {
                    fall
                } else {
                    0.0
                }
            } else {
                fall
            }
        });
        let inv = m.try_inverse().expect("Hermite system is invertible");
        std::array::from_fn(|c| std::array::from_fn(|i| inv[(i, c)]))
    })
}

/// Septic Hermite weights per end and derivative order, scaled by `h^a`.
fn septic_weights(s: f64, h: f64) -> [[f64; 4]; 2] {
    let basis = septic_basis();
    let mut pw = [1.0; 8];
    for i in 1..8 {
        pw[i] = pw[i - 1] * s;
    }
    std::array::from_fn(|e| {
        std::array::from_fn(|a| {
            let c = &basis[4 * e + a];
            h.powi(a as i32) * (0..8).map(|i| c[i] * pw[i]).sum::<f64>()
        })
    })
}

/// Stencil derivative of order `a` (0..=3) along one axis.
fn stencil_axis(v: &[f64], nx: usize, ny: usize, h: f64, axis: usize, a: usize) -> Vec<f64> {
    match a {
        0 => v.to_vec(),
        1 => rect_axis(v, nx, ny, h, axis, false),
        2 => rect_axis(v, nx, ny, h, axis, true),
        _ => rect_axis(&rect_axis(v, nx, ny, h, axis, true), nx, ny, h, axis, false),
    }
}

/// C3 interpolant whose value and axis derivatives up to third order at
/// the nodes are the grid stencils (so gradient, Hessian and mixed
/// derivative agree with [`differentiate`]). On a rectangle it is a tensor
/// septic Hermite, extrapolated polynomially outside; on a polar grid it
/// falls back to [`sample_scalar`].
#[derive(Clone, Debug)]
pub struct StencilInterpolant {
    kind: GridKind,
    data: Vec<[f64; 16]>,
    raw: Vec<f64>,
}

impl StencilInterpolant {
    pub fn new(domain: &Domain, values: &[f64]) -> Self {
        let mut data = Vec::new();
        if let GridKind::Rect { nx, ny, hx, hy } = domain.kind {
            let mut cols: Vec<Vec<f64>> = Vec::with_capacity(16);
            for b in 0..4 {
                let vy = stencil_axis(values, nx, ny, hy, 1, b);
                for a in 0..4 {
                    cols.push(stencil_axis(&vy, nx, ny, hx, 0, a));
                }
            }
            data = (0..values.len()).map(|k| std::array::from_fn(|c| cols[c][k])).collect();
        }
        StencilInterpolant { kind: domain.kind, data, raw: values.to_vec() }
    }

    pub fn eval(&self, domain: &Domain, p: [f64; 2]) -> f64 {
        match self.kind {
            GridKind::Rect { nx, ny, hx, hy } => {
                let ix = ((p[0] / hx).floor() as isize).clamp(0, nx as isize - 2) as usize;
                let iy = ((p[1] / hy).floor() as isize).clamp(0, ny as isize - 2) as usize;
                let wx = septic_weights(p[0] / hx - ix as f64, hx);
                let wy = septic_weights(p[1] / hy - iy as f64, hy);
                let mut acc = 0.0;
                for (ey, wy) in wy.iter().enumerate() {
                    for (ex, wx) in wx.iter().enumerate() {
                        let d = &self.data[ix + ex + nx * (iy + ey)];
                        for b in 0..4 {
                            let row: f64 = (0..4).map(|a| wx[a] * d[4 * b + a]).sum();
                            acc += wy[b] * row;
                        }
                    }
                }
                acc
            }
            GridKind::Polar { .. } => sample_scalar(domain, &self.raw, p),
        }
    }
}

// ---------------------------------------------------------------------------
// Flow maps

#[derive(Clone, Debug)]
pub struct FlowMap {
    pub t: f64,
    pub steps: usize,
    /// `Psi(x_k, t)` for every node.
    pub forward: Vec<[f64; 2]>,
    /// `Phi_t^{-1}(x_k)` for every node.
    pub inverse: Vec<[f64; 2]>,
}

pub const DEFAULT_FLOW_STEPS: usize = 32;

fn rk4(domain: &Domain, eta: &VectorField, p: [f64; 2], t: f64, steps: usize, limit: f64) -> Option<[f64; 2]> {
    let h = t / steps as f64;
    let f = |q: [f64; 2]| sample_vector(domain, eta, q);
    let mut x = p;
    for _ in 0..steps {
        let k1 = f(x);
        let k2 = f([x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1]]);
        let k3 = f([x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1]]);
        let k4 = f([x[0] + h * k3[0], x[1] + h * k3[1]]);
        x = [
            x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        if domain.boundary_distance(x) < -limit {
            return None;
        }
    }
    Some(x)
}

/// Integrates `dPsi/dt = eta(Psi)` from every node with classical RK4,
/// and `-eta` for the inverse images.
pub fn flow_map(domain: &Domain, eta: &VectorField, t: f64, steps: usize) -> Result<FlowMap> {
    check_grid(domain.id, eta.grid)?;
    let steps = steps.max(1);
    let limit = 0.25 * domain.diameter();
    let run = |sign: f64| -> Result<Vec<[f64; 2]>> {
        (0..domain.len())
            .into_par_iter()
            .map(|k| rk4(domain, eta, domain.point(k), sign * t, steps, limit).ok_or(Error::FlowEscape { node: k }))
            .collect()
    };
    Ok(FlowMap { t, steps, forward: run(1.0)?, inverse: run(-1.0)? })
}

/// `u o Phi_t^{-1}` sampled at the nodes.
pub fn deform(domain: &Domain, u: &ScalarField, f: &FlowMap) -> Result<ScalarField> {
    check_grid(domain.id, u.grid)?;
    let values = f.inverse.par_iter().map(|&p| sample_scalar(domain, &u.values, p)).collect();
    Ok(ScalarField::new(domain, values))
}

/// Preimages under the polynomial map `x + t eta + t^2/2 zeta` by fixed-point
/// iteration, sampling the fields with [`StencilInterpolant`].
pub fn polynomial_preimages(domain: &Domain, eta: &VectorField, zeta: &VectorField, t: f64) -> Result<Vec<[f64; 2]>> {
    check_grid(domain.id, eta.grid)?;
    check_grid(domain.id, zeta.grid)?;
    let limit = 0.25 * domain.diameter();
    let tol = 1e-15 * domain.diameter();
    let rect = matches!(domain.kind, GridKind::Rect { .. });
    let interp = |f: &VectorField| (StencilInterpolant::new(domain, &f.x), StencilInterpolant::new(domain, &f.y));
    let (ex, ey) = interp(eta);
    let (zx, zy) = interp(zeta);
    let field = |f: &VectorField, ix: &StencilInterpolant, iy: &StencilInterpolant, q: [f64; 2]| {
        if rect {
            [ix.eval(domain, q), iy.eval(domain, q)]
        } else {
            sample_vector(domain, f, q)
        }
    };
    (0..domain.len())
        .into_par_iter()
        .map(|k| {
            let y = domain.point(k);
            let mut x = y;
            for _ in 0..200 {
                let e = field(eta, &ex, &ey, x);
                let z = field(zeta, &zx, &zy, x);
                let nx = [y[0] - t * e[0] - 0.5 * t * t * z[0], y[1] - t * e[1] - 0.5 * t * t * z[1]];
                let d = (nx[0] - x[0]).hypot(nx[1] - x[1]);
                x = nx;
                if domain.boundary_distance(x) < -limit {
                    return Err(Error::FlowEscape { node: k });
                }
                if d <= tol {
                    break;
                }
            }
            Ok(x)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Derived variation fields

#[derive(Clone, Debug)]
pub struct VariationFields {
    pub z: VectorField,
    pub w: VectorField,
    pub x0: ScalarField,
    pub x: ScalarField,
    pub y: VectorField,
    pub div_eta: Vec<f64>,
}

/// `Z = (eta . grad) eta`, i.e. `Z^i = eta^j d_j eta^i`.
pub fn convective(domain: &Domain, eta: &VectorField) -> VectorField {
    let j = jacobian(domain, eta);
    let n = domain.len();
    let mut z = VectorField::new(
        domain,
        (0..n).map(|k| eta.x[k] * j.xx[k] + eta.y[k] * j.xy[k]).collect(),
        (0..n).map(|k| eta.x[k] * j.yx[k] + eta.y[k] * j.yy[k]).collect(),
    );
    z.tangent = false;
    z
}

/// Builds `Z`, `W`, `X0`, `X`, `Y` from `eta`, `zeta` (default `Z`) and `u`.
pub fn variation_fields(
    domain: &Domain,
    eta: &VectorField,
    zeta: Option<&VectorField>,
    u: &ScalarField,
) -> Result<VariationFields> {
    check_grid(domain.id, eta.grid)?;
    check_grid(domain.id, u.grid)?;
    if let Some(z) = zeta {
        check_grid(domain.id, z.grid)?;
    }
    let n = domain.len();
    let je = jacobian(domain, eta);
    let div = je.div();
    let z = convective(domain, eta);
    let zeta = zeta.unwrap_or(&z);
    let w = VectorField::new(
        domain,
        (0..n).map(|k| z.x[k] - div[k] * eta.x[k]).collect(),
        (0..n).map(|k| z.y[k] - div[k] * eta.y[k]).collect(),
    );
    let (g, h) = differentiate(domain, u);
    let x0 = (0..n)
        .map(|k| {
            let (ex, ey) = (eta.x[k], eta.y[k]);
            let quad = h.xx[k] * ex * ex + 2.0 * h.xy[k] * ex * ey + h.yy[k] * ey * ey;
            quad + g.x[k] * (2.0 * z.x[k] - zeta.x[k]) + g.y[k] * (2.0 * z.y[k] - zeta.y[k])
        })
        .collect();
    let jz = jacobian(domain, &z);
    let divz = jz.div();
    let x = (0..n)
        .map(|k| {
            // trace((grad eta)^2) = d_j eta^i d_i eta^j
            let tr = je.xx[k] * je.xx[k] + 2.0 * je.xy[k] * je.yx[k] + je.yy[k] * je.yy[k];
            divz[k] + div[k] * div[k] - tr
        })
        .collect();
    // Y^i = 1/2 u_j d_i Z^j - u_j d_k eta^j d_i eta^k
    let (mut yx, mut yy) = (vec![0.0; n], vec![0.0; n]);
    for k in 0..n {
        let (ux, uy) = (g.x[k], g.y[k]);
        // d_i Z^j with J[j][i]: jz.{j}{i}
        let half_x = 0.5 * (ux * jz.xx[k] + uy * jz.yx[k]);
        let half_y = 0.5 * (ux * jz.xy[k] + uy * jz.yy[k]);
        // m_i = u_j d_k eta^j d_i eta^k = (u . J)_k J[k][i]
        let a = ux * je.xx[k] + uy * je.yx[k];
        let b = ux * je.xy[k] + uy * je.yy[k];
        let mx = a * je.xx[k] + b * je.yx[k];
        let my = a * je.xy[k] + b * je.yy[k];
        yx[k] = half_x - mx;
        yy[k] = half_y - my;
    }
    Ok(VariationFields {
        z,
        w,
        x0: ScalarField::new(domain, x0),
        x: ScalarField::new(domain, x),
        y: VectorField::new(domain, yx, yy),
        div_eta: div,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{build_domain, DomainSpec};

    fn square(n: usize) -> Domain {
        build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [n, n] }).unwrap()
    }

    #[test]
    fn linear_and_quadratic_exactness() {
        let d = square(33);
        let u = d.scalar_fn(|x, _| x);
        let (g, h) = differentiate(&d, &u);
        for k in 0..d.len() {
            assert!((g.x[k] - 1.0).abs() < 1e-12 && g.y[k].abs() < 1e-12);
            assert!(h.xx[k].abs() < 1e-9 && h.xy[k].abs() < 1e-9 && h.yy[k].abs() < 1e-9);
        }
        let u = d.scalar_fn(|x, _| x * x);
        let (_, h) = differentiate(&d, &u);
        for k in 0..d.len() {
            assert!((h.xx[k] - 2.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gradient_second_order() {
        let err = |n: usize| {
            let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [n, 16] }).unwrap();
            let u = d.scalar_fn(|x, _| (2.0 * PI * x).sin());
            let g = gradient(&d, &u.values);
            (0..d.len()).map(|k| (g.x[k] - 2.0 * PI * (2.0 * PI * d.x[k]).cos()).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(64), err(128));
        assert!(e1 < 0.05, "{e1}");
        assert!((e1 / e2).log2() > 1.8);
    }

    #[test]
    fn polar_derivatives_of_smooth_field() {
        let d = build_domain(&DomainSpec::Disk { radius: 1.0, n: [64, 128] }).unwrap();
        let f = |x: f64, y: f64| (x + 0.3).sin() * (0.7 * y).cos() + x * y;
        let u = d.scalar_fn(f);
        let (g, h) = differentiate(&d, &u);
        for k in 0..d.len() {
            let (x, y) = (d.x[k], d.y[k]);
            let gx = (x + 0.3).cos() * (0.7 * y).cos() + y;
            let gy = -0.7 * (x + 0.3).sin() * (0.7 * y).sin() + x;
            let hxx = -(x + 0.3).sin() * (0.7 * y).cos();
            let hxy = -0.7 * (x + 0.3).cos() * (0.7 * y).sin() + 1.0;
            let hyy = -0.49 * (x + 0.3).sin() * (0.7 * y).cos();
            assert!((g.x[k] - gx).abs() < 2e-3 && (g.y[k] - gy).abs() < 2e-3, "grad at {k}");
            assert!((h.xx[k] - hxx).abs() < 2e-2 && (h.xy[k] - hxy).abs() < 2e-2 && (h.yy[k] - hyy).abs() < 2e-2, "hess at {k}");
        }
    }

    #[test]
    fn interpolation_reproduces_quadratics_inside() {
        let d = square(21);
        let u = d.scalar_fn(|x, y| 1.0 + x - 2.0 * y + x * y + 0.5 * x * x);
        for &p in &[[0.31, 0.47], [0.5, 0.5], [0.77, 0.23]] {
            let v = sample_scalar(&d, &u.values, p);
            let e = 1.0 + p[0] - 2.0 * p[1] + p[0] * p[1] + 0.5 * p[0] * p[0];
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn stencil_interpolant_is_exact_at_nodes_and_second_order() {
        let f = |x: f64, y: f64| (2.0 * x).sin() * (3.0 * y).cos();
        let err = |n: usize| {
            let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [n, n] }).unwrap();
            let u = d.scalar_fn(f);
            let s = StencilInterpolant::new(&d, &u.values);
            for k in [0, 17, 500, d.len() - 1] {
                assert!((s.eval(&d, d.point(k)) - u.values[k]).abs() < 1e-13);
            }
            let (a, b) = (s.eval(&d, [0.25 - 1e-9, 0.4]), s.eval(&d, [0.25 + 1e-9, 0.4]));
            assert!((a - b).abs() < 1e-8);
            [(0.31, 0.47), (0.5123, 0.0917), (0.9, 0.77)].iter().map(|&(x, y)| (s.eval(&d, [x, y]) - f(x, y)).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(33), err(65));
        assert!(e1 < 1e-4 && (e1 / e2).log2() > 1.8, "{e1} {e2}");
    }

    #[test]
    fn even_extension_outside() {
        let d = square(21);
        let u = d.scalar_fn(|x, y| (PI * x).cos() * (PI * y).cos());
        let a = sample_scalar(&d, &u.values, [-0.07, 0.3]);
        let b = sample_scalar(&d, &u.values, [0.07, 0.3]);
        assert!((a - b).abs() < 1e-12);
        let a = sample_scalar(&d, &u.values, [0.4, 1.05]);
        let b = sample_scalar(&d, &u.values, [0.4, 0.95]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn constant_flow_translates() {
        let d = square(33);
        let mut eta = d.vector_fn(|_, _| [1.0, 0.0]);
        eta.tangent = false;
        let f = flow_map(&d, &eta, 0.1, 8).unwrap();
        for k in 0..d.len() {
            assert!((f.forward[k][0] - d.x[k] - 0.1).abs() < 1e-12);
            assert!((f.forward[k][1] - d.y[k]).abs() < 1e-12);
        }
        let u = d.scalar_fn(|x, _| x);
        let v = deform(&d, &u, &f).unwrap();
        for k in 0..d.len() {
            if d.x[k] > 0.2 {
                assert!((v.values[k] - (d.x[k] - 0.1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_flow_matches_exponential() {
        let d = square(41);
        // eta = A (x - c) with A = [[0, -1], [1, 0]] * 0.5 + diag(0.2, -0.2)
        let c = [0.5, 0.5];
        let a = [[0.2, -0.5], [0.5, -0.2]];
        let eta = d.vector_fn(|x, y| {
            let (p, q) = (x - c[0], y - c[1]);
            [a[0][0] * p + a[0][1] * q, a[1][0] * p + a[1][1] * q]
        });
        let t = 0.1;
        let f = flow_map(&d, &eta, t, DEFAULT_FLOW_STEPS).unwrap();
        // exp(tA) by Taylor series
        let mut e = [[1.0, 0.0], [0.0, 1.0]];
        let mut term = [[1.0, 0.0], [0.0, 1.0]];
        for n in 1..30 {
            let mut nt = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    nt[i][j] = (term[i][0] * a[0][j] + term[i][1] * a[1][j]) * t / n as f64;
                }
            }
            term = nt;
            for i in 0..2 {
                for j in 0..2 {
                    e[i][j] += term[i][j];
                }
            }
        }
        for k in 0..d.len() {
            let (p, q) = (d.x[k] - c[0], d.y[k] - c[1]);
            if p.abs() < 0.3 && q.abs() < 0.3 {
                let ex = c[0] + e[0][0] * p + e[0][1] * q;
                let ey = c[1] + e[1][0] * p + e[1][1] * q;
                assert!((f.forward[k][0] - ex).abs() < 1e-8 && (f.forward[k][1] - ey).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn variation_fields_examples() {
        let d = square(33);
        let eta = d.vector_fn(|_, _| [0.3, -0.2]);
        let u = d.scalar_fn(|x, y| x * y);
        let vf = variation_fields(&d, &eta, None, &u).unwrap();
        assert!(vf.z.max_norm() < 1e-12 && vf.w.max_norm() < 1e-12 && vf.x.max_abs() < 1e-10);

        let eta = d.vector_fn(|x, _| [x, 0.0]);
        let u = d.scalar_fn(|x, _| x);
        let vf = variation_fields(&d, &eta, None, &u).unwrap();
        for k in 0..d.len() {
            assert!((vf.z.x[k] - d.x[k]).abs() < 1e-12);
            assert!((vf.div_eta[k] - 1.0).abs() < 1e-12);
            assert!((vf.x0.values[k] - d.x[k]).abs() < 1e-10);
        }
    }
}
