//! Planar domains, their structured grids, and the limiting interface curve.
//!
//! Rectangles carry a node-centered tensor grid `[0, L1] x [0, L2]` with
//! trapezoid weights. Disks carry a polar grid with a single pole node,
//! `n_r - 1` rings and `n_theta` angular nodes per ring (no seam duplicate).
//! Both grids expose a symmetric edge-based stiffness so that the discrete
//! Dirichlet form and the Neumann Laplacian share one set of coefficients.

use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fields::{ScalarField, VectorField};

/// Tolerance on `|<n, nu>|` at interface endpoints.
pub const ORTHOGONALITY_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum DomainSpec {
    Rectangle {
        #[serde(rename = "L")]
        lengths: [f64; 2],
        n: [usize; 2],
    },
    Disk {
        #[serde(rename = "R")]
        radius: f64,
        n: [usize; 2],
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rectangle { lx: f64, ly: f64 },
    Disk { radius: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridId(pub u64);

#[derive(Clone, Copy, Debug)]
pub(crate) enum GridKind {
    Rect { nx: usize, ny: usize, hx: f64, hy: f64 },
    Polar { nr: usize, nt: usize, hr: f64, dt: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct BoundaryNode {
    pub index: usize,
    /// Outward unit normal.
    pub normal: [f64; 2],
    /// `A_dOmega(t, t)` for any unit tangent `t`; `+1/R` on a disk.
    pub curvature: f64,
    /// Arclength weight for boundary quadrature (zero at rectangle corners).
    pub weight: f64,
    pub corner: bool,
}

#[derive(Clone, Debug)]
pub struct Domain {
    pub shape: Shape,
    pub spec: DomainSpec,
    pub id: GridId,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub weights: Vec<f64>,
    /// Corners of a rectangle appear once per adjacent edge.
    pub boundary: Vec<BoundaryNode>,
    pub(crate) kind: GridKind,
    /// `(a, b, c)` with `phi^T K phi = sum c (phi_a - phi_b)^2`.
    pub(crate) edges: Vec<(usize, usize, f64)>,
    is_boundary: Vec<bool>,
}

pub fn build_domain(spec: &DomainSpec) -> Result<Domain> {
    match *spec {
        DomainSpec::Rectangle { lengths, n } => {
            for (k, l) in lengths.iter().enumerate() {
                if !(*l > 0.0) || !l.is_finite() {
                    return Err(invalid(&format!("domain.L[{k}]"), "length must be positive"));
                }
            }
            for (k, m) in n.iter().enumerate() {
                if *m < 16 {
                    return Err(invalid(&format!("domain.n[{k}]"), "need at least 16 nodes per side"));
                }
            }
            Ok(rectangle(lengths, n, spec.clone()))
        }
        DomainSpec::Disk { radius, n } => {
            if !(radius > 0.0) || !radius.is_finite() {
                return Err(invalid("domain.R", "radius must be positive"));
            }
            if n[0] < 16 {
                return Err(invalid("domain.n[0]", "need n_r >= 16"));
            }
            if n[1] < 32 || n[1] % 2 != 0 {
                return Err(invalid("domain.n[1]", "need an even n_theta >= 32"));
            }
            Ok(disk(radius, n, spec.clone()))
        }
    }
}

fn grid_id(spec: &DomainSpec) -> GridId {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    match spec {
        DomainSpec::Rectangle { lengths, n } => {
            0u8.hash(&mut h);
            lengths[0].to_bits().hash(&mut h);
            lengths[1].to_bits().hash(&mut h);
            n.hash(&mut h);
        }
        DomainSpec::Disk { radius, n } => {
            1u8.hash(&mut h);
            radius.to_bits().hash(&mut h);
            n.hash(&mut h);
        }
    }
    GridId(h.finish())
}

fn trapezoid(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

fn rectangle(l: [f64; 2], n: [usize; 2], spec: DomainSpec) -> Domain {
    let (nx, ny) = (n[0], n[1]);
    let hx = l[0] / (nx - 1) as f64;
    let hy = l[1] / (ny - 1) as f64;
    let wx = trapezoid(nx, hx);
    let wy = trapezoid(ny, hy);
    let total = nx * ny;
    let mut x = Vec::with_capacity(total);
    let mut y = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    for j in 0..ny {
        for i in 0..nx {
            x.push(if i == nx - 1 { l[0] } else { i as f64 * hx });
            y.push(if j == ny - 1 { l[1] } else { j as f64 * hy });
            weights.push(wx[i] * wy[j]);
        }
    }
    let mut edges = Vec::with_capacity(2 * total);
    for j in 0..ny {
        for i in 0..nx {
            let k = i + nx * j;
            if i + 1 < nx {
                edges.push((k, k + 1, wy[j] / hx));
            }
            if j + 1 < ny {
                edges.push((k, k + nx, wx[i] / hy));
            }
        }
    }
    let mut boundary = Vec::new();
    let mut push = |i: usize, j: usize, normal: [f64; 2], weight: f64| {
        let corner = (i == 0 || i == nx - 1) && (j == 0 || j == ny - 1);
        boundary.push(BoundaryNode {
            index: i + nx * j,
            normal,
            curvature: 0.0,
            weight: if corner { 0.0 } else { weight },
            corner,
        });
    };
    for j in 0..ny {
        push(0, j, [-1.0, 0.0], hy);
        push(nx - 1, j, [1.0, 0.0], hy);
    }
    for i in 0..nx {
        push(i, 0, [0.0, -1.0], hx);
        push(i, ny - 1, [0.0, 1.0], hx);
    }
    finish(Shape::Rectangle { lx: l[0], ly: l[1] }, spec, x, y, weights, boundary, GridKind::Rect { nx, ny, hx, hy }, edges)
}

fn disk(radius: f64, n: [usize; 2], spec: DomainSpec) -> Domain {
    let (nr, nt) = (n[0], n[1]);
    let hr = radius / (nr - 1) as f64;
    let dt = 2.0 * PI / nt as f64;
    let total = 1 + (nr - 1) * nt;
    let mut x = vec![0.0; total];
    let mut y = vec![0.0; total];
    let mut weights = vec![0.0; total];
    weights[0] = PI * hr * hr / 4.0;
    for i in 1..nr {
        let r = if i == nr - 1 { radius } else { i as f64 * hr };
        for j in 0..nt {
            let k = 1 + (i - 1) * nt + j;
            let th = j as f64 * dt;
            x[k] = r * th.cos();
            y[k] = r * th.sin();
            weights[k] = if i == nr - 1 {
                (radius * hr / 2.0 - hr * hr / 8.0) * dt
            } else {
                r * hr * dt
            };
        }
    }
    let node = |i: usize, j: usize| 1 + (i - 1) * nt + (j % nt);
    let mut edges = Vec::with_capacity(2 * total);
    for j in 0..nt {
        edges.push((0, node(1, j), dt / 2.0));
    }
    for i in 1..nr {
        let r = i as f64 * hr;
        let rim = i == nr - 1;
        for j in 0..nt {
            if !rim {
                edges.push((node(i, j), node(i + 1, j), (r + hr / 2.0) * dt / hr));
            }
            let extent = if rim { hr / 2.0 } else { hr };
            edges.push((node(i, j), node(i, j + 1), extent / (r * dt)));
        }
    }
    let boundary = (0..nt)
        .map(|j| {
            let th = j as f64 * dt;
            BoundaryNode {
                index: node(nr - 1, j),
                normal: [th.cos(), th.sin()],
                curvature: 1.0 / radius,
                weight: radius * dt,
                corner: false,
            }
        })
        .collect();
    finish(Shape::Disk { radius }, spec, x, y, weights, boundary, GridKind::Polar { nr, nt, hr, dt }, edges)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    shape: Shape,
    spec: DomainSpec,
    x: Vec<f64>,
    y: Vec<f64>,
    weights: Vec<f64>,
    boundary: Vec<BoundaryNode>,
    kind: GridKind,
    edges: Vec<(usize, usize, f64)>,
) -> Domain {
    let mut is_boundary = vec![false; x.len()];
    for b in &boundary {
        is_boundary[b.index] = true;
    }
    Domain { id: grid_id(&spec), shape, spec, x, y, weights, boundary, kind, edges, is_boundary }
}

impl Domain {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn point(&self, k: usize) -> [f64; 2] {
        [self.x[k], self.y[k]]
    }

    pub fn area(&self) -> f64 {
        match self.shape {
            Shape::Rectangle { lx, ly } => lx * ly,
            Shape::Disk { radius } => PI * radius * radius,
        }
    }

    pub fn is_boundary(&self, k: usize) -> bool {
        self.is_boundary[k]
    }

    /// Smallest grid spacing (arc spacing at the rim for disks).
    pub fn min_spacing(&self) -> f64 {
        match self.kind {
            GridKind::Rect { hx, hy, .. } => hx.min(hy),
            GridKind::Polar { hr, dt, .. } => {
                let Shape::Disk { radius } = self.shape else { unreachable!() };
                hr.min(radius * dt)
            }
        }
    }

    pub fn max_spacing(&self) -> f64 {
        match self.kind {
            GridKind::Rect { hx, hy, .. } => hx.max(hy),
            GridKind::Polar { hr, dt, .. } => {
                let Shape::Disk { radius } = self.shape else { unreachable!() };
                hr.max(radius * dt)
            }
        }
    }

    pub fn diameter(&self) -> f64 {
        match self.shape {
            Shape::Rectangle { lx, ly } => lx.hypot(ly),
            Shape::Disk { radius } => 2.0 * radius,
        }
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.len());
        self.weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    pub fn mean(&self, f: &[f64]) -> f64 {
        self.integrate(f) / self.weights.iter().sum::<f64>()
    }

    /// Sum of quadrature weights; equals the area exactly on both grids.
    pub fn measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Discrete Dirichlet form `phi^T K psi`.
    pub fn dirichlet_form(&self, phi: &[f64], psi: &[f64]) -> f64 {
        self.edges
            .iter()
            .map(|&(a, b, c)| c * (phi[a] - phi[b]) * (psi[a] - psi[b]))
            .sum()
    }

    /// `K phi`, the stiffness applied to `phi` (equals `-M L phi`).
    pub fn stiffness_apply(&self, phi: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; phi.len()];
        for &(a, b, c) in &self.edges {
            let d = c * (phi[a] - phi[b]);
            out[a] += d;
            out[b] -= d;
        }
        out
    }

    /// Neumann Laplacian `L phi = -M^{-1} K phi` (ghost-mirror 5-point on rectangles).
    pub fn laplacian(&self, phi: &[f64]) -> Vec<f64> {
        let mut k = self.stiffness_apply(phi);
        for (v, w) in k.iter_mut().zip(&self.weights) {
            *v = -*v / w;
        }
        k
    }

    /// Stiffness triplets `(row, col, value)` of `K`, both triangles.
    pub fn stiffness_triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut diag = vec![0.0; self.len()];
        let mut t = Vec::with_capacity(2 * self.edges.len() + self.len());
        for &(a, b, c) in &self.edges {
            diag[a] += c;
            diag[b] += c;
            t.push((a, b, -c));
            t.push((b, a, -c));
        }
        t.extend(diag.into_iter().enumerate().map(|(k, d)| (k, k, d)));
        t
    }

    /// Node map of the mirror reflection across the line through `origin`
    /// with unit normal `normal`. Fails if the grid is not mirror symmetric.
    pub fn reflection_map(&self, origin: [f64; 2], normal: [f64; 2]) -> Result<Vec<usize>> {
        let nn = normal[0].hypot(normal[1]);
        let nrm = [normal[0] / nn, normal[1] / nn];
        let tol = 1e-9 * self.diameter();
        let mut map = Vec::with_capacity(self.len());
        for k in 0..self.len() {
            let d = (self.x[k] - origin[0]) * nrm[0] + (self.y[k] - origin[1]) * nrm[1];
            let p = [self.x[k] - 2.0 * d * nrm[0], self.y[k] - 2.0 * d * nrm[1]];
            let q = self.nearest_node(p);
            if (self.x[q] - p[0]).hypot(self.y[q] - p[1]) > tol {
                return Err(Error::Geometry(format!("grid is not symmetric under the requested reflection (node {k})")));
            }
            map.push(q);
        }
        Ok(map)
    }

    pub fn nearest_node(&self, p: [f64; 2]) -> usize {
        match self.kind {
            GridKind::Rect { nx, ny, hx, hy } => {
                let i = ((p[0] / hx).round().max(0.0) as usize).min(nx - 1);
                let j = ((p[1] / hy).round().max(0.0) as usize).min(ny - 1);
                i + nx * j
            }
            GridKind::Polar { nr, nt, hr, dt } => {
                let r = p[0].hypot(p[1]);
                let i = ((r / hr).round() as usize).min(nr - 1);
                if i == 0 {
                    return 0;
                }
                let th = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
                let j = ((th / dt).round() as usize) % nt;
                1 + (i - 1) * nt + j
            }
        }
    }

    /// Distance from `p` to the boundary (positive inside).
    pub fn boundary_distance(&self, p: [f64; 2]) -> f64 {
        match self.shape {
            Shape::Rectangle { lx, ly } => p[0].min(lx - p[0]).min(p[1]).min(ly - p[1]),
            Shape::Disk { radius } => radius - p[0].hypot(p[1]),
        }
    }

    /// Outward normal and boundary curvature of the closest boundary point.
    pub fn boundary_frame(&self, p: [f64; 2]) -> ([f64; 2], f64) {
        match self.shape {
            Shape::Rectangle { lx, ly } => {
                let d = [p[0], lx - p[0], p[1], ly - p[1]];
                let k = (0..4).min_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
                let n = [[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]][k];
                (n, 0.0)
            }
            Shape::Disk { radius } => {
                let r = p[0].hypot(p[1]);
                ([p[0] / r, p[1] / r], 1.0 / radius)
            }
        }
    }

    pub fn scalar(&self, values: Vec<f64>) -> ScalarField {
        ScalarField::new(self, values)
    }

    pub fn scalar_fn(&self, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField::new(self, (0..self.len()).map(|k| f(self.x[k], self.y[k])).collect())
    }

    pub fn vector_fn(&self, f: impl Fn(f64, f64) -> [f64; 2]) -> VectorField {
        let (mut a, mut b) = (Vec::with_capacity(self.len()), Vec::with_capacity(self.len()));
        for k in 0..self.len() {
            let v = f(self.x[k], self.y[k]);
            a.push(v[0]);
            b.push(v[1]);
        }
        VectorField::new(self, a, b)
    }

    /// Largest `|eta . nu|` over boundary nodes.
    pub fn tangency_defect(&self, eta: &VectorField) -> f64 {
        self.boundary
            .iter()
            .map(|b| (eta.x[b.index] * b.normal[0] + eta.y[b.index] * b.normal[1]).abs())
            .fold(0.0, f64::max)
    }

    /// Removes the normal component at boundary nodes (both components at corners).
    pub fn project_tangent(&self, eta: &mut VectorField) {
        for b in &self.boundary {
            let k = b.index;
            let d = eta.x[k] * b.normal[0] + eta.y[k] * b.normal[1];
            eta.x[k] -= d * b.normal[0];
            eta.y[k] -= d * b.normal[1];
        }
    }
}

// ---------------------------------------------------------------------------
// Interface curves

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InterfaceSpec {
    /// Either a vertical line `x = c` across a rectangle, or explicit endpoints.
    Segment {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        from: Option<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        to: Option<[f64; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ds: Option<f64>,
    },
    /// Diameter of a disk through the center at angle `angle` (radians).
    Diameter {
        #[serde(default)]
        angle: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ds: Option<f64>,
    },
    Circle {
        center: [f64; 2],
        r: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ds: Option<f64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InterfaceKind {
    Segment { a: [f64; 2], b: [f64; 2] },
    Diameter { a: [f64; 2], b: [f64; 2] },
    Circle { center: [f64; 2], radius: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct Endpoint {
    pub node: usize,
    pub point: [f64; 2],
    /// Outward co-normal of the curve at this end.
    pub conormal: [f64; 2],
    /// Outward normal of the domain boundary at this point.
    pub boundary_normal: [f64; 2],
    /// `A_dOmega(n, n)`.
    pub boundary_curvature: f64,
    /// `|<n, nu>|`.
    pub orthogonality_defect: f64,
}

#[derive(Clone, Debug)]
pub struct InterfaceCurve {
    pub kind: InterfaceKind,
    pub closed: bool,
    pub length: f64,
    pub ds: f64,
    /// Arclength parameter of each node.
    pub s: Vec<f64>,
    pub points: Vec<[f64; 2]>,
    pub normals: Vec<[f64; 2]>,
    pub tangents: Vec<[f64; 2]>,
    /// Signed curvature with respect to `n`; `1/r` on a circle.
    pub curvature: Vec<f64>,
    pub weights: Vec<f64>,
    pub endpoints: Vec<Endpoint>,
}

pub fn build_interface(domain: &Domain, spec: &InterfaceSpec) -> Result<InterfaceCurve> {
    let tol = 1e-9 * domain.diameter();
    match spec {
        InterfaceSpec::Segment { x, from, to, ds } => {
            let (a, b) = match (x, from, to) {
                (Some(c), None, None) => {
                    let Shape::Rectangle { lx, ly } = domain.shape else {
                        return Err(invalid("interface.x", "vertical segments need a rectangle"));
                    };
                    if !(*c > 0.0 && *c < lx) {
                        return Err(invalid("interface.x", "line must cross the rectangle interior"));
                    }
                    ([*c, 0.0], [*c, ly])
                }
                (None, Some(a), Some(b)) => (*a, *b),
                _ => return Err(invalid("interface", "segment needs either `x` or both `from` and `to`")),
            };
            for (name, p) in [("from", a), ("to", b)] {
                if domain.boundary_distance(p).abs() > tol {
                    return Err(invalid(&format!("interface.{name}"), "segment endpoint must lie on the boundary"));
                }
            }
            straight(domain, InterfaceKind::Segment { a, b }, a, b, ds.unwrap_or(domain.min_spacing()))
        }
        InterfaceSpec::Diameter { angle, ds } => {
            let Shape::Disk { radius } = domain.shape else {
                return Err(invalid("interface.kind", "diameter needs a disk domain"));
            };
            let e = [angle.cos(), angle.sin()];
            let a = [-radius * e[0], -radius * e[1]];
            let b = [radius * e[0], radius * e[1]];
            straight(domain, InterfaceKind::Diameter { a, b }, a, b, ds.unwrap_or(domain.min_spacing()))
        }
        InterfaceSpec::Circle { center, r, ds } => {
            if !(*r > 0.0) {
                return Err(invalid("interface.r", "radius must be positive"));
            }
            let clearance = match domain.shape {
                Shape::Rectangle { .. } => domain.boundary_distance(*center) - r,
                Shape::Disk { radius } => radius - center[0].hypot(center[1]) - r,
            };
            if !(clearance > 0.0) {
                return Err(invalid("interface", "circle must lie strictly inside the domain"));
            }
            Ok(circle(*center, *r, ds.unwrap_or(domain.min_spacing())))
        }
    }
}

fn straight(domain: &Domain, kind: InterfaceKind, a: [f64; 2], b: [f64; 2], ds: f64) -> Result<InterfaceCurve> {
    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
    if !(len > 0.0) {
        return Err(invalid("interface", "degenerate segment"));
    }
    let m = (len / ds).ceil().max(2.0) as usize;
    let ds = len / m as f64;
    let t = [(b[0] - a[0]) / len, (b[1] - a[1]) / len];
    let n = [t[1], -t[0]];
    let s: Vec<f64> = (0..=m).map(|i| if i == m { len } else { i as f64 * ds }).collect();
    let points = s.iter().map(|&s| [a[0] + s * t[0], a[1] + s * t[1]]).collect();
    let mut weights = vec![ds; m + 1];
    weights[0] = ds / 2.0;
    weights[m] = ds / 2.0;
    let endpoints = [(0usize, a, [-t[0], -t[1]]), (m, b, t)]
        .into_iter()
        .map(|(node, p, conormal)| {
            let (nu, kappa) = domain.boundary_frame(p);
            Endpoint {
                node,
                point: p,
                conormal,
                boundary_normal: nu,
                boundary_curvature: kappa,
                orthogonality_defect: (n[0] * nu[0] + n[1] * nu[1]).abs(),
            }
        })
        .collect();
    Ok(InterfaceCurve {
        kind,
        closed: false,
        length: len,
        ds,
        s,
        points,
        normals: vec![n; m + 1],
        tangents: vec![t; m + 1],
        curvature: vec![0.0; m + 1],
        weights,
        endpoints,
    })
}

fn circle(c: [f64; 2], r: f64, ds: f64) -> InterfaceCurve {
    let len = 2.0 * PI * r;
    let m = (len / ds).ceil().max(8.0) as usize;
    let ds = len / m as f64;
    let mut points = Vec::with_capacity(m);
    let mut normals = Vec::with_capacity(m);
    let mut tangents = Vec::with_capacity(m);
    for i in 0..m {
        let th = 2.0 * PI * i as f64 / m as f64;
        let (sn, cs) = th.sin_cos();
        points.push([c[0] + r * cs, c[1] + r * sn]);
        normals.push([cs, sn]);
        tangents.push([-sn, cs]);
    }
    InterfaceCurve {
        kind: InterfaceKind::Circle { center: c, radius: r },
        closed: true,
        length: len,
        ds,
        s: (0..m).map(|i| i as f64 * ds).collect(),
        points,
        normals,
        tangents,
        curvature: vec![1.0 / r; m],
        weights: vec![ds; m],
        endpoints: Vec::new(),
    }
}

impl InterfaceCurve {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn integrate(&self, f: &[f64]) -> f64 {
        self.weights.iter().zip(f).map(|(w, v)| w * v).sum()
    }

    pub fn max_orthogonality_defect(&self) -> f64 {
        self.endpoints.iter().map(|e| e.orthogonality_defect).fold(0.0, f64::max)
    }

    /// Point of the curve at arclength `s` (wrapped for closed curves).
    pub fn eval(&self, s: f64) -> ([f64; 2], [f64; 2]) {
        match self.kind {
            InterfaceKind::Segment { a, .. } | InterfaceKind::Diameter { a, .. } => {
                let t = self.tangents[0];
                ([a[0] + s * t[0], a[1] + s * t[1]], self.normals[0])
            }
            InterfaceKind::Circle { center, radius } => {
                let th = s / radius;
                let (sn, cs) = th.sin_cos();
                ([center[0] + radius * cs, center[1] + radius * sn], [cs, sn])
            }
        }
    }

    /// Distance from the curve to the parts of the boundary it does not touch,
    /// capped by the radius for circles (the normal frame degenerates at the center).
    pub fn clearance(&self, domain: &Domain) -> f64 {
        match self.kind {
            InterfaceKind::Circle { center, radius } => {
                let wall = match domain.shape {
                    Shape::Rectangle { .. } => domain.boundary_distance(center) - radius,
                    Shape::Disk { radius: rr } => rr - center[0].hypot(center[1]) - radius,
                };
                wall.min(radius)
            }
            InterfaceKind::Segment { a, b } => {
                // Distance to the boundary pieces away from the endpoints, measured at the midpoint.
                let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0];
                let n = self.normals[0];
                let mut d = f64::INFINITY;
                for sgn in [1.0, -1.0] {
                    let mut lo = 0.0;
                    let mut hi = domain.diameter();
                    for _ in 0..80 {
                        let t = 0.5 * (lo + hi);
                        let p = [mid[0] + sgn * t * n[0], mid[1] + sgn * t * n[1]];
                        if domain.boundary_distance(p) > 0.0 {
                            lo = t;
                        } else {
                            hi = t;
                        }
                    }
                    d = d.min(lo);
                }
                d
            }
            InterfaceKind::Diameter { .. } => {
                let Shape::Disk { radius } = domain.shape else { unreachable!() };
                radius
            }
        }
    }
}

/// Signed distance, negative inside `{u0 = 1}`.
pub fn signed_distance(interface: &InterfaceCurve, domain: &Domain) -> ScalarField {
    domain.scalar_fn(|x, y| signed_distance_at(interface, [x, y]))
}

pub fn signed_distance_at(interface: &InterfaceCurve, p: [f64; 2]) -> f64 {
    match interface.kind {
        InterfaceKind::Segment { a, .. } | InterfaceKind::Diameter { a, .. } => {
            let n = interface.normals[0];
            (p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1]
        }
        InterfaceKind::Circle { center, radius } => (p[0] - center[0]).hypot(p[1] - center[1]) - radius,
    }
}

// ---------------------------------------------------------------------------
// Normal speeds and their extension

#[derive(Clone, Debug)]
pub struct NormalSpeed {
    pub values: Vec<f64>,
}

impl NormalSpeed {
    pub fn new(curve: &InterfaceCurve, values: Vec<f64>) -> Result<Self> {
        if values.len() != curve.len() {
            return Err(invalid("xi", format!("expected {} values, got {}", curve.len(), values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("xi", "non-finite value"));
        }
        Ok(NormalSpeed { values })
    }

    pub fn from_fn(curve: &InterfaceCurve, f: impl Fn(f64) -> f64) -> Self {
        NormalSpeed { values: curve.s.iter().map(|&s| f(s)).collect() }
    }

    pub fn zeros(curve: &InterfaceCurve) -> Self {
        NormalSpeed { values: vec![0.0; curve.len()] }
    }

    pub fn integral(&self, curve: &InterfaceCurve) -> f64 {
        curve.integrate(&self.values)
    }

    /// `|int xi| <= tol * length`.
    pub fn is_mean_zero(&self, curve: &InterfaceCurve, tol: f64) -> bool {
        self.integral(curve).abs() <= tol * curve.length
    }

    /// Cubic (Catmull-Rom) interpolation in arclength, with its derivative.
    pub fn eval(&self, curve: &InterfaceCurve, s: f64) -> (f64, f64) {
        let v = &self.values;
        let m = v.len();
        let ds = curve.ds;
        let get = |i: isize| -> f64 {
            if curve.closed {
                v[i.rem_euclid(m as isize) as usize]
            } else if i < 0 {
                let k = (-i) as usize;
                (1 + k) as f64 * v[0] - k as f64 * v[1.min(m - 1)]
            } else if i as usize >= m {
                let k = i as usize - (m - 1);
                (1 + k) as f64 * v[m - 1] - k as f64 * v[m - 2]
            } else {
                v[i as usize]
            }
        };
        let t = if curve.closed { s.rem_euclid(curve.length) / ds } else { (s / ds).clamp(0.0, (m - 1) as f64) };
        let i = (t.floor() as isize).min(m as isize - if curve.closed { 1 } else { 2 });
        let f = t - i as f64;
        let (w, dw) = catmull_rom(f);
        let mut val = 0.0;
        let mut der = 0.0;
        for q in 0..4 {
            let u = get(i - 1 + q as isize);
            val += w[q] * u;
            der += dw[q] * u;
        }
        (val, der / ds)
    }
}

/// Catmull-Rom weights and their derivatives for nodes `-1, 0, 1, 2` at offset `f`.
pub(crate) fn catmull_rom(f: f64) -> ([f64; 4], [f64; 4]) {
    let f2 = f * f;
    let f3 = f2 * f;
    (
        [
            0.5 * (-f3 + 2.0 * f2 - f),
            0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
            0.5 * (-3.0 * f3 + 4.0 * f2 + f),
            0.5 * (f3 - f2),
        ],
        [
            0.5 * (-3.0 * f2 + 4.0 * f - 1.0),
            0.5 * (9.0 * f2 - 10.0 * f),
            0.5 * (-9.0 * f2 + 8.0 * f + 1.0),
            0.5 * (3.0 * f2 - 2.0 * f),
        ],
    )
}

/// Smooth cutoff with `c(0) = 1`, `c'(0) = 0`, support `|d| < w`.
pub fn cutoff(d: f64, w: f64) -> f64 {
    let q = d / w;
    if q.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - q * q)).exp()
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ExtensionOptions {
    /// Cutoff half-width; defaults to a quarter of the clearance.
    pub width: Option<f64>,
}

/// Extends a normal speed `xi` on the interface to a tangent grid field
/// with `eta = xi n` on the curve and `(n, n . grad eta) = 0` there.
pub fn extend_normal_speed(
    interface: &InterfaceCurve,
    domain: &Domain,
    xi: &NormalSpeed,
    opts: ExtensionOptions,
) -> Result<VectorField> {
    if xi.values.len() != interface.len() {
        return Err(invalid("xi", "length does not match the interface"));
    }
    let defect = interface.max_orthogonality_defect();
    if defect > ORTHOGONALITY_TOL {
        return Err(Error::Geometry(format!("interface meets the boundary at a defect of {defect:e}")));
    }
    let clearance = interface.clearance(domain);
    let w = opts.width.unwrap_or(clearance / 4.0);
    if !(w > 0.0) || w > clearance {
        return Err(invalid("extension.width", format!("width must lie in (0, {clearance}]")));
    }
    let mut eta = domain.vector_fn(|x, y| extension_at(interface, xi, w, domain, [x, y]));
    domain.project_tangent(&mut eta);
    eta.tangent = true;
    Ok(eta)
}

/// Pointwise value of the extension used by [`extend_normal_speed`].
pub fn extension_at(interface: &InterfaceCurve, xi: &NormalSpeed, w: f64, domain: &Domain, p: [f64; 2]) -> [f64; 2] {
    match interface.kind {
        InterfaceKind::Segment { a, .. } => {
            let t = interface.tangents[0];
            let n = interface.normals[0];
            let s = (p[0] - a[0]) * t[0] + (p[1] - a[1]) * t[1];
            let d = (p[0] - a[0]) * n[0] + (p[1] - a[1]) * n[1];
            let c = cutoff(d, w);
            if c == 0.0 {
                return [0.0, 0.0];
            }
            let v = xi.eval(interface, s).0 * c;
            [v * n[0], v * n[1]]
        }
        InterfaceKind::Circle { center, radius } => {
            let dx = p[0] - center[0];
            let dy = p[1] - center[1];
            let r = dx.hypot(dy);
            let c = cutoff(r - radius, w);
            if c == 0.0 {
                return [0.0, 0.0];
            }
            let th = dy.atan2(dx).rem_euclid(2.0 * PI);
            let v = xi.eval(interface, th * radius).0 * c;
            [v * dx / r, v * dy / r]
        }
        InterfaceKind::Diameter { a, .. } => {
            let Shape::Disk { radius } = domain.shape else { unreachable!() };
            let t = interface.tangents[0];
            let n = interface.normals[0];
            // Local frame: x along the diameter, y along -n.
            let lx = p[0] * t[0] + p[1] * t[1];
            let ly = -(p[0] * n[0] + p[1] * n[1]);
            let c = cutoff(ly, w);
            if c == 0.0 {
                return [0.0, 0.0];
            }
            let s = lx - (a[0] * t[0] + a[1] * t[1]);
            let v = xi.eval(interface, s).0 * c;
            let r2 = radius * radius;
            // Field (xy/R^2, y^2/R^2 - 1) in the local frame is tangent on the rim.
            let fx = lx * ly / r2;
            let fy = ly * ly / r2 - 1.0;
            // Local y axis is -n, so the local vector (fx, fy) maps to fx t - fy n.
            [v * (fx * t[0] - fy * n[0]), v * (fx * t[1] - fy * n[1])]
        }
    }
}
