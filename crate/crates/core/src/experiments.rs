//! Epsilon sweeps that set diffuse-interface quantities against their
//! sharp-interface limits. Each sweep point yields tidy rows
//! `(eps, quantity, probe, measured, predicted)`; verdicts are recomputed
//! from the rows alone.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::critical::{el_residual, solve_critical, tanh_profile, SolveOptions, SolveSummary, Symmetry};
use crate::domain::{
    build_domain, build_interface, extend_normal_speed, extension_at, signed_distance, Domain, DomainSpec,
    ExtensionOptions, InterfaceCurve, InterfaceSpec, NormalSpeed,
};
use crate::energies::{discrepancy_report, phi, ModelParams, Workspace};
use crate::error::{invalid, Error, Result};
use crate::fields::{gradient, variation_fields, ScalarField, VectorField};
use crate::green::GreenKernel;
use crate::io::num;
use crate::linalg::LanczosOptions;
use crate::sharp::{
    criticality_audit, limit_prediction, ok_sharp_second_variation, sharp_potential, Accel, CurveJet, NonlocalTerms,
};
use crate::spectra::{assemble_linearized, eigenpairs, jacobi_operator, Boundary, JacobiBoundary, MAX_EIGENPAIRS};
use crate::variations::{inner_direct, normal_derivative_field, Functional};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Equipartition,
    Reshetnyak,
    VariationLimitAc,
    VariationLimitB,
    VariationLimitOk,
    EigenBoundAc,
    EigenBoundOk,
    StabilityAc,
    StabilityOk,
    Criticality,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Equipartition => "equipartition",
            ExperimentKind::Reshetnyak => "reshetnyak",
            ExperimentKind::VariationLimitAc => "variation_limit_ac",
            ExperimentKind::VariationLimitB => "variation_limit_b",
            ExperimentKind::VariationLimitOk => "variation_limit_ok",
            ExperimentKind::EigenBoundAc => "eigen_bound_ac",
            ExperimentKind::EigenBoundOk => "eigen_bound_ok",
            ExperimentKind::StabilityAc => "stability_ac",
            ExperimentKind::StabilityOk => "stability_ok",
            ExperimentKind::Criticality => "criticality",
        }
    }

    fn default_state(&self) -> StateChoice {
        match self {
            ExperimentKind::Equipartition
            | ExperimentKind::Reshetnyak
            | ExperimentKind::VariationLimitAc
            | ExperimentKind::VariationLimitB => StateChoice::Profile,
            _ => StateChoice::Critical,
        }
    }
}

/// Normal-speed probe on the interface, as a function of arclength `s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Probe {
    /// `a cos(k pi s / L)` on open curves, `a cos(2 pi k s / L)` on closed ones.
    Cos {
        k: usize,
        #[serde(default = "one")]
        amplitude: f64,
    },
    Sin {
        k: usize,
        #[serde(default = "one")]
        amplitude: f64,
    },
    Constant {
        value: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Probe {
    pub fn label(&self) -> String {
        match self {
            Probe::Cos { k, .. } => format!("cos{k}"),
            Probe::Sin { k, .. } => format!("sin{k}"),
            Probe::Constant { .. } => "const".to_string(),
        }
    }

    pub fn speed(&self, curve: &InterfaceCurve) -> NormalSpeed {
        let l = curve.length;
        let w = |k: usize| if curve.closed { 2.0 * PI * k as f64 / l } else { PI * k as f64 / l };
        match *self {
            Probe::Cos { k, amplitude } => NormalSpeed::from_fn(curve, |s| amplitude * (w(k) * s).cos()),
            Probe::Sin { k, amplitude } => NormalSpeed::from_fn(curve, |s| amplitude * (w(k) * s).sin()),
            Probe::Constant { value } => NormalSpeed::from_fn(curve, |_| value),
        }
    }
}

/// Test function for the quadratic-expression limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TestFunction {
    Constant { value: f64 },
    Gaussian { center: [f64; 2], width: f64 },
    /// `cos(a x) cos(b y)`.
    Cos { freq: [f64; 2] },
}

impl TestFunction {
    pub fn label(&self) -> String {
        match self {
            TestFunction::Constant { .. } => "const".to_string(),
            TestFunction::Gaussian { center, .. } => format!("gauss({},{})", center[0], center[1]),
            TestFunction::Cos { freq } => format!("cos({},{})", freq[0], freq[1]),
        }
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        match *self {
            TestFunction::Constant { value } => value,
            TestFunction::Gaussian { center, width } => {
                let r2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                (-r2 / (width * width)).exp()
            }
            TestFunction::Cos { freq } => (freq[0] * p[0]).cos() * (freq[1] * p[1]).cos(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccelChoice {
    #[default]
    Z,
    W,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateChoice {
    /// `u = -tanh(d / eps)`.
    Profile,
    /// Newton critical point started from the profile.
    Critical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub domain: DomainSpec,
    pub interface: InterfaceSpec,
    /// Strictly decreasing.
    pub eps: Vec<f64>,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probes: Vec<Probe>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub test_functions: Vec<TestFunction>,
    #[serde(default)]
    pub accel: AccelChoice,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extension_width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StateChoice>,
    #[serde(default)]
    pub symmetry: Symmetry,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// When set, each sweep point refines the grid so that `eps / h` is at
    /// least this value (never coarser than `domain.n`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_over_h: Option<f64>,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Overrides of named verdict tolerances.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

fn default_modes() -> usize {
    4
}

fn default_newton_tol() -> f64 {
    1e-9
}

impl ExperimentConfig {
    /// A config with defaults for everything but the essentials.
    pub fn new(experiment: ExperimentKind, domain: DomainSpec, interface: InterfaceSpec, eps: Vec<f64>) -> Self {
        ExperimentConfig {
            experiment,
            domain,
            interface,
            eps,
            gamma: 0.0,
            m: None,
            probes: Vec::new(),
            test_functions: Vec::new(),
            accel: AccelChoice::Z,
            extension_width: None,
            state: None,
            symmetry: Symmetry::None,
            boundary: Boundary::Neumann,
            modes: default_modes(),
            eps_over_h: None,
            newton_tol: default_newton_tol(),
            seed: 0,
            tolerances: BTreeMap::new(),
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps.is_empty() {
            return Err(invalid("eps", "needs at least one value"));
        }
        for (i, &e) in self.eps.iter().enumerate() {
            if !(e > 0.0 && e.is_finite()) {
                return Err(invalid("eps", format!("must be positive, got {e}")));
            }
            if i > 0 && !(e < self.eps[i - 1]) {
                return Err(invalid("eps", "must be strictly decreasing"));
            }
        }
        ModelParams::new(self.eps[0], self.gamma, self.m)?;
        for (k, v) in &self.tolerances {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(invalid(&format!("tolerances.{k}"), "must be positive"));
            }
        }
        if self.modes == 0 || self.modes > MAX_EIGENPAIRS {
            return Err(invalid("modes", format!("must lie in 1..={MAX_EIGENPAIRS}")));
        }
        if !(self.newton_tol > 0.0) {
            return Err(invalid("newton_tol", "must be positive"));
        }
        if let Some(r) = self.eps_over_h {
            if !(r > 0.0 && r.is_finite()) {
                return Err(invalid("eps_over_h", "must be positive"));
            }
        }
        if let Some(w) = self.extension_width {
            if !(w > 0.0) {
                return Err(invalid("extension_width", "must be positive"));
            }
        }
        if self.gamma > 0.0 && matches!(self.experiment, ExperimentKind::StabilityOk | ExperimentKind::VariationLimitOk) {
            let d = build_domain(&self.domain)?;
            let c = build_interface(&d, &self.interface)?;
            for p in self.probes() {
                let xi = p.speed(&c);
                if !xi.is_mean_zero(&c, 1e-8 * c.length) {
                    return Err(invalid("probes", format!("{} is not mean-zero on the interface", p.label())));
                }
            }
        }
        build_domain(&self.domain)?;
        Ok(())
    }

    pub fn probes(&self) -> Vec<Probe> {
        if !self.probes.is_empty() {
            return self.probes.clone();
        }
        (1..=4).map(|k| Probe::Cos { k, amplitude: 0.1 }).collect()
    }

    fn test_functions(&self) -> Vec<TestFunction> {
        if self.test_functions.is_empty() {
            vec![TestFunction::Constant { value: 1.0 }]
        } else {
            self.test_functions.clone()
        }
    }

    fn state(&self) -> StateChoice {
        self.state.unwrap_or(self.experiment.default_state())
    }

    /// Grid of the sweep point at `eps`.
    pub fn grid_for(&self, eps: f64) -> DomainSpec {
        let Some(r) = self.eps_over_h else {
            return self.domain.clone();
        };
        let need = |len: f64| (r * len / eps).ceil() as usize + 1;
        match self.domain {
            DomainSpec::Rectangle { lengths, n } => DomainSpec::Rectangle {
                lengths,
                n: [n[0].max(need(lengths[0])), n[1].max(need(lengths[1]))],
            },
            DomainSpec::Disk { radius, n } => {
                let nt = n[1].max(need(2.0 * PI * radius)).div_ceil(4) * 4;
                DomainSpec::Disk { radius, n: [n[0].max(need(radius)), nt] }
            }
        }
    }

    fn tol(&self, name: &str, default: f64, scale: f64) -> f64 {
        self.tolerances.get(name).copied().unwrap_or(default) * scale
    }

    /// SHA-256 of the canonical JSON (sorted keys).
    pub fn hash(&self) -> String {
        crate::io::canonical_hash(&serde_json::to_value(self).expect("configs serialize"))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    /// Worker threads; `None` uses every logical core.
    pub jobs: Option<usize>,
    /// Multiplies every verdict tolerance.
    pub tol_scale: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { jobs: None, tol_scale: 1.0 }
    }
}

/// One measurement. `rel_gap` is `abs_gap / scale`, where the scale is
/// `|predicted|` unless the row says otherwise (zero predictions use 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub eps: f64,
    pub quantity: String,
    pub probe: String,
    pub measured: f64,
    pub predicted: f64,
    pub abs_gap: f64,
    pub rel_gap: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Row {
    pub fn new(eps: f64, quantity: &str, probe: &str, measured: f64, predicted: f64) -> Self {
        let scale = if predicted == 0.0 { 1.0 } else { predicted.abs() };
        Self::scaled(eps, quantity, probe, measured, predicted, scale)
    }

    pub fn scaled(eps: f64, quantity: &str, probe: &str, measured: f64, predicted: f64, scale: f64) -> Self {
        let abs_gap = (measured - predicted).abs();
        Row {
            eps,
            quantity: quantity.to_string(),
            probe: probe.to_string(),
            measured,
            predicted,
            abs_gap,
            rel_gap: abs_gap / scale,
            error: None,
        }
    }

    fn failed(eps: f64, e: &Error) -> Self {
        Row {
            eps,
            quantity: "error".to_string(),
            probe: String::new(),
            measured: f64::NAN,
            predicted: f64::NAN,
            abs_gap: f64::NAN,
            rel_gap: f64::NAN,
            error: Some(e.to_string()),
        }
    }
}

/// Observed order `log(gap_coarse / gap_fine) / log(eps_coarse / eps_fine)`
/// between successive sweep points (the base-2 log ratio for halving).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Order {
    pub quantity: String,
    pub probe: String,
    pub eps_coarse: f64,
    pub eps_fine: f64,
    pub order: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Verdict {
    /// Passes when `value <= threshold`.
    fn at_most(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Verdict { name: name.to_string(), pass: value <= threshold, value, threshold, detail: detail.into() }
    }

    fn at_least(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Verdict { name: name.to_string(), pass: value >= threshold, value, threshold, detail: detail.into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Timing {
    pub label: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepReport {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub rows: Vec<Row>,
    pub orders: Vec<Order>,
    pub verdicts: Vec<Verdict>,
    pub timings: Vec<Timing>,
}

pub const ROWS_HEADER: &str = "eps,quantity,probe,measured,predicted,abs_gap,rel_gap,error";
pub const VERDICTS_HEADER: &str = "name,pass,value,threshold,detail";
pub const ORDERS_HEADER: &str = "quantity,probe,eps_coarse,eps_fine,order";

fn csv_text(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SweepReport {
    pub fn pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn rows_csv(&self) -> String {
        let mut s = format!("{ROWS_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                num(r.eps),
                csv_text(&r.quantity),
                csv_text(&r.probe),
                num(r.measured),
                num(r.predicted),
                num(r.abs_gap),
                num(r.rel_gap),
                csv_text(r.error.as_deref().unwrap_or(""))
            ));
        }
        s
    }

    pub fn verdicts_csv(&self) -> String {
        let mut s = format!("{VERDICTS_HEADER}\n");
        for v in &self.verdicts {
            s.push_str(&format!("{},{},{},{},{}\n", csv_text(&v.name), v.pass, num(v.value), num(v.threshold), csv_text(&v.detail)));
        }
        s
    }

    pub fn orders_csv(&self) -> String {
        let mut s = format!("{ORDERS_HEADER}\n");
        for o in &self.orders {
            s.push_str(&format!("{},{},{},{},{}\n", csv_text(&o.quantity), csv_text(&o.probe), num(o.eps_coarse), num(o.eps_fine), num(o.order)));
        }
        s
    }

    /// Rows of one quantity, in sweep order.
    pub fn series(&self, quantity: &str, probe: &str) -> Vec<&Row> {
        series(&self.rows, quantity, probe)
    }

    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.verdicts.iter().find(|v| v.name == name)
    }
}

/// Version string embedded in reports: `SHARPLAB_GIT_DESCRIBE` at build
/// time if set, else the crate version.
pub fn version_string() -> String {
    option_env!("SHARPLAB_GIT_DESCRIBE").map(str::to_string).unwrap_or_else(|| format!("sharplab {}", env!("CARGO_PKG_VERSION")))
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::InvalidSpec { .. })
}

/// Runs a sweep. Sweep points run in parallel; a failing point leaves an
/// error row unless the failure is a configuration error, which aborts.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<SweepReport> {
    cfg.validate()?;
    if !(opts.tol_scale > 0.0 && opts.tol_scale.is_finite()) {
        return Err(invalid("tol_scale", "must be positive"));
    }
    let start = Instant::now();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let points: Vec<(f64, Result<Vec<Row>>, f64)> = pool.install(|| {
        cfg.eps
            .par_iter()
            .map(|&eps| {
                let t = Instant::now();
                let r = sweep_point(cfg, eps);
                (eps, r, t.elapsed().as_secs_f64())
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for (eps, r, secs) in points {
        match r {
            Ok(rs) => rows.extend(rs),
            Err(e) if is_config_error(&e) => return Err(e),
            Err(e) => rows.push(Row::failed(eps, &e)),
        }
        timings.push(Timing { label: format!("eps={eps}"), seconds: secs });
    }
    let orders = convergence_orders(&rows);
    let verdicts = verdicts(cfg, &rows, opts.tol_scale);
    timings.push(Timing { label: "total".to_string(), seconds: start.elapsed().as_secs_f64() });
    Ok(SweepReport {
        experiment: cfg.experiment,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: version_string(),
        rows,
        orders,
        verdicts,
        timings,
    })
}

// ---------------------------------------------------------------------------
// Sweep points

struct Point {
    domain: Domain,
    curve: InterfaceCurve,
    params: ModelParams,
}

fn point_setup(cfg: &ExperimentConfig, eps: f64) -> Result<Point> {
    let domain = build_domain(&cfg.grid_for(eps))?;
    let curve = build_interface(&domain, &cfg.interface)?;
    let params = ModelParams::new(eps, cfg.gamma, cfg.m)?;
    Ok(Point { domain, curve, params })
}

/// A Newton critical point. Vertical lamellae in a rectangle are solved on
/// a thin strip with the same columns and lifted, since `y`-independent
/// fields stay `y`-independent under the discrete equations.
pub fn critical_state(
    domain: &Domain,
    curve: &InterfaceCurve,
    p: &ModelParams,
    symmetry: Symmetry,
    tol: f64,
) -> Result<(ScalarField, SolveSummary)> {
    let opts = SolveOptions { symmetry, tol, ..Default::default() };
    let lamella = match (&domain.spec, &curve.kind) {
        (DomainSpec::Rectangle { lengths, n }, crate::domain::InterfaceKind::Segment { a, b }) if a[0] == b[0] && n[1] > 16 => {
            Some((*lengths, *n, a[0]))
        }
        _ => None,
    };
    let Some((lengths, n, x0)) = lamella else {
        let r = solve_critical(domain, Some(curve), p, None, &opts)?;
        let s = r.summary(domain);
        return Ok((r.u, s));
    };
    let hx = lengths[0] / (n[0] - 1) as f64;
    let strip = build_domain(&DomainSpec::Rectangle { lengths: [lengths[0], 15.0 * hx], n: [n[0], 16] })?;
    let sc = build_interface(&strip, &InterfaceSpec::Segment { x: Some(x0), from: None, to: None, ds: None })?;
    let r = solve_critical(&strip, Some(&sc), p, None, &opts)?;
    let u = domain.scalar_fn(|x, _| r.u.values[((x / hx).round() as usize).min(n[0] - 1)]);
    let v = if p.gamma != 0.0 { Some(Workspace::new(domain)?.solve(&u.values).0) } else { None };
    let (res, lambda) = el_residual(domain, p, &u.values, v.as_deref(), p.m.is_some() && symmetry == Symmetry::None);
    let mut summary = r.summary(&strip);
    summary.residual_norm = res.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
    if p.m.is_some() && symmetry == Symmetry::None {
        summary.lagrange_multiplier = lambda;
    }
    summary.mass = domain.mean(&u.values);
    Ok((u, summary))
}

fn state(cfg: &ExperimentConfig, pt: &Point) -> Result<(ScalarField, Option<SolveSummary>)> {
    match cfg.state() {
        StateChoice::Profile => Ok((tanh_profile(&pt.domain, &pt.curve, pt.params.eps), None)),
        StateChoice::Critical => {
            let (u, s) = critical_state(&pt.domain, &pt.curve, &pt.params, cfg.symmetry, cfg.newton_tol)?;
            Ok((u, Some(s)))
        }
    }
}

fn sweep_point(cfg: &ExperimentConfig, eps: f64) -> Result<Vec<Row>> {
    let pt = point_setup(cfg, eps)?;
    match cfg.experiment {
        ExperimentKind::Equipartition => equipartition_point(cfg, &pt),
        ExperimentKind::Reshetnyak => reshetnyak_point(cfg, &pt),
        ExperimentKind::VariationLimitAc | ExperimentKind::VariationLimitB | ExperimentKind::VariationLimitOk => {
            variation_point(cfg, &pt)
        }
        ExperimentKind::EigenBoundAc | ExperimentKind::EigenBoundOk => eigen_point(cfg, &pt),
        ExperimentKind::StabilityAc | ExperimentKind::StabilityOk => stability_point(cfg, &pt),
        ExperimentKind::Criticality => criticality_point(cfg, &pt),
    }
}

fn solve_rows(eps: f64, s: &Option<SolveSummary>) -> Vec<Row> {
    match s {
        Some(s) => vec![Row::new(eps, "newton_residual", "", s.residual_norm, 0.0)],
        None => Vec::new(),
    }
}

fn equipartition_point(cfg: &ExperimentConfig, pt: &Point) -> Result<Vec<Row>> {
    let eps = pt.params.eps;
    let (u, s) = state(cfg, pt)?;
    let rep = discrepancy_report(&pt.domain, &u, &ModelParams::allen_cahn(eps)?)?;
    let sigma_len = 4.0 / 3.0 * pt.curve.length;
    let d = signed_distance(&pt.curve, &pt.domain);
    let defect: Vec<f64> = (0..pt.domain.len())
        .map(|k| {
            let u0 = if d.values[k] < 0.0 { 1.0 } else { -1.0 };
            (phi(u.values[k]) - phi(u0)).abs()
        })
        .collect();
    let mut rows = solve_rows(eps, &s);
    rows.push(Row::new(eps, "energy", "", rep.ac_energy, sigma_len));
    rows.push(Row::new(eps, "phi_total_variation", "", rep.phi_total_variation, sigma_len));
    rows.push(Row::scaled(eps, "discrepancy_l1", "", rep.discrepancy_L1, 0.0, sigma_len));
    rows.push(Row::scaled(eps, "phi_vs_gradient", "", rep.phi_vs_gradient, 0.0, sigma_len));
    rows.push(Row::scaled(eps, "phi_l1_defect", "", pt.domain.integrate(&defect), 0.0, sigma_len));
    Ok(rows)
}

fn reshetnyak_point(cfg: &ExperimentConfig, pt: &Point) -> Result<Vec<Row>> {
    let eps = pt.params.eps;
    let (u, s) = state(cfg, pt)?;
    let g = gradient(&pt.domain, &u.values);
    let mut rows = solve_rows(eps, &s);
    for tf in cfg.test_functions() {
        let label = tf.label();
        let mut m = [0.0; 3];
        for k in 0..pt.domain.len() {
            let w = pt.domain.weights[k] * eps * tf.eval(pt.domain.point(k));
            m[0] += w * g.x[k] * g.x[k];
            m[1] += w * g.x[k] * g.y[k];
            m[2] += w * g.y[k] * g.y[k];
        }
        let mut m0 = [0.0; 3];
        for (k, nrm) in pt.curve.normals.iter().enumerate() {
            let w = 4.0 / 3.0 * pt.curve.weights[k] * tf.eval(pt.curve.points[k]);
            m0[0] += w * nrm[0] * nrm[0];
            m0[1] += w * nrm[0] * nrm[1];
            m0[2] += w * nrm[1] * nrm[1];
        }
        let frob = |a: [f64; 3]| (a[0] * a[0] + 2.0 * a[1] * a[1] + a[2] * a[2]).sqrt();
        let dist = frob([m[0] - m0[0], m[1] - m0[1], m[2] - m0[2]]);
        let scale = if frob(m0) > 0.0 { frob(m0) } else { 1.0 };
        for (i, name) in ["m_xx", "m_xy", "m_yy"].iter().enumerate() {
            rows.push(Row::scaled(eps, name, &label, m[i], m0[i], scale));
        }
        rows.push(Row::scaled(eps, "distance", &label, dist, 0.0, scale));
    }
    Ok(rows)
}

fn nonlocal_terms(ws: &Workspace, curve: &InterfaceCurve) -> NonlocalTerms {
    let pot = sharp_potential(ws, curve);
    NonlocalTerms::new(ws.domain, curve, &pot, &GreenKernel::new(ws.domain))
}

fn extension_width(cfg: &ExperimentConfig, pt: &Point) -> f64 {
    cfg.extension_width.unwrap_or(pt.curve.clearance(&pt.domain) / 4.0)
}

fn velocity(cfg: &ExperimentConfig, pt: &Point, xi: &NormalSpeed) -> Result<VectorField> {
    extend_normal_speed(&pt.curve, &pt.domain, xi, ExtensionOptions { width: Some(extension_width(cfg, pt)) })
}

fn variation_point(cfg: &ExperimentConfig, pt: &Point) -> Result<Vec<Row>> {
    let eps = pt.params.eps;
    let d = &pt.domain;
    let (u, s) = state(cfg, pt)?;
    let ws = Workspace::new(d)?;
    let (functional, prefix, gamma) = match cfg.experiment {
        ExperimentKind::VariationLimitAc => (Functional::AllenCahn { eps }, "thm32", 0.0),
        ExperimentKind::VariationLimitB => (Functional::NonlocalB, "thm51", 0.0),
        _ => (Functional::OhtaKawasaki(pt.params), "thm61", cfg.gamma),
    };
    let nl = if cfg.experiment == ExperimentKind::VariationLimitAc { None } else { Some(nonlocal_terms(&ws, &pt.curve)) };
    let w = extension_width(cfg, pt);
    let mut rows = solve_rows(eps, &s);
    for probe in cfg.probes() {
        let label = probe.label();
        let xi = probe.speed(&pt.curve);
        let eta = velocity(cfg, pt, &xi)?;
        let vf = variation_fields(d, &eta, None, &u)?;
        let zeta = match cfg.accel {
            AccelChoice::Z => &vf.z,
            AccelChoice::W => &vf.w,
        };
        let (d1, d2) = inner_direct(&ws, &functional, &u, &eta, zeta)?;
        let ext = |p: [f64; 2]| extension_at(&pt.curve, &xi, w, d, p);
        let accel = match cfg.accel {
            AccelChoice::Z => Accel::Z,
            AccelChoice::W => Accel::W,
        };
        let jet = CurveJet::from_fn(&pt.curve, &ext, accel);
        let pred = limit_prediction(d, &pt.curve, &jet, gamma, nl.as_ref())?;
        rows.push(Row::new(eps, "first", &label, d1, pred.get(&format!("{prefix}.first"))));
        rows.push(Row::new(eps, "second", &label, d2, pred.get(&format!("{prefix}.second"))));
        if cfg.experiment == ExperimentKind::VariationLimitOk && cfg.accel == AccelChoice::W {
            let sharp = ok_sharp_second_variation(&pt.curve, &xi, cfg.gamma, nl.as_ref())?;
            rows.push(Row::new(eps, "sharp_second", &label, 0.75 * d2, sharp));
        }
    }
    Ok(rows)
}

fn jacobi_boundary(b: Boundary) -> JacobiBoundary {
    match b {
        Boundary::Neumann => JacobiBoundary::Robin,
        Boundary::Dirichlet => JacobiBoundary::Dirichlet,
    }
}

fn eigen_point(cfg: &ExperimentConfig, pt: &Point) -> Result<Vec<Row>> {
    let eps = pt.params.eps;
    let d = &pt.domain;
    let gamma = if cfg.experiment == ExperimentKind::EigenBoundOk { cfg.gamma } else { 0.0 };
    let p = ModelParams::new(eps, gamma, cfg.m)?;
    let (u, s) = critical_state(d, &pt.curve, &p, cfg.symmetry, cfg.newton_tol)?;
    let op = assemble_linearized(d, &u, &p, cfg.boundary)?;
    let opts = LanczosOptions { seed: cfg.seed, ..Default::default() };
    let spec = eigenpairs(&op, cfg.modes, opts)?;
    let nl = if gamma != 0.0 { Some(nonlocal_terms(&Workspace::new(d)?, &pt.curve)) } else { None };
    let jac = jacobi_operator(&pt.curve, gamma, nl.as_ref(), jacobi_boundary(cfg.boundary))?;
    let sharp = eigenpairs(&jac, cfg.modes, opts)?;
    let mut rows = solve_rows(eps, &Some(s));
    for k in 0..cfg.modes {
        let label = format!("k{}", k + 1);
        let lk = sharp.eigenvalues[k];
        rows.push(Row::scaled(eps, "lambda_over_eps", &label, spec.eigenvalues[k] / eps, lk, 1.0 + lk.abs()));
        rows.push(Row::new(eps, "eigen_residual", &label, spec.residuals[k], 0.0));
    }
    Ok(rows)
}

fn stability_point(cfg: &ExperimentConfig, pt: &Point) -> Result<Vec<Row>> {
    let eps = pt.params.eps;
    let d = &pt.domain;
    let gamma = if cfg.experiment == ExperimentKind::StabilityOk { cfg.gamma } else { 0.0 };
    let p = ModelParams::new(eps, gamma, cfg.m)?;
    let (u, s) = critical_state(d, &pt.curve, &p, cfg.symmetry, cfg.newton_tol)?;
    let mut op = assemble_linearized(d, &u, &p, cfg.boundary)?;
    op.mass_constrained = gamma != 0.0 || cfg.m.is_some();
    let spec = eigenpairs(&op, 1, LanczosOptions { seed: cfg.seed, ..Default::default() })?;
    let l1 = spec.eigenvalues[0] / eps;
    let cert = cfg.tol("certificate", 1e-6, 1.0);
    if l1 < -cert {
        return Err(Error::Config(format!(
            "the critical family is not certified stable: lambda_1/eps = {l1:.6} at eps = {eps}; stability needs a stable family"
        )));
    }
    let nl = if gamma != 0.0 { Some(nonlocal_terms(&Workspace::new(d)?, &pt.curve)) } else { None };
    let mut rows = solve_rows(eps, &Some(s));
    rows.push(Row::new(eps, "lambda1_over_eps", "", l1, 0.0));
    for probe in cfg.probes() {
        let xi = probe.speed(&pt.curve);
        let q = ok_sharp_second_variation(&pt.curve, &xi, gamma, nl.as_ref())?;
        rows.push(Row::new(eps, "sharp_second", &probe.label(), q, 0.0));
    }
    Ok(rows)
}

fn criticality_point(cfg: &ExperimentConfig, pt: &Point) -> Result<Vec<Row>> {
    let eps = pt.params.eps;
    let d = &pt.domain;
    let (u, s) = critical_state(d, &pt.curve, &pt.params, cfg.symmetry, cfg.newton_tol)?;
    let ws = Workspace::new(d)?;
    let nl = if cfg.gamma != 0.0 { Some(nonlocal_terms(&ws, &pt.curve)) } else { None };
    let audit = criticality_audit(&pt.curve, cfg.gamma, nl.as_ref())?;
    let mut rows = solve_rows(eps, &Some(s.clone()));
    rows.push(Row::new(eps, "h_residual", "", audit.h_residual, 0.0));
    rows.push(Row::new(eps, "orthogonality_defect", "", audit.orthogonality_defect, 0.0));
    let lambda = s.lagrange_multiplier.unwrap_or(0.0);
    if cfg.m.is_some() {
        rows.push(Row::scaled(eps, "multiplier", "", 1.5 * lambda, audit.lambda_estimate, 1.0 + audit.lambda_estimate.abs()));
    }
    let f = Functional::OhtaKawasaki(pt.params);
    for probe in cfg.probes() {
        let label = probe.label();
        let eta = velocity(cfg, pt, &probe.speed(&pt.curve))?;
        let phi_: Vec<f64> = normal_derivative_field(&ws, &u, &eta).iter().map(|v| -v).collect();
        let first = f.first(&ws, &u.values, &phi_) - lambda * d.integrate(&phi_);
        let l1: f64 = d.integrate(&phi_.iter().map(|v| v.abs()).collect::<Vec<_>>());
        rows.push(Row::new(eps, "first_variation", &label, first, 0.0));
        rows.push(Row::new(eps, "first_variation_bound", &label, 10.0 * s.residual_norm * l1, 0.0));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Verdicts

fn series<'a>(rows: &'a [Row], quantity: &str, probe: &str) -> Vec<&'a Row> {
    rows.iter().filter(|r| r.quantity == quantity && r.probe == probe && r.error.is_none()).collect()
}

fn probes_of(rows: &[Row], quantity: &str) -> BTreeSet<String> {
    rows.iter().filter(|r| r.quantity == quantity).map(|r| r.probe.clone()).collect()
}

fn finest_eps(rows: &[Row]) -> f64 {
    rows.iter().filter(|r| r.error.is_none()).map(|r| r.eps).fold(f64::INFINITY, f64::min)
}

fn at_finest<'a>(rows: &'a [Row], quantity: &str) -> Vec<&'a Row> {
    let e = finest_eps(rows);
    rows.iter().filter(|r| r.quantity == quantity && r.eps == e && r.error.is_none()).collect()
}

pub fn convergence_orders(rows: &[Row]) -> Vec<Order> {
    let mut keys: BTreeSet<(String, String)> = BTreeSet::new();
    for r in rows.iter().filter(|r| r.error.is_none()) {
        keys.insert((r.quantity.clone(), r.probe.clone()));
    }
    let mut out = Vec::new();
    for (q, p) in keys {
        let s = series(rows, &q, &p);
        for w in s.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.abs_gap > 0.0 && b.abs_gap > 0.0 && a.eps != b.eps {
                out.push(Order {
                    quantity: q.clone(),
                    probe: p.clone(),
                    eps_coarse: a.eps,
                    eps_fine: b.eps,
                    order: (a.abs_gap / b.abs_gap).ln() / (a.eps / b.eps).ln(),
                });
            }
        }
    }
    out
}

/// Worst `rel_gap` of a quantity at the finest sweep point.
fn worst_rel(rows: &[Row], quantity: &str) -> (f64, String) {
    at_finest(rows, quantity)
        .iter()
        .map(|r| (r.rel_gap, r.probe.clone()))
        .fold((f64::NEG_INFINITY, String::new()), |a, b| if b.0 > a.0 || b.0.is_nan() { b } else { a })
}

/// Largest ratio `gap_fine / gap_coarse` over successive points and probes
/// (below 1 means every gap decreased).
fn worst_gap_ratio(rows: &[Row], quantity: &str) -> f64 {
    let mut worst = 0.0_f64;
    for p in probes_of(rows, quantity) {
        for w in series(rows, quantity, &p).windows(2) {
            worst = worst.max(w[1].abs_gap / w[0].abs_gap.max(f64::MIN_POSITIVE));
        }
    }
    worst
}

/// Verdicts of a sweep, from its rows alone.
pub fn verdicts(cfg: &ExperimentConfig, rows: &[Row], scale: f64) -> Vec<Verdict> {
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let mut v = vec![Verdict::at_most("complete", failed as f64, 0.0, "sweep points that failed")];
    let tol = |name: &str, default: f64| cfg.tol(name, default, scale);
    let multi = cfg.eps.len() > 1;
    match cfg.experiment {
        ExperimentKind::Equipartition => {
            if multi {
                let s = series(rows, "discrepancy_l1", "");
                let ratio = s.windows(2).map(|w| w[1].measured / w[0].measured).fold(0.0, f64::max);
                v.push(Verdict::at_most("discrepancy_decreasing", ratio, 1.0 - f64::EPSILON, "largest successive ratio"));
            }
            let (g, _) = worst_rel(rows, "phi_total_variation");
            v.push(Verdict::at_most("phi_total_variation", g, tol("phi_total_variation", 0.03), "relative gap at the finest eps"));
            let (g, _) = worst_rel(rows, "energy");
            v.push(Verdict::at_most("energy", g, tol("energy", 0.05), "relative gap at the finest eps"));
        }
        ExperimentKind::Reshetnyak => {
            for r in at_finest(rows, "distance") {
                v.push(Verdict::at_most(&format!("distance:{}", r.probe), r.rel_gap, tol("distance", 0.05), "relative matrix distance"));
            }
            if let Some(min) = cfg.tolerances.get("min_order") {
                let o = convergence_orders(rows)
                    .into_iter()
                    .filter(|o| o.quantity == "distance")
                    .map(|o| o.order)
                    .fold(f64::INFINITY, f64::min);
                v.push(Verdict::at_least("order", o, *min, "smallest observed order of the matrix distance"));
            }
        }
        ExperimentKind::VariationLimitAc | ExperimentKind::VariationLimitB | ExperimentKind::VariationLimitOk => {
            let default = if cfg.experiment == ExperimentKind::VariationLimitAc { 0.05 } else { 0.10 };
            let (g, p) = worst_rel(rows, "second");
            v.push(Verdict::at_most("second", g, tol("second", default), format!("worst relative gap at the finest eps ({p})")));
            let monotone = cfg.experiment == ExperimentKind::VariationLimitAc || cfg.tolerances.contains_key("second_decreasing");
            if multi && monotone {
                v.push(Verdict::at_most("second_decreasing", worst_gap_ratio(rows, "second"), tol("second_decreasing", 1.0), "largest successive gap ratio"));
            }
            if !at_finest(rows, "sharp_second").is_empty() {
                let (g, p) = worst_rel(rows, "sharp_second");
                v.push(Verdict::at_most("sharp_second", g, tol("sharp_second", 0.10), format!("worst relative gap ({p})")));
                let min = rows.iter().filter(|r| r.quantity == "sharp_second").map(|r| r.predicted).fold(f64::INFINITY, f64::min);
                v.push(Verdict::at_least("sharp_nonnegative", min, -tol("sharp_nonnegative", 1e-6), "smallest sharp value"));
            }
        }
        ExperimentKind::EigenBoundAc | ExperimentKind::EigenBoundOk => {
            let default = if cfg.experiment == ExperimentKind::EigenBoundAc { 0.05 } else { 0.10 };
            let t = tol("margin", default);
            for r in at_finest(rows, "lambda_over_eps") {
                let margin = r.predicted - r.measured;
                v.push(Verdict::at_least(&format!("margin:{}", r.probe), margin, -t * (1.0 + r.predicted.abs()), "lambda_k - lambda_eps,k/eps"));
            }
            if multi {
                let mut worst = 0.0_f64;
                for p in probes_of(rows, "lambda_over_eps") {
                    let s = series(rows, "lambda_over_eps", &p);
                    for w in s.windows(2) {
                        let excess = |r: &Row| (r.measured - r.predicted).max(0.0);
                        worst = worst.max(excess(w[1]) - excess(w[0]));
                    }
                }
                v.push(Verdict::at_most("margin_trend", worst, 1e-9, "largest increase of max(0, -margin)"));
            }
            for (name, t) in cfg.tolerances.range("near_equality.".to_string()..) {
                let Some(k) = name.strip_prefix("near_equality.") else { break };
                if let Some(r) = at_finest(rows, "lambda_over_eps").into_iter().find(|r| r.probe == k) {
                    v.push(Verdict::at_most(name, r.abs_gap, t * scale, "|lambda_eps,k/eps - lambda_k|"));
                }
            }
        }
        ExperimentKind::StabilityAc | ExperimentKind::StabilityOk => {
            let min = rows.iter().filter(|r| r.quantity == "sharp_second").map(|r| r.measured).fold(f64::INFINITY, f64::min);
            v.push(Verdict::at_least("sharp_nonnegative", min, -tol("sharp_nonnegative", 1e-6), "smallest sharp second variation"));
        }
        ExperimentKind::Criticality => {
            let h = rows.iter().filter(|r| r.quantity == "h_residual").map(|r| r.measured).fold(0.0, f64::max);
            v.push(Verdict::at_most("h_residual", h, tol("h_residual", 1e-6), "max |kappa + 4 gamma v0 - lambda|"));
            let o = rows.iter().filter(|r| r.quantity == "orthogonality_defect").map(|r| r.measured).fold(0.0, f64::max);
            v.push(Verdict::at_most("orthogonality", o, tol("orthogonality", 1e-6), "max |<n, nu>| at the ends"));
            let mut worst = 0.0_f64;
            for r in rows.iter().filter(|r| r.quantity == "first_variation") {
                if let Some(b) = rows.iter().find(|b| b.quantity == "first_variation_bound" && b.probe == r.probe && b.eps == r.eps) {
                    worst = worst.max(r.measured.abs() / b.measured.max(f64::MIN_POSITIVE));
                }
            }
            v.push(Verdict::at_most("first_variation", worst, 1.0, "|first variation| over its residual bound"));
            if let Some(r) = at_finest(rows, "multiplier").first() {
                v.push(Verdict::at_most("multiplier", r.rel_gap, tol("multiplier", 0.10), "(3/2) lambda_eps vs the sharp multiplier"));
            }
        }
    }
    v
}

// ---------------------------------------------------------------------------
// Variation audits on random probes

/// Smooth random `(u, eta, zeta)` with tangent `eta`. Rectangles use low
/// cosine/sine modes; disks use polynomials with `eta` vanishing radially
/// on the boundary.
pub fn random_probe(domain: &Domain, rng: &mut ChaCha8Rng) -> (ScalarField, VectorField, VectorField) {
    let mut r = |s: f64| s * (rng.gen::<f64>() - 0.5);
    match domain.spec {
        DomainSpec::Rectangle { lengths: [lx, ly], .. } => {
            let a: Vec<f64> = (0..9).map(|_| r(1.0)).collect();
            let b: Vec<f64> = (0..12).map(|_| r(0.2)).collect();
            let c: Vec<f64> = (0..8).map(|_| r(0.2)).collect();
            let (kx, ky) = (PI / lx, PI / ly);
            let u = domain.scalar_fn(|x, y| {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += a[3 * i + j] * (i as f64 * kx * x).cos() * (j as f64 * ky * y).cos();
                    }
                }
                s
            });
            let mut eta = domain.vector_fn(|x, y| {
                let (mut ex, mut ey) = (0.0, 0.0);
                for i in 1..3 {
                    for j in 0..3 {
                        ex += b[3 * (i - 1) + j] * (i as f64 * kx * x).sin() * (j as f64 * ky * y).cos();
                        ey += b[6 + 3 * (i - 1) + j] * (i as f64 * ky * y).sin() * (j as f64 * kx * x).cos();
                    }
                }
                [ex, ey]
            });
            eta.tangent = true;
            let (sx, sy) = (x_over(lx), x_over(ly));
            let zeta = domain.vector_fn(|x, y| {
                [
                    c[0] + c[1] * sx(x) + c[2] * (ky * y).cos() + c[3] * sx(x) * sy(y),
                    c[4] + c[5] * sy(y) + c[6] * (kx * x).cos() + c[7] * sx(x) * sy(y),
                ]
            });
            (u, eta, zeta)
        }
        DomainSpec::Disk { radius, .. } => {
            let a: Vec<f64> = (0..6).map(|_| r(1.0)).collect();
            let b: Vec<f64> = (0..7).map(|_| r(0.2)).collect();
            let c: Vec<f64> = (0..6).map(|_| r(0.2)).collect();
            let u = domain.scalar_fn(|x, y| {
                let (x, y) = (x / radius, y / radius);
                a[0] + a[1] * x + a[2] * y + a[3] * x * y + a[4] * x * x + a[5] * y * y
            });
            let mut eta = domain.vector_fn(|x, y| {
                let (x, y) = (x / radius, y / radius);
                let bump = 1.0 - x * x - y * y;
                [
                    radius * (bump * (b[0] + b[1] * x + b[2] * y) - b[6] * y),
                    radius * (bump * (b[3] + b[4] * x + b[5] * y) + b[6] * x),
                ]
            });
            eta.tangent = true;
            let zeta = domain.vector_fn(|x, y| {
                let (x, y) = (x / radius, y / radius);
                [radius * (c[0] + c[1] * x + c[2] * y), radius * (c[3] + c[4] * x + c[5] * y)]
            });
            (u, eta, zeta)
        }
    }
}

fn x_over(l: f64) -> impl Fn(f64) -> f64 {
    move |x| x / l
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    #[serde(default = "default_check_domain")]
    pub domain: DomainSpec,
    #[serde(default = "default_check_probes")]
    pub probes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Allen–Cahn `eps` and Ohta–Kawasaki parameters of the audited functionals.
    #[serde(default = "default_check_eps")]
    pub eps: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "default_check_t0")]
    pub t0: f64,
    #[serde(default = "default_identity_tol")]
    pub identity_tol: f64,
    #[serde(default = "default_oracle_rel")]
    pub oracle_rel: f64,
    #[serde(default = "default_oracle_abs")]
    pub oracle_abs: f64,
}

fn default_check_domain() -> DomainSpec {
    DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [64, 64] }
}
fn default_check_probes() -> usize {
    20
}
fn default_check_eps() -> f64 {
    0.3
}
fn default_check_t0() -> f64 {
    1e-2
}
fn default_identity_tol() -> f64 {
    1e-10
}
fn default_oracle_rel() -> f64 {
    1e-3
}
fn default_oracle_abs() -> f64 {
    1e-8
}

impl Default for CheckConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl CheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.probes == 0 {
            return Err(invalid("probes", "must be positive"));
        }
        for (name, v) in [("eps", self.eps), ("t0", self.t0), ("identity_tol", self.identity_tol), ("oracle_rel", self.oracle_rel), ("oracle_abs", self.oracle_abs)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.gamma >= 0.0) {
            return Err(invalid("gamma", "must be nonnegative"));
        }
        build_domain(&self.domain)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    pub probe: usize,
    pub functional: String,
    pub report: crate::variations::VariationReport,
}

/// Identity and oracle audits of the Allen–Cahn, nonlocal and
/// Ohta–Kawasaki functionals on `cfg.probes` random probes.
pub fn check_variations(cfg: &CheckConfig, tol_scale: f64) -> Result<Vec<ProbeReport>> {
    cfg.validate()?;
    let d = build_domain(&cfg.domain)?;
    let ws = Workspace::new(&d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probes: Vec<_> = (0..cfg.probes).map(|_| random_probe(&d, &mut rng)).collect();
    let functionals = [
        ("allen_cahn", Functional::AllenCahn { eps: cfg.eps }),
        ("nonlocal_b", Functional::NonlocalB),
        ("ohta_kawasaki", Functional::OhtaKawasaki(ModelParams::new(cfg.eps, cfg.gamma, None)?)),
    ];
    let opts = crate::variations::AuditOptions {
        identity_tol: cfg.identity_tol * tol_scale,
        zeta_alt: None,
        oracle_t0: Some(cfg.t0),
        oracle_rel: cfg.oracle_rel * tol_scale,
        oracle_abs: cfg.oracle_abs * tol_scale,
    };
    let jobs: Vec<(usize, usize)> = (0..probes.len()).flat_map(|p| (0..functionals.len()).map(move |f| (p, f))).collect();
    jobs.par_iter()
        .map(|&(p, f)| {
            let (u, eta, zeta) = &probes[p];
            let report = crate::variations::identity_audit(&ws, &functionals[f].1, u, eta, zeta, &opts)?;
            Ok(ProbeReport { probe: p, functional: functionals[f].0.to_string(), report })
        })
        .collect()
}

pub const CHECK_HEADER: &str = "probe,functional,residual,value,tolerance,pass";

pub fn check_csv(reports: &[ProbeReport]) -> String {
    let mut s = format!("{CHECK_HEADER}\n");
    for r in reports {
        for (name, res) in &r.report.residuals {
            s.push_str(&format!("{},{},{},{},{},{}\n", r.probe, r.functional, name, num(res.value), num(res.tol), res.pass));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lamella_cfg(kind: ExperimentKind) -> ExperimentConfig {
        ExperimentConfig::new(
            kind,
            DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [41, 41] },
            InterfaceSpec::Segment { x: Some(0.5), from: None, to: None, ds: None },
            vec![0.1, 0.08],
        )
    }

    #[test]
    fn validation_names_the_field() {
        let mut c = lamella_cfg(ExperimentKind::Equipartition);
        c.eps = vec![0.1, -0.05];
        assert!(matches!(c.validate(), Err(Error::InvalidSpec { field, .. }) if field == "eps"));
        c.eps = vec![0.05, 0.1];
        assert!(c.validate().is_err());
        c.eps = vec![0.1];
        c.tolerances.insert("energy".into(), -1.0);
        assert!(matches!(c.validate(), Err(Error::InvalidSpec { field, .. }) if field == "tolerances.energy"));
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = r#"{"experiment":"equipartition","domain":{"shape":"rectangle","L":[1,1],"n":[32,32]},"interface":{"kind":"segment","x":0.5},"eps":[0.1]}"#;
        let b = r#"{"eps":[0.1],"interface":{"x":0.5,"kind":"segment"},"domain":{"n":[32,32],"L":[1,1],"shape":"rectangle"},"experiment":"equipartition"}"#;
        let (a, b) = (ExperimentConfig::from_json(a).unwrap(), ExperimentConfig::from_json(b).unwrap());
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn grid_refinement_policy() {
        let mut c = lamella_cfg(ExperimentKind::Equipartition);
        c.eps_over_h = Some(4.0);
        assert_eq!(c.grid_for(0.01), DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [401, 401] });
        assert_eq!(c.grid_for(0.5), c.domain);
    }

    #[test]
    fn lifted_lamella_is_critical() {
        let d = build_domain(&DomainSpec::Rectangle { lengths: [1.0, 1.0], n: [41, 41] }).unwrap();
        let c = build_interface(&d, &InterfaceSpec::Segment { x: Some(0.5), from: None, to: None, ds: None }).unwrap();
        let p = ModelParams::new(0.1, 1.0, Some(0.0)).unwrap();
        let (u, s) = critical_state(&d, &c, &p, Symmetry::None, 1e-10).unwrap();
        assert!(s.residual_norm < 1e-9, "{}", s.residual_norm);
        assert!(d.mean(&u.values).abs() < 1e-12);
        let full = solve_critical(&d, Some(&c), &p, None, &SolveOptions { tol: 1e-10, ..Default::default() }).unwrap();
        let diff = u.values.iter().zip(&full.u.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
    }

    #[test]
    fn failed_points_become_error_rows() {
        let mut c = lamella_cfg(ExperimentKind::EigenBoundAc);
        c.newton_tol = 1e-30;
        let r = run(&c, &RunOptions::default()).unwrap();
        assert!(r.rows.iter().all(|r| r.error.is_some()));
        assert!(!r.verdict("complete").unwrap().pass);
    }

    #[test]
    fn csv_is_deterministic() {
        let c = lamella_cfg(ExperimentKind::Equipartition);
        let a = run(&c, &RunOptions::default()).unwrap();
        let b = run(&c, &RunOptions { jobs: Some(1), tol_scale: 1.0 }).unwrap();
        assert_eq!(a.rows_csv(), b.rows_csv());
        assert!(a.rows_csv().starts_with(ROWS_HEADER));
    }
}
