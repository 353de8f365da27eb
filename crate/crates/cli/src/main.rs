use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sharplab::critical::{SolveSummary, Symmetry};
use sharplab::domain::{build_domain, build_interface, DomainSpec, InterfaceSpec};
use sharplab::energies::{allen_cahn_energy, ohta_kawasaki_energy, ModelParams, Workspace};
use sharplab::experiments::{
    check_csv, check_variations, convergence_orders, critical_state, run, verdicts, version_string, CheckConfig,
    ExperimentConfig, Probe, RunOptions, SweepReport,
};
use sharplab::green::{green_surface_matrix, GreenKernel};
use sharplab::io::{canonical_hash, num, write_scalar};
use sharplab::linalg::LanczosOptions;
use sharplab::sharp::sharp_potential;
use sharplab::spectra::{assemble_linearized, eigenpairs, Boundary};
use sharplab::Error;

const EXIT_VERDICT: u8 = 2;
const EXIT_EXEC: u8 = 1;
const EXIT_USAGE: u8 = 64;

#[derive(Parser, Debug)]
#[command(name = "sharplab", version = version_str(), about = "Diffuse-interface variations and their sharp-interface limits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Multiplies every verdict tolerance.
    #[arg(long, global = true, default_value_t = 1.0)]
    tol_scale: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Audit first/second variation identities on random probes.
    CheckVariations {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        probes: Option<usize>,
    },
    /// Newton critical point; writes the field and a summary.
    Solve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Lowest eigenpairs of the linearized operator at a critical point.
    Spectrum {
        #[arg(long)]
        config: PathBuf,
    },
    /// Epsilon sweep with verdicts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Green surface forms of interface probes and the sharp potential.
    Green {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute orders and verdicts from a saved sweep report.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CheckVariations { .. } => "check-variations",
            Command::Solve { .. } => "solve",
            Command::Spectrum { .. } => "spectrum",
            Command::Sweep { .. } => "sweep",
            Command::Green { .. } => "green",
            Command::Report { .. } => "report",
        }
    }

    fn config(&self) -> Option<&Path> {
        match self {
            Command::CheckVariations { config, .. } => config.as_deref(),
            Command::Solve { config }
            | Command::Spectrum { config }
            | Command::Sweep { config }
            | Command::Green { config }
            | Command::Report { config } => Some(config),
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Exec(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidSpec { .. } | Error::Json(_) => Failure::Usage(e.to_string()),
            _ => Failure::Exec(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Exec(format!("{}: {e}", path.display()))
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    config_hash: Option<String>,
    config_path: Option<PathBuf>,
    out_dir: PathBuf,
    outputs: Vec<String>,
    version: String,
    status: String,
    seconds: Option<f64>,
}

impl RunManifest {
    fn write(&self) -> Result<(), Failure> {
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))
    }
}

struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    fn put(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json(&mut self, name: &str, v: &impl Serialize) -> Result<(), Failure> {
        let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Exec(e.to_string()))?;
        self.put(name, text + "\n")
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }
}

/// Parses a config, naming the offending field on failure.
fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::Usage(format!("invalid config: {e}")))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolveConfig {
    domain: DomainSpec,
    interface: InterfaceSpec,
    eps: f64,
    #[serde(default)]
    gamma: f64,
    #[serde(default)]
    m: Option<f64>,
    #[serde(default)]
    symmetry: Symmetry,
    #[serde(default = "default_newton_tol")]
    newton_tol: f64,
}

fn default_newton_tol() -> f64 {
    1e-9
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectrumConfig {
    domain: DomainSpec,
    interface: InterfaceSpec,
    eps: f64,
    #[serde(default)]
    gamma: f64,
    #[serde(default)]
    m: Option<f64>,
    #[serde(default)]
    symmetry: Symmetry,
    #[serde(default = "default_newton_tol")]
    newton_tol: f64,
    #[serde(default)]
    boundary: Boundary,
    #[serde(default = "default_k")]
    k: usize,
    /// Restrict to mass-preserving perturbations (default: when `gamma > 0`
    /// or `m` is set).
    #[serde(default)]
    mass_constrained: Option<bool>,
    #[serde(default)]
    eigenfunctions: bool,
    #[serde(default)]
    seed: u64,
}

fn default_k() -> usize {
    4
}

impl SpectrumConfig {
    fn state(&self) -> SolveConfig {
        SolveConfig {
            domain: self.domain.clone(),
            interface: self.interface.clone(),
            eps: self.eps,
            gamma: self.gamma,
            m: self.m,
            symmetry: self.symmetry,
            newton_tol: self.newton_tol,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GreenConfig {
    domain: DomainSpec,
    interface: InterfaceSpec,
    #[serde(default)]
    probes: Vec<Probe>,
}

fn version_str() -> &'static str {
    let v = version_string();
    Box::leak(v.strip_prefix("sharplab ").unwrap_or(&v).to_string().into_boxed_str())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_VERDICT),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Exec(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_EXEC)
        }
    }
}

fn execute(cli: &Cli) -> Result<bool, Failure> {
    if !(cli.tol_scale > 0.0 && cli.tol_scale.is_finite()) {
        return Err(Failure::Usage(format!("--tol-scale: must be positive, got {}", cli.tol_scale)));
    }
    if cli.jobs == Some(0) {
        return Err(Failure::Usage("--jobs: must be positive".into()));
    }
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().map_err(|e| Failure::Exec(e.to_string()))?;
    }
    let text = match cli.command.config() {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Failure::Usage(format!("--config {}: {e}", p.display())))?),
        None => None,
    };
    let hash = match &text {
        Some(t) => Some(canonical_hash(&parse::<Value>(t)?)),
        None => None,
    };
    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    let mut manifest = RunManifest {
        subcommand: cli.command.name().to_string(),
        config_hash: hash,
        config_path: cli.command.config().map(Path::to_path_buf),
        out_dir: cli.out.clone(),
        outputs: Vec::new(),
        version: version_string(),
        status: "running".into(),
        seconds: None,
    };
    manifest.write()?;
    let start = Instant::now();
    let mut out = Outputs { dir: cli.out.clone(), written: Vec::new() };
    let text = text.as_deref().unwrap_or("{}");
    let result = match &cli.command {
        Command::CheckVariations { probes, .. } => cmd_check(cli, text, *probes, &mut out),
        Command::Solve { .. } => cmd_solve(text, &mut out),
        Command::Spectrum { .. } => cmd_spectrum(cli, text, &mut out),
        Command::Sweep { .. } => cmd_sweep(cli, text, &mut out),
        Command::Green { .. } => cmd_green(text, &mut out),
        Command::Report { .. } => cmd_report(cli, text, &mut out),
    };
    manifest.outputs = out.written;
    manifest.seconds = Some(start.elapsed().as_secs_f64());
    manifest.status = match &result {
        Ok(true) => "pass".into(),
        Ok(false) => "fail".into(),
        Err(Failure::Usage(m)) | Err(Failure::Exec(m)) => format!("error: {m}"),
    };
    manifest.write()?;
    result
}

fn cmd_check(cli: &Cli, text: &str, probes: Option<usize>, out: &mut Outputs) -> Result<bool, Failure> {
    let mut cfg: CheckConfig = parse(text)?;
    if let Some(p) = probes {
        cfg.probes = p;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let reports = check_variations(&cfg, cli.tol_scale)?;
    out.put("check.csv", check_csv(&reports))?;
    out.json("check.json", &json!({ "config": cfg, "version": version_string(), "reports": reports }))?;
    Ok(reports.iter().all(|r| r.report.pass()))
}

struct State {
    domain: sharplab::domain::Domain,
    params: ModelParams,
    u: sharplab::fields::ScalarField,
    summary: SolveSummary,
}

fn solve_state(cfg: &SolveConfig) -> Result<State, Failure> {
    let params = ModelParams::new(cfg.eps, cfg.gamma, cfg.m)?;
    if !(cfg.newton_tol > 0.0) {
        return Err(Failure::Usage("newton_tol: must be positive".into()));
    }
    let domain = build_domain(&cfg.domain)?;
    let curve = build_interface(&domain, &cfg.interface)?;
    let (u, summary) = critical_state(&domain, &curve, &params, cfg.symmetry, cfg.newton_tol)?;
    Ok(State { domain, params, u, summary })
}

fn cmd_solve(text: &str, out: &mut Outputs) -> Result<bool, Failure> {
    let cfg: SolveConfig = parse(text)?;
    let st = solve_state(&cfg)?;
    let energy = if st.params.gamma != 0.0 {
        ohta_kawasaki_energy(&Workspace::new(&st.domain)?, &st.u, &st.params)?.total
    } else {
        allen_cahn_energy(&st.domain, &st.u, &st.params)?
    };
    write_scalar(&out.path("u.bin"), &st.domain, &st.u)?;
    out.json("solve.json", &json!({ "config": cfg, "version": version_string(), "result": st.summary, "energy": energy }))?;
    Ok(true)
}

fn cmd_spectrum(cli: &Cli, text: &str, out: &mut Outputs) -> Result<bool, Failure> {
    let mut cfg: SpectrumConfig = parse(text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let st = solve_state(&cfg.state())?;
    let mut op = assemble_linearized(&st.domain, &st.u, &st.params, cfg.boundary)?;
    op.mass_constrained = cfg.mass_constrained.unwrap_or(st.params.gamma != 0.0 || st.params.m.is_some());
    let spec = eigenpairs(&op, cfg.k, LanczosOptions { seed: cfg.seed, ..Default::default() })?;
    let mut csv = String::from("k,eigenvalue,residual\n");
    for (i, (l, r)) in spec.eigenvalues.iter().zip(&spec.residuals).enumerate() {
        csv.push_str(&format!("{},{},{}\n", i + 1, num(*l), num(*r)));
    }
    out.put("spectrum.csv", csv)?;
    if cfg.eigenfunctions {
        for (i, phi) in spec.eigenfunctions.iter().enumerate() {
            let f = st.domain.scalar(op.embed(phi));
            write_scalar(&out.path(&format!("phi_{}.bin", i + 1)), &st.domain, &f)?;
        }
    }
    out.json("spectrum.json", &json!({ "config": cfg, "version": version_string(), "solve": st.summary, "spectrum": spec }))?;
    Ok(true)
}

fn write_sweep(report: &SweepReport, out: &mut Outputs) -> Result<bool, Failure> {
    out.put("rows.csv", report.rows_csv())?;
    out.put("verdicts.csv", report.verdicts_csv())?;
    out.put("orders.csv", report.orders_csv())?;
    out.json("report.json", report)?;
    for v in report.verdicts.iter().filter(|v| !v.pass) {
        eprintln!("FAIL {}: {} > {} ({})", v.name, v.value, v.threshold, v.detail);
    }
    Ok(report.pass())
}

fn cmd_sweep(cli: &Cli, text: &str, out: &mut Outputs) -> Result<bool, Failure> {
    let mut cfg = ExperimentConfig::from_json(text)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let report = run(&cfg, &RunOptions { jobs: cli.jobs, tol_scale: cli.tol_scale })?;
    write_sweep(&report, out)
}

fn cmd_report(cli: &Cli, text: &str, out: &mut Outputs) -> Result<bool, Failure> {
    let mut report: SweepReport = parse(text)?;
    report.config.validate()?;
    report.orders = convergence_orders(&report.rows);
    report.verdicts = verdicts(&report.config, &report.rows, cli.tol_scale);
    write_sweep(&report, out)
}

/// Green surface matrix, cached under `SHARPLAB_CACHE` by the hash of the
/// domain and interface.
fn green_matrix(cfg: &GreenConfig, kernel: &GreenKernel, curve: &sharplab::domain::InterfaceCurve) -> Result<Vec<f64>, Failure> {
    let n = curve.len();
    let key = canonical_hash(&json!({ "domain": cfg.domain, "interface": cfg.interface }));
    let cache = std::env::var_os("SHARPLAB_CACHE").map(|d| PathBuf::from(d).join(format!("green-{key}.bin")));
    if let Some(p) = &cache {
        if let Ok(bytes) = fs::read(p) {
            if bytes.len() == 8 * n * n {
                return Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect());
            }
        }
    }
    let s = green_surface_matrix(kernel, curve);
    let values: Vec<f64> = (0..n * n).map(|k| s[(k / n, k % n)]).collect();
    if let Some(p) = &cache {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::write(p, bytes).map_err(|e| io_err(p, e))?;
    }
    Ok(values)
}

fn cmd_green(text: &str, out: &mut Outputs) -> Result<bool, Failure> {
    let cfg: GreenConfig = parse(text)?;
    let domain = build_domain(&cfg.domain)?;
    let curve = build_interface(&domain, &cfg.interface)?;
    let kernel = GreenKernel::new(&domain);
    let s = green_matrix(&cfg, &kernel, &curve)?;
    let n = curve.len();
    let probes = if cfg.probes.is_empty() { (1..=4).map(|k| Probe::Cos { k, amplitude: 1.0 }).collect() } else { cfg.probes.clone() };
    let mut csv = String::from("probe,surface_form\n");
    let mut forms = Vec::new();
    for p in &probes {
        let xi = p.speed(&curve).values;
        let q: f64 = (0..n).map(|i| xi[i] * (0..n).map(|j| s[i * n + j] * xi[j]).sum::<f64>()).sum();
        csv.push_str(&format!("{},{}\n", p.label(), num(q)));
        forms.push(json!({ "probe": p.label(), "surface_form": q }));
    }
    out.put("green.csv", csv)?;
    let ws = Workspace::new(&domain)?;
    let pot = sharp_potential(&ws, &curve);
    write_scalar(&out.path("v0.bin"), &domain, &domain.scalar(pot.v))?;
    out.json("green.json", &json!({ "config": cfg, "version": version_string(), "forms": forms, "v0_mean": pot.mean }))?;
    Ok(true)
}
