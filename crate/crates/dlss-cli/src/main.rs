//! Batch front end: trajectory runs, mesh-convergence studies, consistency
//! tables, and one-flag presets for the reference experiments. Every
//! invocation writes plain CSV plus a JSON manifest describing the fully
//! resolved configuration; identical flags produce byte-identical files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dlss::fisher::EnergyVariant;
use dlss::grid::{CellField, GridSpec};
use dlss::lab::{self, InitialCondition};
use dlss::stepper::{Scheme, SchemeConfig};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "dlss",
    version,
    about = "Structure-preserving solver for the quantum diffusion equation",
    args_conflicts_with_subcommands = true
)]
struct Cli {
    /// Reproduce a reference experiment with one flag.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Output directory when running a preset.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Advance one configuration in time, writing a trace and snapshots.
    Run(RunArgs),
    /// Refine the mesh and tabulate errors against the finest level.
    Convergence(ConvergenceArgs),
    /// Tabulate the one-step defect on a manufactured solution across
    /// simultaneous (h, dt) halvings.
    Consistency(ConsistencyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 1D cosine bump, m=1, N=100, production scheme.
    #[value(name = "fig2-m1")]
    Fig2M1,
    /// 1D cosine bump, m=8 (near-vacuum minimum), N=100.
    #[value(name = "fig2-m8")]
    Fig2M8,
    /// 2D product bump, m=8, N=64.
    #[value(name = "fig4-2d")]
    Fig42d,
    /// Five-level 1D mesh refinement, dt = 1.6e-8 h.
    #[value(name = "fig3-convergence")]
    Fig3Convergence,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Fig2M1 => "fig2-m1",
            Preset::Fig2M8 => "fig2-m8",
            Preset::Fig42d => "fig4-2d",
            Preset::Fig3Convergence => "fig3-convergence",
        }
    }
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Spatial dimension.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    dim: u8,
    /// Cells per axis (at least 3).
    #[arg(long)]
    n: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Exim)]
    scheme: SchemeArg,
    /// Time step.
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    t_end: f64,
    /// Initial condition, e.g. cosine:eps=0.001,m=8.
    #[arg(long, value_parser = parse_ic)]
    ic: CosineIc,
    /// Comma-separated snapshot times; defaults to the reference report
    /// times that fall inside [0, t_end].
    #[arg(long, value_delimiter = ',')]
    report: Option<Vec<f64>>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Edge kernel used for the discrete energy.
    #[arg(long, value_enum, default_value_t = EnergyArg::Forward)]
    energy: EnergyArg,
    /// Newton residual tolerance (infinity norm).
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Clone)]
struct ConvergenceArgs {
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    dim: u8,
    /// Comma-separated mesh sizes, strictly increasing; the last is the
    /// reference level.
    #[arg(long, value_delimiter = ',', required = true)]
    ns: Vec<usize>,
    /// Per-level time step as a multiple of h.
    #[arg(long)]
    dt_coeff: f64,
    #[arg(long)]
    t_end: f64,
    #[arg(long, value_parser = parse_ic)]
    ic: CosineIc,
    #[arg(long, value_enum, default_value_t = SchemeArg::Exim)]
    scheme: SchemeArg,
    #[arg(long, value_enum, default_value_t = EnergyArg::Forward)]
    energy: EnergyArg,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct ConsistencyArgs {
    /// Number of (h, dt) levels; each level halves both.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..=12))]
    levels: u32,
    /// Cells on the coarsest level.
    #[arg(long, default_value_t = 16)]
    n0: usize,
    /// Time step on the coarsest level.
    #[arg(long, default_value_t = 1e-5)]
    dt0: f64,
    /// Evaluation time for the manufactured solution.
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, value_enum, default_value_t = ProfileArg::DecayingCosine)]
    profile: ProfileArg,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SchemeArg {
    Explicit,
    Implicit,
    #[value(name = "linear-m")]
    LinearM,
    Exim,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Scheme {
        match s {
            SchemeArg::Explicit => Scheme::Explicit,
            SchemeArg::Implicit => Scheme::FullyImplicit,
            SchemeArg::LinearM => Scheme::LinearM,
            SchemeArg::Exim => Scheme::ExplicitImplicit,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EnergyArg {
    Forward,
    Backward,
    Symmetric,
    Central,
}

impl From<EnergyArg> for EnergyVariant {
    fn from(e: EnergyArg) -> EnergyVariant {
        match e {
            EnergyArg::Forward => EnergyVariant::Forward,
            EnergyArg::Backward => EnergyVariant::Backward,
            EnergyArg::Symmetric => EnergyVariant::Symmetric,
            EnergyArg::Central => EnergyVariant::Central,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    /// 2 + cos(2 pi x) e^{-t}.
    DecayingCosine,
    /// Constant 2; the defect must vanish identically.
    Constant,
}

#[derive(Clone)]
struct CosineIc {
    eps: f64,
    m: f64,
}

impl CosineIc {
    fn build(&self, dim: u8) -> InitialCondition {
        if dim == 2 {
            InitialCondition::CosineBump2d { eps: self.eps, m: self.m }
        } else {
            InitialCondition::CosineBump1d { eps: self.eps, m: self.m }
        }
    }
}

fn parse_ic(raw: &str) -> Result<CosineIc, String> {
    let body = raw
        .strip_prefix("cosine:")
        .ok_or_else(|| format!("unknown initial condition {raw:?}; expected cosine:eps=..,m=.."))?;
    let (mut eps, mut m) = (None, None);
    for part in body.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("malformed key=value pair {part:?}"))?;
        let value: f64 = value
            .parse()
            .map_err(|_| format!("{key} value {value:?} is not a number"))?;
        match key {
            "eps" => eps = Some(value),
            "m" => m = Some(value),
            other => return Err(format!("unknown initial-condition key {other:?}")),
        }
    }
    let eps = eps.ok_or("missing eps")?;
    let m = m.ok_or("missing m")?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(format!("eps must be positive and finite, got {eps}"));
    }
    if !(m >= 0.0 && m.is_finite()) {
        return Err(format!("m must be nonnegative and finite, got {m}"));
    }
    Ok(CosineIc { eps, m })
}

#[derive(Serialize)]
struct Manifest {
    tool: &'static str,
    version: &'static str,
    timestamp_unix: u64,
    command: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dim: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain_length: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scheme: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    energy: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    newton_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    t_end: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    initial_condition: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report_times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ns: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt_coefficient: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    levels: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    base_dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eval_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    profile: Option<&'static str>,
    outputs: Vec<String>,
}

impl Manifest {
    fn new(command: &'static str, preset: Option<&'static str>) -> Self {
        Manifest {
            tool: "dlss",
            version: env!("CARGO_PKG_VERSION"),
            // Honors SOURCE_DATE_EPOCH; defaults to 0 so identical flags
            // give identical bytes.
            timestamp_unix: std::env::var("SOURCE_DATE_EPOCH")
                .ok()
                .and_then(|raw| raw.parse().ok())
                .unwrap_or(0),
            command,
            preset,
            dim: None,
            n: None,
            domain_length: None,
            scheme: None,
            energy: None,
            newton_tol: None,
            dt: None,
            t_end: None,
            initial_condition: None,
            report_times: None,
            ns: None,
            dt_coefficient: None,
            levels: None,
            base_n: None,
            base_dt: None,
            eval_time: None,
            profile: None,
            outputs: Vec::new(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match (cli.preset, cli.command) {
        (Some(preset), None) => run_preset(preset, &cli.out),
        (None, Some(Command::Run(args))) => cmd_run(&args, None),
        (None, Some(Command::Convergence(args))) => cmd_convergence(&args, None),
        (None, Some(Command::Consistency(args))) => cmd_consistency(&args),
        _ => usage("pass a subcommand or --preset (see --help)"),
    }
}

fn usage(message: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

fn failure(err: &dyn std::error::Error) -> ExitCode {
    let mut line = err.to_string();
    let mut cursor = err.source();
    while let Some(cause) = cursor {
        line.push_str(": ");
        line.push_str(&cause.to_string());
        cursor = cause.source();
    }
    eprintln!("error: {line}");
    ExitCode::from(1)
}

fn run_preset(preset: Preset, out: &Path) -> ExitCode {
    let ic = |eps, m| CosineIc { eps, m };
    match preset {
        Preset::Fig2M1 | Preset::Fig2M8 => {
            let m = if matches!(preset, Preset::Fig2M1) { 1.0 } else { 8.0 };
            let args = RunArgs {
                dim: 1,
                n: 100,
                scheme: SchemeArg::Exim,
                dt: 1e-7,
                t_end: 7.2e-4,
                ic: ic(0.001, m),
                report: None,
                out: out.to_path_buf(),
                energy: EnergyArg::Forward,
                tol: None,
            };
            cmd_run(&args, Some(preset.name()))
        }
        Preset::Fig42d => {
            let args = RunArgs {
                dim: 2,
                n: 64,
                scheme: SchemeArg::Exim,
                dt: 1e-7,
                t_end: 7.2e-4,
                ic: ic(0.001, 8.0),
                report: Some(vec![0.0, 8e-6, 3.2e-5, 7.2e-4]),
                out: out.to_path_buf(),
                energy: EnergyArg::Forward,
                tol: None,
            };
            cmd_run(&args, Some(preset.name()))
        }
        Preset::Fig3Convergence => {
            let args = ConvergenceArgs {
                dim: 1,
                ns: vec![10, 20, 40, 80, 160],
                dt_coeff: 1.6e-8,
                t_end: 7.2e-4,
                ic: ic(0.001, 1.0),
                scheme: SchemeArg::Exim,
                energy: EnergyArg::Forward,
                tol: None,
                out: out.to_path_buf(),
            };
            cmd_convergence(&args, Some(preset.name()))
        }
    }
}

fn resolved_config(scheme: SchemeArg, dt: f64, energy: EnergyArg, tol: Option<f64>) -> SchemeConfig {
    let mut cfg = SchemeConfig::new(scheme.into(), dt);
    cfg.energy = energy.into();
    if let Some(tol) = tol {
        cfg.newton.tol = tol;
    }
    cfg
}

fn cmd_run(args: &RunArgs, preset: Option<&'static str>) -> ExitCode {
    if args.n < 3 {
        return usage("--n must be at least 3");
    }
    if !(args.dt > 0.0 && args.dt.is_finite()) {
        return usage("--dt must be positive and finite");
    }
    if !(args.t_end > 0.0 && args.t_end.is_finite()) {
        return usage("--t-end must be positive and finite");
    }
    if let Some(tol) = args.tol {
        if !(tol > 0.0 && tol.is_finite()) {
            return usage("--tol must be positive and finite");
        }
    }
    let report: Vec<f64> = match &args.report {
        Some(times) => {
            if times.iter().any(|&t| !(0.0..=args.t_end).contains(&t)) {
                return usage("--report times must lie in [0, t-end]");
            }
            times.clone()
        }
        None => lab::DEFAULT_REPORT_TIMES
            .iter()
            .copied()
            .filter(|&t| t <= args.t_end)
            .collect(),
    };

    let grid = if args.dim == 2 {
        GridSpec::two_d(args.n, 1.0)
    } else {
        GridSpec::one_d(args.n, 1.0)
    };
    let ic = args.ic.build(args.dim);
    let cfg = resolved_config(args.scheme, args.dt, args.energy, args.tol);

    let (trace, snapshots) = match lab::run(&ic, grid, &cfg, args.t_end, &report) {
        Ok(result) => result,
        Err(err) => return failure(&err),
    };

    let mut manifest = Manifest::new("run", preset);
    manifest.dim = Some(args.dim);
    manifest.n = Some(args.n);
    manifest.domain_length = Some(1.0);
    manifest.scheme = Some(cfg.scheme.name());
    manifest.energy = Some(energy_name(args.energy));
    manifest.newton_tol = Some(cfg.newton.tol);
    manifest.dt = Some(args.dt);
    manifest.t_end = Some(args.t_end);
    manifest.initial_condition = Some(ic.describe());
    manifest.report_times = Some(report);

    let mut write = || -> std::io::Result<()> {
        std::fs::create_dir_all(&args.out)?;
        let mut names = vec!["trace.csv".to_string()];
        write_trace(&args.out.join("trace.csv"), &trace)?;
        for (t, field) in &snapshots {
            let name = format!("snapshot_{t:e}.csv");
            write_snapshot(&args.out.join(&name), field)?;
            names.push(name);
        }
        names.push("manifest.json".to_string());
        manifest.outputs = names;
        write_manifest(&args.out.join("manifest.json"), &manifest)?;
        Ok(())
    };
    finish(write(), &args.out, snapshots.len() + 2)
}

fn cmd_convergence(args: &ConvergenceArgs, preset: Option<&'static str>) -> ExitCode {
    if args.ns.len() < 2 {
        return usage("--ns needs at least two levels");
    }
    if !args.ns.windows(2).all(|w| w[0] < w[1]) || args.ns[0] < 3 {
        return usage("--ns must be strictly increasing with at least 3 cells");
    }
    if !(args.dt_coeff > 0.0 && args.dt_coeff.is_finite()) {
        return usage("--dt-coeff must be positive and finite");
    }
    if !(args.t_end > 0.0 && args.t_end.is_finite()) {
        return usage("--t-end must be positive and finite");
    }
    let ic = args.ic.build(args.dim);
    let cfg = resolved_config(args.scheme, 1.0, args.energy, args.tol);
    let rows = match lab::convergence_study(&ic, &cfg, &args.ns, args.dt_coeff, args.t_end) {
        Ok(rows) => rows,
        Err(err) => return failure(&err),
    };

    let mut manifest = Manifest::new("convergence", preset);
    manifest.dim = Some(args.dim);
    manifest.domain_length = Some(1.0);
    manifest.scheme = Some(cfg.scheme.name());
    manifest.energy = Some(energy_name(args.energy));
    manifest.newton_tol = Some(cfg.newton.tol);
    manifest.t_end = Some(args.t_end);
    manifest.initial_condition = Some(ic.describe());
    manifest.ns = Some(args.ns.clone());
    manifest.dt_coefficient = Some(args.dt_coeff);
    manifest.outputs = vec!["convergence.csv".to_string(), "manifest.json".to_string()];

    let write = || -> std::io::Result<()> {
        std::fs::create_dir_all(&args.out)?;
        let mut body = String::from("N,h,l2_error,order\n");
        for row in &rows {
            let order = row.order.map(|p| format!("{p:.16e}")).unwrap_or_default();
            body.push_str(&format!(
                "{},{:.16e},{:.16e},{}\n",
                row.n, row.h, row.l2_error, order
            ));
        }
        std::fs::write(args.out.join("convergence.csv"), body)?;
        write_manifest(&args.out.join("manifest.json"), &manifest)?;
        Ok(())
    };
    finish(write(), &args.out, 2)
}

fn cmd_consistency(args: &ConsistencyArgs) -> ExitCode {
    if args.n0 < 3 {
        return usage("--n0 must be at least 3");
    }
    if !(args.dt0 > 0.0 && args.dt0.is_finite()) {
        return usage("--dt0 must be positive and finite");
    }
    if !args.t.is_finite() {
        return usage("--t must be finite");
    }
    let profile: fn(f64, f64) -> f64 = match args.profile {
        ProfileArg::DecayingCosine => {
            |x, t| 2.0 + (2.0 * std::f64::consts::PI * x).cos() * (-t).exp()
        }
        ProfileArg::Constant => |_, _| 2.0,
    };

    let mut rows: Vec<(f64, f64, f64)> = Vec::new();
    for level in 0..args.levels {
        let n = args.n0 << level;
        let dt = args.dt0 / f64::powi(2.0, level as i32);
        let grid = GridSpec::one_d(n, 1.0);
        match lab::truncation_error(profile, grid, dt, args.t) {
            Ok(tau) => rows.push((grid.h(), dt, tau)),
            Err(err) => return failure(&err),
        }
    }

    let mut manifest = Manifest::new("consistency", None);
    manifest.levels = Some(args.levels);
    manifest.base_n = Some(args.n0);
    manifest.base_dt = Some(args.dt0);
    manifest.eval_time = Some(args.t);
    manifest.profile = Some(match args.profile {
        ProfileArg::DecayingCosine => "decaying-cosine",
        ProfileArg::Constant => "constant",
    });
    manifest.outputs = vec!["consistency.csv".to_string(), "manifest.json".to_string()];

    let write = || -> std::io::Result<()> {
        std::fs::create_dir_all(&args.out)?;
        let mut body = String::from("h,dt,tau_inf,ratio\n");
        for (k, &(h, dt, tau)) in rows.iter().enumerate() {
            let ratio = if k > 0 {
                format!("{:.16e}", rows[k - 1].2 / tau)
            } else {
                String::new()
            };
            body.push_str(&format!("{h:.16e},{dt:.16e},{tau:.16e},{ratio}\n"));
        }
        std::fs::write(args.out.join("consistency.csv"), body)?;
        write_manifest(&args.out.join("manifest.json"), &manifest)?;
        Ok(())
    };
    finish(write(), &args.out, 2)
}

fn finish(result: std::io::Result<()>, out: &Path, files: usize) -> ExitCode {
    match result {
        Ok(()) => {
            println!("wrote {files} files to {}", out.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: cannot write outputs: {err}");
            ExitCode::from(1)
        }
    }
}

fn energy_name(e: EnergyArg) -> &'static str {
    match e {
        EnergyArg::Forward => "forward",
        EnergyArg::Backward => "backward",
        EnergyArg::Symmetric => "symmetric",
        EnergyArg::Central => "central",
    }
}

fn write_trace(path: &Path, trace: &lab::RunTrace) -> std::io::Result<()> {
    let mut body = String::from("step,t,mass,min_u,energy,slack,newton_iters\n");
    for r in &trace.records {
        body.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
            r.step, r.t, r.mass, r.min_u, r.energy, r.dissipation_slack, r.newton_iters
        ));
    }
    std::fs::write(path, body)
}

fn write_snapshot(path: &Path, field: &CellField) -> std::io::Result<()> {
    let grid = field.grid();
    let mut body = String::new();
    if grid.dim() == 1 {
        body.push_str("x,u\n");
        for i in 0..grid.n() {
            body.push_str(&format!("{:.16e},{:.16e}\n", grid.coord(i), field[i]));
        }
    } else {
        body.push_str("x,y,u\n");
        for j in 0..grid.n() {
            for i in 0..grid.n() {
                body.push_str(&format!(
                    "{:.16e},{:.16e},{:.16e}\n",
                    grid.coord(i),
                    grid.coord(j),
                    field[grid.idx(i, j)]
                ));
            }
        }
    }
    std::fs::write(path, body)
}

fn write_manifest(path: &Path, manifest: &Manifest) -> std::io::Result<()> {
    let mut body = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    body.push('\n');
    std::fs::write(path, body)
}
