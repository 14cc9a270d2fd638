//! Run configuration, command dispatch and result files.
//!
//! A run is described by one TOML file:
//!
//! ```toml
//! command = "converge"     # simulate | converge | verify | kernels
//! seed = 42
//! out = "out"
//!
//! [problem]
//! builtin = "reference"    # or file = "problem.toml", relative to this file
//!
//! [solver]
//! points = 128
//! steps = 500
//!
//! [ensemble]
//! members = 200
//!
//! [converge]
//! viscosities = [8, 16, 32, 64, 128]
//! ```
//!
//! Every section except `[problem]` may be omitted. Defaults:
//!
//! | key | default |
//! |-----|---------|
//! | `out` | `"out"` |
//! | `threads` | `0` (all cores) |
//! | `solver` | 128 points, viscosity 16, order 1, horizon 0.5, 500 steps, linear clock, save every 10 |
//! | `ensemble.members` | 16 |
//! | `converge.viscosities` | `[8, 16, 32, 64, 128]`, expected slope 1 within 0.3 |
//! | `moments.orders` | `[1, 2]` |
//! | `verify` | 128 points, 12 samples |
//! | `kernels` | orders 0.25, 0.5, 0.75 |

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{ConfigErrorCode, Error, Result};
use crate::problem::Problem;
use crate::solver::{EnergyLedger, Simulation, SolverConfig};
use crate::verification::{self, CheckConfig, CheckReport, KernelConfig};

/// Process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitCode {
    Pass = 0,
    ConfigError = 2,
    NumericalFailure = 3,
    CheckFailure = 4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Ensemble of paths: energy ledger and moment estimates.
    Simulate,
    /// Coupled-path Cauchy study over viscosity indices.
    Converge,
    /// Inequality checks on the problem plus the kernel suite.
    Verify,
    /// Kernel suite only.
    Kernels,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Converge => "converge",
            Command::Verify => "verify",
            Command::Kernels => "kernels",
        }
    }
}

/// Where the coefficients, jump catalog and data come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig { members: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeConfig {
    pub viscosities: Vec<usize>,
    pub expected_slope: f64,
    pub slope_tolerance: f64,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        ConvergeConfig {
            viscosities: vec![8, 16, 32, 64, 128],
            expected_slope: 1.0,
            slope_tolerance: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MomentConfig {
    pub orders: Vec<usize>,
}

impl Default for MomentConfig {
    fn default() -> Self {
        MomentConfig { orders: vec![1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub points: usize,
    pub samples: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        let c = CheckConfig::default();
        VerifyConfig {
            points: c.points,
            samples: c.samples,
        }
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// A validated run description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[serde(default)]
    pub threads: usize,
    pub problem: ProblemSource,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub converge: ConvergeConfig,
    #[serde(default)]
    pub moments: MomentConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub kernels: KernelConfig,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base: PathBuf,
}

fn config_error(code: ConfigErrorCode, line: Option<usize>, message: impl Into<String>) -> Error {
    Error::Config {
        code,
        line,
        message: message.into(),
    }
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]` (top level for `None`), or of the section header.
fn key_line(text: &str, section: Option<&str>, key: Option<&str>) -> Option<usize> {
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.trim_start_matches('[').split(']').next().unwrap_or("").trim().to_string();
            if key.is_none() && Some(name.as_str()) == section {
                return Some(i + 1);
            }
            current = Some(name);
            continue;
        }
        if let Some(k) = key {
            let lhs = line.split('=').next().unwrap_or("").trim();
            if current.as_deref() == section && line.contains('=') && lhs == k {
                return Some(i + 1);
            }
        }
    }
    None
}

/// [`parse_config_in`] with paths relative to the working directory.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_in(text, Path::new("."))
}

/// Parses and validates a run config; relative paths resolve against `base`.
///
/// The first problem found is reported with its code and, where it has one, its line.
pub fn parse_config_in(text: &str, base: &Path) -> Result<RunConfig> {
    if let Err(e) = text.parse::<toml::Table>() {
        let line = e.span().map(|s| line_at(text, s.start));
        return Err(config_error(ConfigErrorCode::Syntax, line, e.message().trim()));
    }
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let msg = e.message().trim().to_string();
        let line = e.span().map(|s| line_at(text, s.start));
        if msg.starts_with("unknown field") {
            config_error(ConfigErrorCode::UnknownKey, line, msg)
        } else if msg.contains("missing field `seed`") {
            config_error(ConfigErrorCode::MissingKey, None, "seed required")
        } else if msg.starts_with("missing field") {
            config_error(ConfigErrorCode::MissingKey, None, msg)
        } else {
            config_error(ConfigErrorCode::Invariant, line, msg)
        }
    })?;
    cfg.base = base.to_path_buf();
    cfg.validate(text)?;
    Ok(cfg)
}

/// Reads and parses a config file; relative paths resolve against its directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        config_error(ConfigErrorCode::MissingFile, None, format!("cannot read {}: {e}", path.display()))
    })?;
    let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    parse_config_in(&text, base)
}

impl RunConfig {
    fn problem_path(&self) -> Option<PathBuf> {
        self.problem.file.as_ref().map(|f| self.base.join(f))
    }

    /// The problem named by `[problem]`.
    pub fn load_problem(&self) -> Result<Problem> {
        match (&self.problem.builtin, self.problem_path()) {
            (Some(name), None) => Problem::builtin(name),
            (None, Some(path)) => Problem::load(path),
            _ => Err(config_error(
                ConfigErrorCode::Invariant,
                None,
                "[problem] needs exactly one of `builtin` or `file`",
            )),
        }
    }

    fn validate(&self, text: &str) -> Result<()> {
        let at = |section: Option<&str>, key: Option<&str>| key_line(text, section, key).or_else(|| key_line(text, section, None));
        let invariant = |section: Option<&str>, key: Option<&str>, msg: String| config_error(ConfigErrorCode::Invariant, at(section, key), msg);
        if self.seed > i64::MAX as u64 {
            return Err(invariant(None, Some("seed"), format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        let problem = match (&self.problem.builtin, self.problem_path()) {
            (Some(name), None) => match Problem::builtin(name) {
                Ok(p) => p,
                Err(_) => {
                    let names = Problem::builtin_names().join(", ");
                    return Err(invariant(Some("problem"), Some("builtin"), format!("unknown builtin `{name}` (one of {names})")));
                }
            },
            (None, Some(path)) => {
                if !path.is_file() {
                    return Err(config_error(
                        ConfigErrorCode::MissingFile,
                        at(Some("problem"), Some("file")),
                        format!("problem file {} not found", path.display()),
                    ));
                }
                let p = Problem::load(&path)
                    .map_err(|e| invariant(Some("problem"), Some("file"), format!("{}: {e}", path.display())))?;
                let dir = path.parent().unwrap_or(Path::new("."));
                for f in p.files() {
                    let full = dir.join(f);
                    if !full.is_file() {
                        return Err(config_error(
                            ConfigErrorCode::MissingFile,
                            at(Some("problem"), Some("file")),
                            format!("snapshot {} referenced by {} not found", full.display(), path.display()),
                        ));
                    }
                }
                p
            }
            _ => return Err(invariant(Some("problem"), None, "[problem] needs exactly one of `builtin` or `file`".into())),
        };
        if let Err(e) = self.solver.validate() {
            return Err(invariant(Some("solver"), None, e.to_string()));
        }
        let data_dir = self.problem_path();
        let data_dir = data_dir.as_deref().and_then(Path::parent);
        let build = |points: usize| {
            let g = problem.coefficients.grid(points)?;
            problem.coefficients.build(&g)?;
            problem.build_data(&g, data_dir)
        };
        if let Err(e) = build(self.solver.points) {
            return Err(invariant(Some("solver"), Some("points"), e.to_string()));
        }
        if let Err(e) = build(self.verify.points) {
            return Err(invariant(Some("verify"), Some("points"), e.to_string()));
        }
        if self.verify.samples == 0 {
            return Err(invariant(Some("verify"), Some("samples"), "samples must be positive".into()));
        }
        if self.ensemble.members == 0 {
            return Err(invariant(Some("ensemble"), Some("members"), "members must be positive".into()));
        }
        let v = &self.converge.viscosities;
        if v.len() < 2 || v[0] == 0 || v.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invariant(
                Some("converge"),
                Some("viscosities"),
                "viscosities need at least two positive, strictly increasing entries".into(),
            ));
        }
        if !(self.converge.slope_tolerance > 0.0 && self.converge.expected_slope.is_finite()) {
            return Err(invariant(Some("converge"), Some("slope_tolerance"), "slope tolerance must be positive".into()));
        }
        let top = self.solver.order + 1;
        if self.moments.orders.is_empty() || self.moments.orders.iter().any(|&m| m > top) {
            return Err(invariant(
                Some("moments"),
                Some("orders"),
                format!("moment orders must be non-empty and at most solver.order + 1 = {top}"),
            ));
        }
        let k = &self.kernels;
        if k.orders.is_empty() || k.orders.iter().any(|&o| !(o > 0.0 && o < 1.0)) {
            return Err(invariant(Some("kernels"), Some("orders"), "kernel orders must lie in (0,1)".into()));
        }
        if k.nodes < 2 || k.panels == 0 || k.periods == 0 {
            return Err(invariant(Some("kernels"), None, "kernel quadrature needs nodes >= 2 and positive panels, periods".into()));
        }
        if !(k.tolerance > 0.0 && k.slope_tolerance > 0.0 && k.quadrature_tolerance > 0.0) {
            return Err(invariant(Some("kernels"), None, "kernel tolerances must be positive".into()));
        }
        Ok(())
    }

    /// Canonical TOML with every default written out.
    pub fn to_canonical(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error(ConfigErrorCode::Invariant, None, e.to_string()))
    }

    /// SHA-256 of the canonical form with `out` and `threads` cleared, which do not affect results.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.threads = 0;
        Ok(hex::encode(Sha256::digest(c.to_canonical()?.as_bytes())))
    }
}

/// Outcome of a completed run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub pass: bool,
    pub files: Vec<PathBuf>,
    /// Machine-readable summary, also printed by the binary.
    pub summary: Value,
}

impl RunReport {
    pub fn exit_code(&self) -> ExitCode {
        if self.pass {
            ExitCode::Pass
        } else {
            ExitCode::CheckFailure
        }
    }
}

/// Exit code for an error raised by [`run`] or config parsing.
pub fn error_exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config { .. } | Error::Problem(_) => ExitCode::ConfigError,
        _ => ExitCode::NumericalFailure,
    }
}

/// Machine-readable description of an error.
pub fn error_summary(e: &Error) -> Value {
    match e {
        Error::Config { code, line, message } => json!({
            "status": "config_error",
            "code": code.id(),
            "kind": code.name(),
            "line": line,
            "message": message,
        }),
        Error::BlowUp { step, norm, threshold } => json!({
            "status": "numerical_failure",
            "kind": "blow_up",
            "step": step,
            "norm": norm,
            "threshold": threshold,
            "message": e.to_string(),
        }),
        Error::Problem(_) => json!({ "status": "config_error", "kind": "problem", "message": e.to_string() }),
        _ => json!({ "status": "numerical_failure", "kind": "error", "message": e.to_string() }),
    }
}

struct Writer {
    dir: PathBuf,
    hash: String,
    seed: u64,
    files: Vec<PathBuf>,
}

impl Writer {
    fn csv(&mut self, name: &str, body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "# config_hash={},seed={}", self.hash, self.seed).map_err(|e| Error::io(name, e))?;
        body(&mut buf).map_err(|e| Error::io(name, e))?;
        self.put(name, &buf)
    }

    fn json(&mut self, name: &str, mut body: Value) -> Result<()> {
        if let Value::Object(map) = &mut body {
            map.insert("config_hash".into(), json!(self.hash));
            map.insert("seed".into(), json!(self.seed));
        }
        let mut text = serde_json::to_string_pretty(&body).map_err(|e| Error::param(e.to_string()))?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

/// Executes the configured command, writing result files under `cfg.out`.
///
/// A numerical failure leaves a `failure.json` record in the output directory.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    let dir = cfg.base.join(&cfg.out);
    std::fs::create_dir_all(&dir).map_err(|e| {
        config_error(ConfigErrorCode::Invariant, None, format!("output directory {} is not writable: {e}", dir.display()))
    })?;
    let mut w = Writer {
        dir,
        hash: cfg.config_hash()?,
        seed: cfg.seed,
        files: Vec::new(),
    };
    let outcome = if cfg.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::param(e.to_string()))?;
        pool.install(|| dispatch(cfg, &mut w))
    } else {
        dispatch(cfg, &mut w)
    };
    match outcome {
        Ok((pass, mut summary)) => {
            if let Value::Object(map) = &mut summary {
                map.insert("status".into(), json!(if pass { "pass" } else { "check_failure" }));
                map.insert("command".into(), json!(cfg.command.name()));
                map.insert("config_hash".into(), json!(w.hash));
                map.insert("seed".into(), json!(cfg.seed));
                map.insert("outputs".into(), json!(w.files.iter().map(|f| f.display().to_string()).collect::<Vec<_>>()));
            }
            Ok(RunReport {
                pass,
                files: w.files,
                summary,
            })
        }
        Err(e) => {
            if error_exit_code(&e) == ExitCode::NumericalFailure {
                let mut record = error_summary(&e);
                if let Value::Object(map) = &mut record {
                    map.insert("command".into(), json!(cfg.command.name()));
                }
                w.json("failure.json", record)?;
            }
            Err(e)
        }
    }
}

fn dispatch(cfg: &RunConfig, w: &mut Writer) -> Result<(bool, Value)> {
    match cfg.command {
        Command::Simulate => simulate(cfg, w),
        Command::Converge => converge(cfg, w),
        Command::Verify => {
            let problem = cfg.load_problem()?;
            let check = CheckConfig {
                points: cfg.verify.points,
                samples: cfg.verify.samples,
                seed: cfg.seed,
            };
            let reports = verification::run_suite(&problem, &check, &cfg.kernels)?;
            write_reports(w, &reports)
        }
        Command::Kernels => {
            let reports = cfg
                .kernels
                .orders
                .iter()
                .map(|&k| verification::check_kernel_identities(k, &cfg.kernels))
                .collect::<Result<Vec<_>>>()?;
            write_reports(w, &reports)
        }
    }
}

fn write_reports(w: &mut Writer, reports: &[CheckReport]) -> Result<(bool, Value)> {
    let pass = verification::all_pass(reports);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.id.as_str()).collect();
    w.json("verify.json", json!({ "pass": pass, "checks": verification::reports_json(reports)? }))?;
    Ok((pass, json!({ "checks": reports.len(), "failed": failed })))
}

fn simulation(cfg: &RunConfig) -> Result<Simulation> {
    let problem = cfg.load_problem()?;
    let base = cfg.problem_path();
    let base = base.as_deref().and_then(Path::parent);
    Simulation::new(&problem, &cfg.solver, base)
}

fn simulate(cfg: &RunConfig, w: &mut Writer) -> Result<(bool, Value)> {
    let sim = simulation(cfg)?;
    let trajs = sim.ensemble(cfg.seed, cfg.ensemble.members)?;
    let ledgers: Vec<&EnergyLedger> = trajs.iter().map(|t| &t.ledger).collect();
    w.csv("ledger.csv", |b| EnergyLedger::write_ensemble_csv(&ledgers, b))?;
    let reports = cfg
        .moments
        .orders
        .iter()
        .map(|&m| sim.moment_estimates(&trajs, m))
        .collect::<Result<Vec<_>>>()?;
    // bounded: a finite ratio, or a vanishing functional when the bound vanishes
    let pass = reports.iter().all(|r| match r.ratio {
        Some(q) => q.is_finite(),
        None => r.lhs == 0.0,
    });
    let max_residual = ledgers.iter().map(|l| l.max_abs_residual()).fold(0.0, f64::max);
    w.json(
        "moments.json",
        json!({ "pass": pass, "members": trajs.len(), "max_energy_residual": max_residual, "moments": reports }),
    )?;
    Ok((pass, json!({ "members": trajs.len(), "max_energy_residual": max_residual })))
}

fn converge(cfg: &RunConfig, w: &mut Writer) -> Result<(bool, Value)> {
    let sim = simulation(cfg)?;
    let c = &cfg.converge;
    let table = sim.cauchy_study(&c.viscosities, cfg.ensemble.members, cfg.seed)?;
    w.csv("cauchy.csv", |b| table.write_csv(b))?;
    let pass = table.slope.is_some_and(|s| (s - c.expected_slope).abs() <= c.slope_tolerance);
    Ok((pass, json!({ "slope": table.slope, "expected_slope": c.expected_slope, "slope_tolerance": c.slope_tolerance })))
}

/// Command-line flags of the `sidelab` binary.
#[derive(Debug, Parser)]
#[command(name = "sidelab", version, about = "Run a simulate, converge, verify or kernels study from a config file")]
pub struct Args {
    /// Overrides the command named in the config.
    #[arg(value_enum)]
    pub command: Option<Command>,
    /// Run config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, overriding `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed, overriding `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads, overriding `threads`.
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Loads the config named by `args`, applies the overrides and runs it.
pub fn execute(args: &Args) -> Result<RunReport> {
    let mut cfg = load_config(&args.config)?;
    if let Some(c) = args.command {
        cfg.command = c;
    }
    if let Some(out) = &args.out {
        // flags are relative to the working directory, not the config file
        cfg.out = std::env::current_dir().map_err(|e| Error::io(".", e))?.join(out);
    }
    if let Some(seed) = args.seed {
        if seed > i64::MAX as u64 {
            return Err(config_error(ConfigErrorCode::Invariant, None, format!("--seed {seed} exceeds {}", i64::MAX)));
        }
        cfg.seed = seed;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    run(&cfg)
}

/// Entry point of the binary; returns the process exit code.
pub fn main() -> i32 {
    let args = Args::parse();
    match execute(&args) {
        Ok(report) => {
            println!("{}", report.summary);
            report.exit_code() as i32
        }
        Err(e) => {
            eprintln!("{}", error_summary(&e));
            error_exit_code(&e) as i32
        }
    }
}
