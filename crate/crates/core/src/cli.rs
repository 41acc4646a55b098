//! The `mlp` command line: TOML configs in, CSV out.
//!
//! Exit codes: 0 success, 1 validation failure, 2 configuration error,
//! 3 budget refusal.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::analysis::{complexity_experiment, kappa_v0, rmse_experiment, ComplexitySetup, RmseSetup};
use crate::error::MlpError;
use crate::mlp_engine::{estimate_at_horizon, mlp_exp_euler, MlpParams, DEFAULT_MAX_SAMPLES};
use crate::model::{index_law_check, make_registry_problem, validate_lipschitz, IndexDistribution, NonlinearityKind, ProblemSpec, TerminalKind};
use crate::oracles::{exact_affine, nested_mc, quadrature_1d, OracleResult, Z99};
use crate::rand_streams::MultiIndex;

/// Seed used when neither the config nor `--seed` sets one.
pub const DEFAULT_SEED: u64 = 20_190_611;

/// Environment variable read for the worker count when `--threads` is absent.
pub const THREADS_ENV: &str = "MLP_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mlp", version, about = "Multilevel Picard estimates, validation and experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// One CSV row per (M, n, seed).
    Estimate(CommonArgs),
    /// Lipschitz, index-law, oracle, telescoping and a-priori checks.
    Validate(CommonArgs),
    /// RMSE against a reference oracle for each (M, N) cell.
    Converge(CommonArgs),
    /// Certified level counts and costs over (d, ε).
    Complexity(CommonArgs),
    /// Every reference oracle the problem admits.
    Oracle(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker count; falls back to MLP_THREADS, then 1.
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// Refuse estimates predicted to draw more than this many variates.
    #[arg(long)]
    pub max_samples: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NonlinearityConfig {
    Zero,
    Constant { c: f64 },
    Affine { alpha: f64, beta: f64 },
    Sin { scale: f64 },
    Cos { scale: f64 },
}

impl From<NonlinearityConfig> for NonlinearityKind {
    fn from(c: NonlinearityConfig) -> Self {
        match c {
            NonlinearityConfig::Zero => NonlinearityKind::Zero,
            NonlinearityConfig::Constant { c } => NonlinearityKind::Constant { c },
            NonlinearityConfig::Affine { alpha, beta } => NonlinearityKind::Affine { alpha, beta },
            NonlinearityConfig::Sin { scale } => NonlinearityKind::Sin { scale },
            NonlinearityConfig::Cos { scale } => NonlinearityKind::ScaledCos { scale },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalConfig {
    Constant { c: f64 },
    Quadratic,
    GaussianBump,
}

impl From<TerminalConfig> for TerminalKind {
    fn from(c: TerminalConfig) -> Self {
        match c {
            TerminalConfig::Constant { c } => TerminalKind::Constant { c },
            TerminalConfig::Quadratic => TerminalKind::Quadratic,
            TerminalConfig::GaussianBump => TerminalKind::GaussianBump,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub id: String,
    pub d: usize,
    pub steps: usize,
    pub horizon: f64,
    pub nonlinearity: NonlinearityConfig,
    pub terminal: TerminalConfig,
    /// Defaults to the origin.
    pub eval_point: Option<Vec<f64>>,
    /// Declared Lipschitz constant of `f`; defaults to the smallest valid one.
    pub lipschitz_f: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityConfig {
    pub eps: Vec<f64>,
    pub dims: Vec<usize>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Defaults to `L_f·T` of the problem.
    pub c: Option<f64>,
    /// Defaults to `κ_v0 + T|f(0)|` of the problem.
    pub kappa: Option<f64>,
}

fn default_delta() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_hermite_nodes")]
    pub hermite_nodes: usize,
    #[serde(default = "default_nested_m")]
    pub nested_m: u64,
    /// Defaults to `min(K, 2)`.
    pub nested_k: Option<usize>,
    /// MLP replicas compared against the references in `validate`.
    #[serde(default = "default_mlp_runs")]
    pub mlp_runs: usize,
    #[serde(default = "default_mlp_levels")]
    pub mlp_levels: u32,
}

fn default_grid_points() -> usize {
    2001
}
fn default_hermite_nodes() -> usize {
    64
}
fn default_nested_m() -> u64 {
    2000
}
fn default_mlp_runs() -> usize {
    100
}
fn default_mlp_levels() -> u32 {
    5
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            grid_points: default_grid_points(),
            hermite_nodes: default_hermite_nodes(),
            nested_m: default_nested_m(),
            nested_k: None,
            mlp_runs: default_mlp_runs(),
            mlp_levels: default_mlp_levels(),
        }
    }
}

/// The on-disk experiment description.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: Option<u64>,
    /// Extra seeds for `estimate`; defaults to `[seed]`.
    pub seeds: Option<Vec<u64>>,
    /// `(M, n)` pairs.
    #[serde(default)]
    pub grid: Vec<(u64, u32)>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub max_samples: Option<u64>,
    pub problem: ProblemConfig,
    pub complexity: Option<ComplexityConfig>,
    #[serde(default)]
    pub oracle: OracleConfig,
}

fn default_runs() -> usize {
    200
}

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Validation(String),
    Budget(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Budget(_) => EXIT_BUDGET,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Validation(m) => write!(f, "validation failed: {m}"),
            CliError::Budget(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<MlpError> for CliError {
    fn from(e: MlpError) -> Self {
        match e {
            MlpError::Domain(d) => CliError::Config(d.to_string()),
            other => CliError::Budget(other.to_string()),
        }
    }
}

impl From<crate::error::DomainError> for CliError {
    fn from(e: crate::error::DomainError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.version != CONFIG_VERSION {
        return Err(CliError::Config(format!("version: expected {CONFIG_VERSION}, got {}", cfg.version)));
    }
    Ok(cfg)
}

/// Builds the problem named by the config.
pub fn build_problem(p: &ProblemConfig) -> Result<ProblemSpec, CliError> {
    let mut spec = make_registry_problem(p.d, p.steps, p.horizon, p.nonlinearity.into(), p.terminal.into())
        .map_err(|e| CliError::Config(format!("problem: {}", e.0)))?;
    if let Some(xi) = &p.eval_point {
        if xi.len() != p.d {
            return Err(CliError::Config(format!("problem.eval_point: expected {} coordinates, got {}", p.d, xi.len())));
        }
        spec.eval_point = xi.clone();
    }
    if let Some(l) = p.lipschitz_f {
        if !(l >= 0.0) {
            return Err(CliError::Config(format!("problem.lipschitz_f: must be nonnegative, got {l}")));
        }
        spec.lipschitz = (0..spec.steps()).map(|k| spec.grid.dt(k) * l).collect();
        if let Some(ee) = spec.exp_euler.as_mut() {
            ee.lipschitz_f = l;
        }
    }
    Ok(spec)
}

struct Ctx {
    cfg: ExperimentConfig,
    spec: ProblemSpec,
    seed: u64,
    threads: usize,
    max_samples: u64,
}

impl Ctx {
    fn f_kind(&self) -> NonlinearityKind {
        self.cfg.problem.nonlinearity.into()
    }

    fn v0_kind(&self) -> TerminalKind {
        self.cfg.problem.terminal.into()
    }

    /// Closed-form `v_k(ξ)` when `f` is affine.
    fn exact_at(&self, k: usize) -> Option<OracleResult> {
        let (alpha, beta) = self.f_kind().as_affine()?;
        let tk = self.spec.grid.t(k);
        if k == 0 {
            let v = (self.spec.terminal)(&self.spec.eval_point);
            return exact_affine(1, 1.0, 0.0, 0.0, v).ok();
        }
        let c0 = self.v0_kind().mean_under_gaussian(&self.spec.eval_point, tk);
        exact_affine(k, tk, alpha, beta, c0).ok()
    }

    fn kappa_v0(&self) -> f64 {
        let ee = self.spec.exp_euler.as_ref().expect("registry problems are exponential-Euler");
        kappa_v0(ee, &self.spec.eval_point).unwrap_or(0.0)
    }

    fn nested_k(&self) -> usize {
        self.cfg.oracle.nested_k.unwrap_or(2).min(self.spec.steps())
    }
}

fn f64_field(v: f64) -> String {
    // shortest round-trip digits, exponent form for very large or small magnitudes
    format!("{v:?}")
}

fn open_output(out: &Option<PathBuf>) -> Result<Box<dyn Write + Send>, CliError> {
    match out {
        Some(p) => Ok(Box::new(fs::File::create(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?)),
        None => Ok(Box::new(io::stdout())),
    }
}

fn load(args: &CommonArgs) -> Result<Ctx, CliError> {
    let text = fs::read_to_string(&args.config).map_err(|e| CliError::Config(format!("{}: {e}", args.config.display())))?;
    let cfg = parse_config(&text)?;
    let spec = build_problem(&cfg.problem)?;
    let seed = args.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let threads = args.threads.unwrap_or(1).max(1);
    let max_samples = args.max_samples.or(cfg.max_samples).unwrap_or(DEFAULT_MAX_SAMPLES);
    Ok(Ctx { cfg, spec, seed, threads, max_samples })
}

fn cmd_estimate(ctx: &Ctx, w: &mut csv::Writer<Box<dyn Write + Send>>) -> Result<(), CliError> {
    if ctx.cfg.grid.is_empty() {
        return Err(CliError::Config("grid: at least one [M, n] pair is required".into()));
    }
    w.write_record(["problem_id", "d", "K", "T", "M", "n", "seed", "estimate", "normals", "uniforms", "wall_ms"])?;
    let seeds = ctx.cfg.seeds.clone().unwrap_or_else(|| vec![ctx.seed]);
    let p = &ctx.cfg.problem;
    for &(m, n) in &ctx.cfg.grid {
        for &seed in &seeds {
            let params = MlpParams::new(m, n, seed).with_width(ctx.threads).with_cap(ctx.max_samples);
            let est = estimate_at_horizon(&ctx.spec, &params)?;
            w.write_record([
                p.id.clone(),
                p.d.to_string(),
                p.steps.to_string(),
                f64_field(p.horizon),
                m.to_string(),
                n.to_string(),
                seed.to_string(),
                f64_field(est.value),
                est.ledger.normals.to_string(),
                est.ledger.uniforms.to_string(),
                f64_field(est.ledger.wall_ns as f64 / 1e6),
            ])?;
        }
    }
    Ok(())
}

/// Best deterministic reference at `K`: closed form, else 1-d quadrature.
fn deterministic_reference(ctx: &Ctx) -> Result<Option<OracleResult>, CliError> {
    if let Some(r) = ctx.exact_at(ctx.spec.steps()) {
        return Ok(Some(r));
    }
    if ctx.spec.d == 1 {
        let q = quadrature_1d(&ctx.spec, ctx.cfg.oracle.grid_points, ctx.cfg.oracle.hermite_nodes)?;
        return Ok(Some(q.result(ctx.spec.steps())));
    }
    Ok(None)
}

fn cmd_converge(ctx: &Ctx, w: &mut csv::Writer<Box<dyn Write + Send>>) -> Result<(), CliError> {
    if ctx.cfg.grid.is_empty() {
        return Err(CliError::Config("grid: at least one [M, N] pair is required".into()));
    }
    let reference = deterministic_reference(ctx)?
        .ok_or_else(|| CliError::Config("converge needs an affine nonlinearity or d = 1 for its reference".into()))?;
    let setup = RmseSetup {
        cells: ctx.cfg.grid.clone(),
        runs: ctx.cfg.runs,
        seed: ctx.seed,
        width: ctx.threads,
        kappa: ctx.kappa_v0(),
        max_total_samples: ctx.max_samples,
    };
    let reports = rmse_experiment(&ctx.spec, &setup, &reference)?;
    w.write_record(["M", "N", "rmse", "stderr", "bound", "normals_mean"])?;
    for r in reports {
        if !r.reference_ok {
            eprintln!("warning: reference radius {} exceeds a tenth of rmse {} at M={}, N={}", reference.error_radius, r.rmse, r.m, r.n);
        }
        w.write_record([r.m.to_string(), r.n.to_string(), f64_field(r.rmse), f64_field(r.stderr), f64_field(r.bound), f64_field(r.normals_mean)])?;
    }
    Ok(())
}

fn cmd_complexity(ctx: &Ctx, w: &mut csv::Writer<Box<dyn Write + Send>>) -> Result<(), CliError> {
    let cc = ctx.cfg.complexity.as_ref().ok_or_else(|| CliError::Config("complexity: section is required".into()))?;
    let ee = ctx.spec.exp_euler.as_ref().expect("registry problems are exponential-Euler");
    let setup = ComplexitySetup {
        dims: cc.dims.clone(),
        eps: cc.eps.clone(),
        delta: cc.delta,
        c: cc.c.unwrap_or(ee.lipschitz_f * ee.horizon()),
        kappa: cc.kappa.unwrap_or(ctx.kappa_v0() + ee.horizon() * (ee.f)(0.0).abs()),
        steps: ctx.spec.steps(),
    };
    let table = complexity_experiment(&setup)?;
    w.write_record(["d", "eps", "N_selected", "cost_predicted", "cost_bound", "normalized"])?;
    for r in &table.rows {
        w.write_record([
            r.d.to_string(),
            f64_field(r.eps),
            r.n_selected.to_string(),
            r.cost_predicted.to_string(),
            f64_field(r.cost_bound),
            f64_field(r.normalized),
        ])?;
    }
    Ok(())
}

fn oracle_row(w: &mut csv::Writer<Box<dyn Write + Send>>, name: &str, k: usize, r: &OracleResult) -> Result<(), CliError> {
    w.write_record([name.to_string(), k.to_string(), f64_field(r.value), f64_field(r.error_radius), r.ledger.normals.to_string()])?;
    Ok(())
}

fn cmd_oracle(ctx: &Ctx, w: &mut csv::Writer<Box<dyn Write + Send>>) -> Result<(), CliError> {
    w.write_record(["method", "k", "value", "error_radius", "normals"])?;
    let big_k = ctx.spec.steps();
    let nk = ctx.nested_k();
    for k in [nk, big_k] {
        if let Some(r) = ctx.exact_at(k) {
            oracle_row(w, "closed_form", k, &r)?;
        }
        if nk == big_k {
            break;
        }
    }
    if ctx.spec.d == 1 {
        let q = quadrature_1d(&ctx.spec, ctx.cfg.oracle.grid_points, ctx.cfg.oracle.hermite_nodes)?;
        for k in 0..=big_k {
            oracle_row(w, "quadrature", k, &q.result(k))?;
        }
    }
    let r = nested_mc(&ctx.spec, nk, &ctx.spec.eval_point, ctx.cfg.oracle.nested_m, ctx.seed)?;
    oracle_row(w, "nested_mc", nk, &r)?;
    Ok(())
}

/// 99% half-width and mean of `runs` MLP replicas of `V_{k,N,N}(ξ)`.
fn mlp_mean(ctx: &Ctx, k: usize) -> Result<OracleResult, CliError> {
    let ee = ctx.spec.exp_euler.as_ref().expect("registry problems are exponential-Euler");
    let n = ctx.cfg.oracle.mlp_levels;
    let runs = ctx.cfg.oracle.mlp_runs.max(2);
    let mut values = Vec::with_capacity(runs);
    for i in 1..=runs as u64 {
        let params = MlpParams::new(n as u64, n, ctx.seed.wrapping_add(i)).with_width(ctx.threads).with_cap(ctx.max_samples);
        values.push(mlp_exp_euler(ee, &MultiIndex::root(), k, &ctx.spec.eval_point, &params)?.value);
    }
    let rf = runs as f64;
    let mean = values.iter().sum::<f64>() / rf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rf - 1.0);
    Ok(OracleResult {
        value: mean,
        // not an oracle; the label only tags the Monte Carlo radius
        method: crate::oracles::OracleMethod::NestedMc,
        error_radius: Z99 * (var / rf).sqrt(),
        ledger: Default::default(),
    })
}

/// `|a − b| ≤ z99·√(s_a² + s_b²)` for two Monte Carlo half-widths, plus the
/// radius of any deterministic side.
fn combined_ci_agree(a: &OracleResult, b: &OracleResult) -> bool {
    let floor = 1e-12 * (1.0 + a.value.abs().max(b.value.abs()));
    (a.value - b.value).abs() <= (a.error_radius.powi(2) + b.error_radius.powi(2)).sqrt() + floor
}

fn cmd_validate(ctx: &Ctx, w: &mut csv::Writer<Box<dyn Write + Send>>) -> Result<bool, CliError> {
    w.write_record(["check", "passed", "detail"])?;
    let mut all = true;
    let mut row = |w: &mut csv::Writer<Box<dyn Write + Send>>, name: &str, ok: bool, detail: String| -> Result<(), CliError> {
        all &= ok;
        w.write_record([name.to_string(), ok.to_string(), detail])?;
        Ok(())
    };

    let lip = validate_lipschitz(&ctx.spec, 10_000, ctx.seed);
    let worst = lip.violations.iter().map(|v| v.observed / v.allowed).fold(0.0, f64::max);
    row(w, "lipschitz", lip.passed(), format!("{} violations in {} probes; worst ratio {worst}", lip.violations.len(), lip.probes))?;

    let dist = IndexDistribution::from_grid(&ctx.spec.grid);
    let mut max_sigma: f64 = 0.0;
    for k in 1..=ctx.spec.steps() {
        max_sigma = max_sigma.max(index_law_check(&dist, k, 100_000, ctx.seed)?.max_sigma);
    }
    row(w, "index_law", max_sigma < 5.0, format!("max deviation {max_sigma} sigma over k = 1..{}", ctx.spec.steps()))?;

    let big_k = ctx.spec.steps();
    let nk = ctx.nested_k();
    let exact_k = ctx.exact_at(big_k);
    let exact_nk = ctx.exact_at(nk);
    let quad = if ctx.spec.d == 1 { Some(quadrature_1d(&ctx.spec, ctx.cfg.oracle.grid_points, ctx.cfg.oracle.hermite_nodes)?) } else { None };
    let nested = nested_mc(&ctx.spec, nk, &ctx.spec.eval_point, ctx.cfg.oracle.nested_m, ctx.seed)?;

    let mut pair = |w: &mut csv::Writer<Box<dyn Write + Send>>, name: &str, a: &OracleResult, b: &OracleResult| {
        let ok = a.agrees_with(b);
        row(w, name, ok, format!("{:?} ± {:?} vs {:?} ± {:?}", a.value, a.error_radius, b.value, b.error_radius))
    };
    if let (Some(e), Some(q)) = (&exact_k, &quad) {
        pair(w, "closed_form~quadrature", e, &q.result(big_k))?;
    }
    if let Some(e) = &exact_nk {
        pair(w, "closed_form~nested_mc", e, &nested)?;
    }
    if let Some(q) = &quad {
        pair(w, "quadrature~nested_mc", &q.result(nk), &nested)?;
    }
    let mlp = mlp_mean(ctx, nk)?;
    let ok = combined_ci_agree(&mlp, &nested);
    row(w, "mlp~nested_mc", ok, format!("{:?} ± {:?} vs {:?} ± {:?} at k = {nk}", mlp.value, mlp.error_radius, nested.value, nested.error_radius))?;

    if let Some(q) = &quad {
        let mut worst: f64 = 0.0;
        for k in 0..=big_k {
            for l in 0..=k {
                worst = worst.max(q.telescoping_check(k, l)?);
            }
        }
        row(w, "telescoping", worst <= 1e-8, format!("max deviation {worst:?}"))?;
        let ap = q.a_priori();
        row(w, "a_priori", ap.holds(), format!("{:?} <= {:?}", ap.lhs, ap.rhs))?;
    }
    Ok(all)
}

fn run_command(cmd: &Command) -> Result<(), CliError> {
    let (args, kind) = match cmd {
        Command::Estimate(a) => (a, 0),
        Command::Validate(a) => (a, 1),
        Command::Converge(a) => (a, 2),
        Command::Complexity(a) => (a, 3),
        Command::Oracle(a) => (a, 4),
    };
    let ctx = load(args)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.threads)
        .build()
        .map_err(|e| CliError::Io(format!("cannot start worker pool: {e}")))?;
    let mut w = csv::Writer::from_writer(open_output(&args.out)?);
    let outcome = pool.install(|| match kind {
        0 => cmd_estimate(&ctx, &mut w).map(|_| true),
        1 => cmd_validate(&ctx, &mut w),
        2 => cmd_converge(&ctx, &mut w).map(|_| true),
        3 => cmd_complexity(&ctx, &mut w).map(|_| true),
        _ => cmd_oracle(&ctx, &mut w).map(|_| true),
    });
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    match outcome? {
        true => Ok(()),
        false => Err(CliError::Validation("one or more checks failed".into())),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run_command(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("mlp: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const AFFINE: &str = r#"
version = 1
seed = 5
grid = [[2, 2], [3, 0]]
[problem]
id = "affine"
d = 1
steps = 10
horizon = 1.0
nonlinearity = { kind = "affine", alpha = 0.5, beta = 0.0 }
terminal = { kind = "constant", c = 1.0 }
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = parse_config(AFFINE).unwrap();
        assert_eq!(cfg.grid, vec![(2, 2), (3, 0)]);
        assert_eq!(cfg.runs, 200);
        assert_eq!(cfg.oracle, OracleConfig::default());
        let spec = build_problem(&cfg.problem).unwrap();
        assert_eq!(spec.steps(), 10);
        assert!((spec.lipschitz_sum() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unknown_keys_are_named() {
        let bad = AFFINE.replace("horizon = 1.0", "horizon = 1.0\nhorizn = 2.0");
        match parse_config(&bad) {
            Err(CliError::Config(m)) => assert!(m.contains("horizn"), "{m}"),
            other => panic!("{other:?}"),
        }
        let bad = AFFINE.replace("alpha = 0.5", "alfa = 0.5");
        assert!(matches!(parse_config(&bad), Err(CliError::Config(m)) if m.contains("alfa")));
        let bad = AFFINE.replace("version = 1", "version = 2");
        assert!(matches!(parse_config(&bad), Err(CliError::Config(m)) if m.contains("version")));
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = parse_config(AFFINE).unwrap();
        cfg.problem.eval_point = Some(vec![0.0, 0.0]);
        assert!(matches!(build_problem(&cfg.problem), Err(CliError::Config(m)) if m.contains("eval_point")));
        cfg.problem.eval_point = None;
        cfg.problem.steps = 0;
        assert!(build_problem(&cfg.problem).is_err());
    }

    #[test]
    fn declared_lipschitz_override() {
        let mut cfg = parse_config(AFFINE).unwrap();
        cfg.problem.lipschitz_f = Some(0.25);
        let spec = build_problem(&cfg.problem).unwrap();
        assert!(!validate_lipschitz(&spec, 1000, 1).passed());
        cfg.problem.lipschitz_f = None;
        assert!(validate_lipschitz(&build_problem(&cfg.problem).unwrap(), 1000, 1).passed());
    }

    #[test]
    fn exit_code_mapping() {
        assert_eq!(CliError::from(MlpError::Budget { predicted: 10, cap: 1 }).exit_code(), EXIT_BUDGET);
        assert_eq!(CliError::from(MlpError::Depth { k: 5, max: 4, predicted: 1 }).exit_code(), EXIT_BUDGET);
        assert_eq!(CliError::Validation(String::new()).exit_code(), EXIT_VALIDATION);
        assert_eq!(CliError::Config(String::new()).exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn shortest_round_trip_floats() {
        for v in [0.1, 1.0 / 3.0, 1.6288946267774422, 1e-300, -2.5e17] {
            assert_eq!(f64_field(v).parse::<f64>().unwrap(), v);
        }
    }
}
