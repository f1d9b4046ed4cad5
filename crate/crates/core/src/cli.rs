//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::boundary::{admissible_frontier, check_admissible, classify_boundaries, BoundaryError};
use crate::expr::parse_expr;
use crate::mc::{self, McError, Scheme, SimConfig};
use crate::model::{builtin_raw, raw_from_json, validate_model, Coefficient, MarketModel, ModelError};
use crate::oracles::AnalyticModel;
use crate::recovery::{
    recover_recurrent, recover_transient_side, recover_transient_unique, RecoveryError,
};
use crate::sturm::{
    find_beta_bar, linspace, solve_h, endpoint_tuple, Side, SturmError, Tolerances, WindowState,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;
pub const EXIT_PRECONDITION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sturm(#[from] SturmError),
    #[error(transparent)]
    Boundary(#[from] BoundaryError),
    #[error(transparent)]
    Recovery(#[from] RecoveryError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn sturm_code(e: &SturmError) -> i32 {
    match e {
        SturmError::Model(_) => EXIT_CONFIG,
        SturmError::TruncationNotConverged { .. } => EXIT_INCONCLUSIVE,
        SturmError::EmptyWindow { .. } | SturmError::NotACandidate { .. } | SturmError::OutOfDomain { .. } => {
            EXIT_PRECONDITION
        }
        _ => EXIT_FAILURE,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Model(_) | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Sturm(e) => sturm_code(e),
            CliError::Boundary(BoundaryError::InconclusiveCertificate { .. }) => EXIT_INCONCLUSIVE,
            CliError::Boundary(BoundaryError::Sturm(e)) => sturm_code(e),
            CliError::Recovery(e) if e.is_inconclusive() => EXIT_INCONCLUSIVE,
            CliError::Recovery(e) if e.is_precondition() => EXIT_PRECONDITION,
            CliError::Recovery(RecoveryError::Sturm(e)) => sturm_code(e),
            CliError::Recovery(RecoveryError::Boundary(BoundaryError::Sturm(e))) => sturm_code(e),
            CliError::Recovery(RecoveryError::Model(_)) => EXIT_CONFIG,
            CliError::Recovery(_) => EXIT_FAILURE,
            CliError::Mc(McError::InvalidConfig(_)) | CliError::Mc(McError::NonPositiveF { .. }) => EXIT_CONFIG,
            CliError::Mc(McError::ExcessDiscards { .. }) => EXIT_INCONCLUSIVE,
            CliError::Mc(_) => EXIT_FAILURE,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Model(_) => "model",
            CliError::Sturm(_) => "sturm",
            CliError::Boundary(_) => "boundary",
            CliError::Recovery(_) => "recovery",
            CliError::Mc(_) => "mc",
            CliError::Io { .. } => "io",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "recovery-kit", version, about = "Ross recovery for one-dimensional diffusion markets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Built-in model: cir, gbm, brownian, appendix_f.
    #[arg(long)]
    pub model: Option<String>,
    /// JSON model config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Parameter override NAME=VALUE (repeatable).
    #[arg(long = "param", value_parser = parse_param)]
    pub params: Vec<(String, f64)>,
    /// Output file; standard output when absent.
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
    /// Slope tolerance [default: 1e-9].
    #[arg(long)]
    pub ztol: Option<f64>,
    /// Eigenvalue bisection tolerance [default: 1e-9].
    #[arg(long)]
    pub lambda_tol: Option<f64>,
    /// Accepted ODE residual of h [default: 1e-6].
    #[arg(long)]
    pub residual_tol: Option<f64>,
    /// Integrator relative tolerance [default: 1e-10].
    #[arg(long)]
    pub rtol: Option<f64>,
    /// Integrator absolute tolerance [default: 1e-12].
    #[arg(long)]
    pub atol: Option<f64>,
    /// First truncation level [default: 8].
    #[arg(long)]
    pub start_level: Option<u32>,
    /// Lowest truncation level whose result is accepted [default: 10].
    #[arg(long)]
    pub min_level: Option<u32>,
    /// Deepest truncation level [default: 30].
    #[arg(long)]
    pub max_level: Option<u32>,
    /// Relative change at which truncation refinement stops [default: 1e-8].
    #[arg(long)]
    pub truncation_tol: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SideArg {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EndpointArg {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    EulerMaruyama,
    LogEuler,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Candidate and admissible sets on a lambda grid, as CSV.
    Frontier {
        #[command(flatten)]
        common: Common,
        /// START:END:COUNT.
        #[arg(long, allow_hyphen_values = true)]
        lambda_grid: String,
        /// Add closed-form columns for built-in models.
        #[arg(long)]
        oracle: bool,
    },
    /// Boundary attraction and explosion tests for one tuple, as JSON.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_negative_numbers = true)]
        lambda: f64,
        /// Slope at xi; use --endpoint for m or M.
        #[arg(long, conflicts_with = "endpoint", allow_negative_numbers = true)]
        z: Option<f64>,
        #[arg(long)]
        endpoint: Option<EndpointArg>,
    },
    /// The largest eigenvalue with a positive solution, as JSON.
    BetaBar {
        #[command(flatten)]
        common: Common,
    },
    /// Recovered principal pair and objective drift, as JSON.
    Recover {
        #[command(flatten)]
        common: Common,
        /// Known eigenvalue (transient recovery); recurrent recovery without it.
        #[arg(long, allow_negative_numbers = true)]
        beta: Option<f64>,
        /// Boundary known to be non-attracting under the objective measure.
        #[arg(long, requires = "beta")]
        side: Option<SideArg>,
    },
    /// Monte Carlo estimates per record time, as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        /// Record times besides the horizon, comma separated.
        #[arg(long, value_delimiter = ',')]
        times: Vec<f64>,
        /// With --z: report the martingale test of (lambda, z) instead of E[1/G].
        #[arg(long, requires = "z", allow_negative_numbers = true)]
        lambda: Option<f64>,
        #[arg(long, requires = "lambda", allow_negative_numbers = true)]
        z: Option<f64>,
    },
    /// Long-term yield over a ladder of horizons, as JSON.
    Yield {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        /// Horizons, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
        ladder: Vec<f64>,
    },
}

#[derive(Debug, Args, Clone)]
pub struct SimArgs {
    /// Simulated horizon; with --steps it fixes the time step, which `yield` keeps over its ladder.
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    /// Time steps over the horizon.
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub scheme: Option<SchemeArg>,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected NAME=VALUE, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|_| format!("bad value in `{s}`"))?;
    Ok((k.trim().to_string(), v))
}

/// `START:END:COUNT`.
pub fn parse_lambda_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("bad lambda grid `{s}`; expected START:END:COUNT"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let b: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() || (n > 1 && b < a) {
        return Err(bad());
    }
    Ok(linspace(a, b, n))
}

/// Loaded model and tolerances, with the pieces of the reproducibility header.
struct Setup {
    model: MarketModel,
    tol: Tolerances,
    config_hash: String,
    model_json: Value,
}

fn setup(c: &Common) -> Result<Setup, CliError> {
    let overrides: BTreeMap<String, f64> = c.params.iter().cloned().collect();
    let raw = match (&c.model, &c.config) {
        (Some(name), None) => builtin_raw(name, &overrides)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            let doc: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{} is not valid JSON: {e}", path.display())))?;
            raw_from_json(&doc, &overrides)?
        }
        (Some(_), Some(_)) => return Err(CliError::Config("give either --model or --config, not both".into())),
        (None, None) => return Err(CliError::Config("one of --model or --config is required".into())),
    };
    let mut model = validate_model(&raw)?;
    let t = &mut model.truncation;
    if let Some(v) = c.start_level {
        t.start_level = v;
    }
    if let Some(v) = c.min_level {
        t.min_level = v;
    }
    if let Some(v) = c.max_level {
        t.max_level = v;
    }
    if let Some(v) = c.truncation_tol {
        t.tol = v;
    }
    if !(t.start_level <= t.min_level && t.min_level <= t.max_level) {
        return Err(CliError::Config(format!(
            "truncation levels must satisfy start <= min <= max, got {} {} {}",
            t.start_level, t.min_level, t.max_level
        )));
    }
    let mut tol = Tolerances::default();
    for (slot, v) in [
        (&mut tol.ztol, c.ztol),
        (&mut tol.lambda_tol, c.lambda_tol),
        (&mut tol.residual_tol, c.residual_tol),
        (&mut tol.rtol, c.rtol),
        (&mut tol.atol, c.atol),
    ] {
        if let Some(v) = v {
            if !(v > 0.0) {
                return Err(CliError::Config(format!("tolerances must be positive, got {v}")));
            }
            *slot = v;
        }
    }
    let model_json = model.to_json();
    let canonical = serde_json::to_string(&json!({
        "model": model_json,
        "truncation": model.truncation,
    }))
    .expect("model JSON serializes");
    let config_hash = hex::encode(Sha256::digest(canonical.as_bytes()));
    Ok(Setup {
        model,
        tol,
        config_hash,
        model_json,
    })
}

fn header(s: &Setup, command: &str, seed: Option<u64>) -> Value {
    json!({
        "tool": "recovery-kit",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_hash": s.config_hash,
        "seed": seed,
        "tolerances": s.tol,
        "truncation": s.model.truncation,
        "model": s.model_json,
    })
}

fn csv_with_header(h: &Value, body: &str) -> String {
    let mut out = String::new();
    for line in serde_json::to_string_pretty(h).expect("header serializes").lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str(body);
    out
}

fn json_with_header<T: Serialize>(h: Value, key: &str, body: &T) -> String {
    let mut doc = serde_json::Map::new();
    doc.insert("header".into(), h);
    doc.insert(key.into(), serde_json::to_value(body).expect("result serializes"));
    let mut s = serde_json::to_string_pretty(&Value::Object(doc)).expect("document serializes");
    s.push('\n');
    s
}

fn emit(output: &Option<PathBuf>, text: &str) -> Result<(), CliError> {
    match output {
        Some(p) => fs::write(p, text).map_err(|source| CliError::Io {
            path: p.display().to_string(),
            source,
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            })
        }
    }
}

fn sim_config(a: &SimArgs) -> SimConfig {
    let mut c = SimConfig::new(a.horizon, a.steps, a.paths, a.seed);
    c.scheme = a.scheme.map(|s| match s {
        SchemeArg::EulerMaruyama => Scheme::EulerMaruyama,
        SchemeArg::LogEuler => Scheme::LogEuler,
    });
    c
}

fn run_frontier(common: &Common, grid: &str, oracle: bool) -> Result<(), CliError> {
    let s = setup(common)?;
    let lambdas = parse_lambda_grid(grid)?;
    let (mut fr, _) = admissible_frontier(&s.model, &lambdas, &s.tol)?;
    if oracle {
        let a = AnalyticModel::for_model(&s.model)
            .ok_or_else(|| CliError::Config("--oracle needs a built-in model".into()))?;
        let (om, obm): (Vec<_>, Vec<_>) = lambdas.iter().map(|&l| a.window(l)).unzip();
        fr.oracle_m = Some(om);
        fr.oracle_big_m = Some(obm);
    }
    emit(&common.output, &csv_with_header(&header(&s, "frontier", None), &fr.to_csv()))
}

fn run_classify(common: &Common, lambda: f64, z: Option<f64>, endpoint: Option<EndpointArg>) -> Result<(), CliError> {
    let s = setup(common)?;
    let tuple = match (z, endpoint) {
        (Some(z), _) => solve_h(&s.model, lambda, z, &s.tol)?,
        (None, Some(e)) => {
            let st = WindowState::compute(&s.model, lambda, &s.tol)?;
            if let Some(err) = st.truncation_error() {
                return Err(err.into());
            }
            endpoint_tuple(&s.model, &st, matches!(e, EndpointArg::Max), &s.tol)?
        }
        (None, None) => return Err(CliError::Config("give --z or --endpoint".into())),
    };
    let report = classify_boundaries(&s.model, &tuple, &s.tol)?;
    let adm = check_admissible(&s.model, &tuple, &s.tol)?;
    let body = json!({ "boundary": report, "admissibility": adm });
    emit(&common.output, &json_with_header(header(&s, "classify", None), "result", &body))
}

fn run_beta_bar(common: &Common) -> Result<(), CliError> {
    let s = setup(common)?;
    let bb = find_beta_bar(&s.model, &s.tol)?;
    let mut body = serde_json::to_value(&bb).expect("beta_bar serializes");
    if let Some(a) = AnalyticModel::for_model(&s.model) {
        body["oracle_beta_bar"] = json!(a.beta_bar());
    }
    emit(&common.output, &json_with_header(header(&s, "beta-bar", None), "result", &body))
}

fn run_recover(common: &Common, beta: Option<f64>, side: Option<SideArg>) -> Result<(), CliError> {
    let s = setup(common)?;
    let res = match (beta, side) {
        (None, _) => recover_recurrent(&s.model, &s.tol)?,
        (Some(b), None) => recover_transient_unique(&s.model, b, &s.tol)?,
        (Some(b), Some(side)) => {
            let side = match side {
                SideArg::Left => Side::Left,
                SideArg::Right => Side::Right,
            };
            recover_transient_side(&s.model, b, side, &s.tol)?
        }
    };
    emit(&common.output, &json_with_header(header(&s, "recover", None), "result", &res))
}

fn run_simulate(common: &Common, sim: &SimArgs, times: &[f64], tuple: Option<(f64, f64)>) -> Result<(), CliError> {
    let s = setup(common)?;
    let mut cfg = sim_config(sim);
    cfg.record = times.to_vec();
    let h = match tuple {
        Some((l, z)) => Some((l, solve_h(&s.model, l, z, &s.tol)?)),
        None => None,
    };
    let ens = mc::simulate_Q(&s.model, &cfg)?;
    let mut body = String::from("T,estimate,SE,discards\n");
    for (j, &t) in ens.times.iter().enumerate() {
        let e = match &h {
            Some((l, tup)) => mc::EstimateWithCI::from_samples(mc::martingale_samples(&ens, j, *l, &tup.h, s.model.xi)?),
            None => mc::EstimateWithCI::from_samples((0..cfg.paths).map(|p| {
                let alive = ens.absorbed[p].is_none_or(|a| a > t);
                alive.then(|| (-ens.ln_g[j][p]).exp())
            })),
        };
        body.push_str(&format!("{t},{},{},{}\n", e.estimate, e.se, e.discards));
    }
    emit(&common.output, &csv_with_header(&header(&s, "simulate", Some(sim.seed)), &body))
}

fn run_yield(common: &Common, sim: &SimArgs, ladder: &[f64]) -> Result<(), CliError> {
    let s = setup(common)?;
    let y = mc::long_term_yield(&s.model, ladder, &sim_config(sim))?;
    emit(&common.output, &json_with_header(header(&s, "yield", Some(sim.seed)), "result", &y))
}

/// Runs a parsed command.
pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Frontier {
            common,
            lambda_grid,
            oracle,
        } => run_frontier(common, lambda_grid, *oracle),
        Command::Classify {
            common,
            lambda,
            z,
            endpoint,
        } => run_classify(common, *lambda, *z, *endpoint),
        Command::BetaBar { common } => run_beta_bar(common),
        Command::Recover { common, beta, side } => run_recover(common, *beta, *side),
        Command::Simulate {
            common,
            sim,
            times,
            lambda,
            z,
        } => run_simulate(common, sim, times, lambda.zip(*z)),
        Command::Yield { common, sim, ladder } => run_yield(common, sim, ladder),
    }
}

/// Parses `argv`, runs it, and returns the process exit code. Errors are
/// reported as JSON on standard error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = e.exit_code();
            let detail = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
            eprintln!("{detail}");
            code
        }
    }
}

/// Parses a reference function for [`mc::reference_function_rate`].
pub fn parse_function(source: &str, params: &BTreeMap<String, f64>) -> Result<Coefficient, CliError> {
    parse_expr(source, params)
        .map(Coefficient::new)
        .map_err(|e| CliError::Config(format!("cannot parse `{source}`: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_grid_parsing() {
        let g = parse_lambda_grid("0:0.05125:50").unwrap();
        assert_eq!(g.len(), 50);
        assert_eq!(g[49], 0.05125);
        assert!(parse_lambda_grid("0:1").is_err());
        assert!(parse_lambda_grid("1:0:3").is_err());
        assert!(parse_lambda_grid("0:1:0").is_err());
    }

    #[test]
    fn unknown_flags_are_rejected() {
        assert_eq!(run(["recovery-kit", "beta-bar", "--model", "gbm", "--bogus"]), EXIT_CONFIG);
    }

    #[test]
    fn param_overrides_parse() {
        assert_eq!(parse_param("a=2").unwrap(), ("a".to_string(), 2.0));
        assert!(parse_param("a").is_err());
    }
}
