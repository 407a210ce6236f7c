//! Command-line front end.
//!
//! Every long flag can also be given in a flat `key = value` config file
//! (`--config FILE`); keys are flag names without the leading dashes.
//! Flags on the command line override file entries.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use crate::correlation::CorrelationKind;
use crate::data::{validate_dataset, ClusteredDataset};
use crate::error::{Error, Result};
use crate::io::{self, CoefficientRow};
use crate::km::fit_at;
use crate::simulation::{self, ErrorMarginal, Method, Rule, SimulationScenario, StudyOptions, Weighting};
use crate::solver::{FitResult, PenaltyFamily, PenaltyScale, PenaltySpec, Solver, SolverConfig};
use crate::tuning::{self, TuneConfig};
use crate::variance::{resample_variance, MultiplierLaw, ResampleConfig};

#[derive(Debug, Parser)]
#[command(name = "strataft", version, about = "Penalized Buckley-James GEE for clustered AFT data under stratified sampling")]
pub struct Cli {
    /// Flat `key = value` file supplying defaults for any long flag.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a data file against the schema and design invariants.
    #[command(args_override_self = true)]
    Validate(DataArgs),
    /// Fit at a single λ.
    #[command(args_override_self = true)]
    Fit(FitArgs),
    /// Cross-validate over a λ grid and refit at the selected λ.
    #[command(args_override_self = true)]
    Select(SelectArgs),
    /// Multiplier-resampling standard errors after a fit.
    #[command(args_override_self = true)]
    Variance(VarianceArgs),
    /// Monte Carlo study.
    #[command(args_override_self = true)]
    Simulate(SimulateArgs),
    /// Weighted Kaplan-Meier of the residuals at a given β.
    #[command(args_override_self = true)]
    Km(KmArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV with cluster_id, member_id, time or log_time, status, stratum, then covariates
    #[arg(long)]
    pub data: PathBuf,
    /// Per-stratum cohort and sampled counts (stratum,cohort,sampled).
    #[arg(long)]
    pub strata_counts: Option<PathBuf>,
    /// Force every sampled cluster's weight to one.
    #[arg(long)]
    pub unweighted: bool,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// none, lasso or scad.
    #[arg(long)]
    pub penalty: Option<String>,
    #[arg(long, default_value_t = 0.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = crate::solver::DEFAULT_SCAD_A)]
    pub scad_a: f64,
    /// independence, exchangeable or unstructured.
    #[arg(long, default_value = "independence")]
    pub corstr: String,
    /// Comma-separated covariate names never penalized.
    #[arg(long)]
    pub exempt: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub zeta: f64,
    #[arg(long, default_value_t = 50)]
    pub max_inner: usize,
    #[arg(long, default_value_t = 100)]
    pub max_outer: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub coef_cutoff: f64,
    /// sampled or cohort.
    #[arg(long, default_value = "sampled")]
    pub penalty_scale: String,
    /// wols, zeros or file.
    #[arg(long, default_value = "wols")]
    pub init: String,
    /// Coefficient CSV used with `--init file`.
    #[arg(long)]
    pub init_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Output directory; tables go to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_min_ratio: f64,
    #[arg(long, default_value_t = 50)]
    pub n_lambda: usize,
    /// Explicit descending grid (comma-separated); overrides the automatic grid.
    #[arg(long)]
    pub lambdas: Option<String>,
    /// cv or 1se.
    #[arg(long, default_value = "cv")]
    pub rule: String,
    #[arg(long, env = "STRATAFT_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VarianceArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// exp or twopoint.
    #[arg(long, default_value = "exp")]
    pub multiplier: String,
    /// Resample every column instead of the active set only.
    #[arg(long)]
    pub all_columns: bool,
    #[arg(long, env = "STRATAFT_SEED", default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file (flat key = value).
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, env = "STRATAFT_SEED")]
    pub seed: Option<u64>,
    /// SN, SL or SG.
    #[arg(long)]
    pub marginal: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub censoring: Option<f64>,
    #[arg(long)]
    pub n_cohort: Option<usize>,
    /// Comma-separated labels such as weighted-ex-scad1,unweighted-wi-oracle.
    #[arg(long, default_value = "weighted-ex-scad1,weighted-ex-scad2,weighted-ex-oracle,unweighted-ex-scad1,unweighted-ex-scad2,unweighted-ex-oracle")]
    pub methods: String,
    /// Resampling standard errors for the focus coefficient.
    #[arg(long)]
    pub variance: bool,
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 50)]
    pub n_lambda: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lambda_min_ratio: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct KmArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated coefficients; zeros when omitted.
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses a flat `key = value` file. `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("config line {}: expected key = value", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::InvalidConfig(format!("config line {}: duplicate key '{key}'", i + 1)));
        }
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

/// Inserts config-file entries as flags right after the subcommand so that
/// later command-line occurrences override them.
fn inject_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let entries = parse_kv(&std::fs::read_to_string(&path)?)?;
    let root = Cli::command();
    let names: Vec<String> = root.get_subcommands().map(|c| c.get_name().to_string()).collect();
    let Some(pos) = args.iter().position(|a| names.iter().any(|n| a.to_string_lossy() == *n)) else {
        return Ok(args);
    };
    let sub_name = args[pos].to_string_lossy().to_string();
    let sub = root.find_subcommand(&sub_name).expect("known subcommand");
    let mut injected = Vec::new();
    for (key, value) in entries {
        let arg = sub
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown config key '{key}' for {sub_name}")))?;
        if key == "config" {
            continue;
        }
        if arg.get_action().takes_values() {
            injected.push(OsString::from(format!("--{key}={value}")));
        } else {
            match value.to_ascii_lowercase().as_str() {
                "true" | "1" | "yes" => injected.push(OsString::from(format!("--{key}"))),
                "false" | "0" | "no" => {}
                _ => return Err(Error::InvalidConfig(format!("config key '{key}' expects true or false"))),
            }
        }
    }
    let mut out = args[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&args[pos + 1..]);
    Ok(out)
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match inject_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    crate::par::set_workers(cli.workers);
    let result = match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Variance(a) => cmd_variance(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Km(a) => cmd_km(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load(a: &DataArgs) -> Result<ClusteredDataset> {
    let ds = io::read_dataset_path(&a.data, a.strata_counts.as_deref())?;
    validate_dataset(&ds).into_result()?;
    Ok(if a.unweighted { ds.unweighted() } else { ds })
}

/// Writes `name` under `out`, or to stdout when no directory is given.
fn emit(out: &Option<PathBuf>, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let mut file = std::fs::File::create(dir.join(name))?;
            f(&mut file)
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    }
}

fn emit_summary(out: &Option<PathBuf>, summary: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).expect("json");
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("summary.json"), text + "\n")?;
        }
        None => eprintln!("{text}"),
    }
    Ok(())
}

struct Model {
    spec: PenaltySpec,
    config: SolverConfig,
    kind: CorrelationKind,
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("'{t}' is not a number")))
        })
        .collect()
}

fn build_model(m: &ModelArgs, ds: &ClusteredDataset, default_penalty: PenaltyFamily) -> Result<Model> {
    let family = match &m.penalty {
        Some(s) => s.parse()?,
        None => default_penalty,
    };
    let mut exempt = vec![false; ds.p];
    if let Some(list) = &m.exempt {
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let j = ds
                .covariate_names
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::InvalidConfig(format!("exempt covariate '{name}' not in data")))?;
            exempt[j] = true;
        }
    }
    let spec = PenaltySpec {
        family,
        lambda: m.lambda,
        a: m.scad_a,
        exempt,
    };
    spec.validate(ds.p)?;
    let penalty_scale = match m.penalty_scale.as_str() {
        "sampled" => PenaltyScale::Sampled,
        "cohort" => PenaltyScale::Cohort,
        other => return Err(Error::InvalidConfig(format!("penalty-scale must be sampled or cohort, got '{other}'"))),
    };
    let config = SolverConfig {
        zeta: m.zeta,
        gamma: m.gamma,
        max_inner: m.max_inner,
        max_outer: m.max_outer,
        coef_cutoff: m.coef_cutoff,
        penalty_scale,
    };
    config.validate()?;
    Ok(Model {
        spec,
        config,
        kind: m.corstr.parse()?,
    })
}

fn initial_beta(m: &ModelArgs, solver: &Solver, ds: &ClusteredDataset) -> Result<Vec<f64>> {
    match m.init.as_str() {
        "wols" => solver.wols(),
        "zeros" => Ok(vec![0.0; ds.p]),
        "file" => {
            let path = m
                .init_file
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("--init file needs --init-file".into()))?;
            let rows = io::read_coefficients(std::fs::File::open(path)?)?;
            ds.covariate_names
                .iter()
                .map(|name| {
                    rows.iter()
                        .find(|r| &r.name == name)
                        .map(|r| r.estimate)
                        .ok_or_else(|| Error::Input(format!("initial value for '{name}' missing")))
                })
                .collect()
        }
        other => Err(Error::InvalidConfig(format!("init must be wols, zeros or file, got '{other}'"))),
    }
}

fn coefficient_rows(ds: &ClusteredDataset, fit: &FitResult) -> Vec<CoefficientRow> {
    ds.covariate_names
        .iter()
        .enumerate()
        .map(|(j, name)| CoefficientRow {
            name: name.clone(),
            estimate: fit.beta[j],
            selected: fit.active_set.contains(&j),
            se: None,
            ci_lower: None,
            ci_upper: None,
        })
        .collect()
}

fn fit_summary(fit: &FitResult, spec: &PenaltySpec, kind: CorrelationKind) -> serde_json::Value {
    json!({
        "converged": fit.converged,
        "outer_iterations": fit.outer_iters,
        "inner_iterations": fit.inner_iters,
        "trace": fit.trace,
        "alpha_hat": finite_or_null(fit.alpha_hat),
        "phi_hat": finite_or_null(fit.phi_hat),
        "correlation_projected": fit.correlation.projected,
        "corstr": kind.to_string(),
        "penalty": spec.family.to_string(),
        "lambda": spec.lambda,
        "active_set": fit.active_set,
    })
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn cmd_validate(a: &DataArgs) -> Result<i32> {
    let ds = io::read_dataset_path(&a.data, a.strata_counts.as_deref())?;
    let report = validate_dataset(&ds);
    println!("{report}");
    Ok(if report.passed() { 0 } else { 1 })
}

fn cmd_fit(a: &FitArgs) -> Result<i32> {
    let ds = load(&a.data)?;
    let model = build_model(&a.model, &ds, PenaltyFamily::None)?;
    let solver = Solver::new(&ds, model.kind, &model.config)?;
    let init = initial_beta(&a.model, &solver, &ds)?;
    let fit = solver.fit(&model.spec, &model.config, &init)?;
    emit(&a.out, "coefficients.csv", |w| io::write_coefficients(&coefficient_rows(&ds, &fit), w))?;
    emit_summary(&a.out, &fit_summary(&fit, &model.spec, model.kind))?;
    Ok(if fit.converged { 0 } else { 2 })
}

fn cmd_select(a: &SelectArgs) -> Result<i32> {
    let ds = load(&a.data)?;
    let model = build_model(&a.model, &ds, PenaltyFamily::Scad)?;
    if model.spec.family == PenaltyFamily::None {
        return Err(Error::InvalidConfig("select needs a penalty (lasso or scad)".into()));
    }
    let use_1se = match a.rule.as_str() {
        "cv" => false,
        "1se" => true,
        other => return Err(Error::InvalidConfig(format!("rule must be cv or 1se, got '{other}'"))),
    };
    let solver = Solver::new(&ds, model.kind, &model.config)?;
    let start = initial_beta(&a.model, &solver, &ds)?;
    let (lambda_max, grid) = match &a.lambdas {
        Some(list) => (None, parse_list(list)?),
        None => {
            let lmax = tuning::lambda_max(&solver, &model.spec, &model.config, &start)?;
            (Some(lmax), tuning::lambda_grid(lmax, a.lambda_min_ratio, a.n_lambda)?)
        }
    };
    let plan = tuning::make_folds(&ds, a.folds, a.seed)?;
    let curve = tuning::cv_curve(&ds, &plan, &grid, &model.spec, &model.config, model.kind)?;
    let chosen = if use_1se { curve.lambda_1se } else { curve.lambda_cv };
    let fit = solver.fit(&model.spec.with_lambda(chosen), &model.config, &start)?;
    emit(&a.out, "curve.csv", |w| io::write_curve(&curve, w))?;
    emit(&a.out, "coefficients.csv", |w| io::write_coefficients(&coefficient_rows(&ds, &fit), w))?;
    let mut summary = fit_summary(&fit, &model.spec.with_lambda(chosen), model.kind);
    summary["lambda_max"] = lambda_max.map_or(serde_json::Value::Null, |v| json!(v));
    summary["lambda_cv"] = json!(curve.lambda_cv);
    summary["lambda_1se"] = json!(curve.lambda_1se);
    summary["se_at_cvmin"] = json!(curve.se_at_cvmin);
    summary["rule"] = json!(a.rule);
    summary["folds"] = json!(a.folds);
    summary["seed"] = json!(a.seed);
    summary["warnings"] = json!(curve.warnings);
    emit_summary(&a.out, &summary)?;
    Ok(if fit.converged { 0 } else { 2 })
}

fn cmd_variance(a: &VarianceArgs) -> Result<i32> {
    let ds = load(&a.data)?;
    let model = build_model(&a.model, &ds, PenaltyFamily::None)?;
    let solver = Solver::new(&ds, model.kind, &model.config)?;
    let init = initial_beta(&a.model, &solver, &ds)?;
    let fit = solver.fit(&model.spec, &model.config, &init)?;
    if !fit.converged {
        emit(&a.out, "coefficients.csv", |w| io::write_coefficients(&coefficient_rows(&ds, &fit), w))?;
        emit_summary(&a.out, &fit_summary(&fit, &model.spec, model.kind))?;
        return Ok(2);
    }
    let rconfig = ResampleConfig {
        replicates: a.replicates,
        multiplier_law: a.multiplier.parse::<MultiplierLaw>()?,
        seed: a.seed,
        refit_active_only: !a.all_columns,
        level: a.level,
    };
    let v = resample_variance(&ds, &fit, &rconfig, &model.config, model.kind)?;
    let rows: Vec<CoefficientRow> = ds
        .covariate_names
        .iter()
        .enumerate()
        .map(|(j, name)| match v.columns.iter().position(|&c| c == j) {
            Some(k) => CoefficientRow {
                name: name.clone(),
                estimate: v.estimate[k],
                selected: true,
                se: v.se.get(k).copied(),
                ci_lower: v.ci_lower.get(k).copied(),
                ci_upper: v.ci_upper.get(k).copied(),
            },
            None => CoefficientRow {
                name: name.clone(),
                estimate: 0.0,
                selected: false,
                se: None,
                ci_lower: None,
                ci_upper: None,
            },
        })
        .collect();
    emit(&a.out, "coefficients.csv", |w| io::write_coefficients(&rows, w))?;
    let mut summary = fit_summary(&fit, &model.spec, model.kind);
    summary["b_requested"] = json!(v.b_requested);
    summary["b_effective"] = json!(v.b_effective);
    summary["unreliable"] = json!(v.unreliable);
    summary["level"] = json!(v.level);
    summary["multiplier"] = json!(rconfig.multiplier_law.to_string());
    summary["seed"] = json!(a.seed);
    summary["note"] = json!(v.note);
    emit_summary(&a.out, &summary)?;
    Ok(0)
}

/// Scenario keys: n-cohort, k, p, beta-true, marginal, tau, censoring,
/// inclusion-probs, replications, seed.
pub fn parse_scenario(text: &str) -> Result<SimulationScenario> {
    let mut s = SimulationScenario::default();
    let num = |k: &str, v: &str| -> Result<f64> {
        v.parse().map_err(|_| Error::InvalidConfig(format!("scenario key '{k}': '{v}' is not a number")))
    };
    let int = |k: &str, v: &str| -> Result<usize> {
        v.parse().map_err(|_| Error::InvalidConfig(format!("scenario key '{k}': '{v}' is not an integer")))
    };
    for (k, v) in parse_kv(text)? {
        match k.as_str() {
            "n-cohort" => s.n_cohort = int(&k, &v)?,
            "k" => s.k = int(&k, &v)?,
            "p" => s.p = int(&k, &v)?,
            "beta-true" => s.beta_true = parse_list(&v)?,
            "marginal" => s.error_marginal = v.parse()?,
            "tau" => s.kendall_tau = num(&k, &v)?,
            "censoring" => s.censoring_target = num(&k, &v)?,
            "inclusion-probs" => s.inclusion_probs = parse_list(&v)?,
            "replications" => s.replications = int(&k, &v)?,
            "seed" => s.seed = int(&k, &v)? as u64,
            other => return Err(Error::InvalidConfig(format!("unknown scenario key '{other}'"))),
        }
    }
    Ok(s)
}

pub fn parse_method(label: &str, variance: bool) -> Result<Method> {
    let parts: Vec<&str> = label.trim().split('-').collect();
    let bad = || Error::InvalidConfig(format!("method '{label}' must look like weighted-ex-scad1"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let weighting = match parts[0] {
        "weighted" => Weighting::Weighted,
        "unweighted" => Weighting::Unweighted,
        _ => return Err(bad()),
    };
    let structure: CorrelationKind = parts[1].parse().map_err(|_| bad())?;
    let rule = match parts[2] {
        "scad1" => Rule::Scad1,
        "scad2" => Rule::Scad2,
        "oracle" => Rule::Oracle,
        _ => return Err(bad()),
    };
    Ok(Method::new(weighting, structure, rule, variance))
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let mut scenario = match &a.scenario {
        Some(p) => parse_scenario(&std::fs::read_to_string(p)?)?,
        None => SimulationScenario::default(),
    };
    if let Some(r) = a.reps {
        scenario.replications = r;
    }
    if let Some(s) = a.seed {
        scenario.seed = s;
    }
    if let Some(m) = &a.marginal {
        scenario.error_marginal = m.parse::<ErrorMarginal>()?;
    }
    if let Some(t) = a.tau {
        scenario.kendall_tau = t;
    }
    if let Some(c) = a.censoring {
        scenario.censoring_target = c;
    }
    if let Some(n) = a.n_cohort {
        scenario.n_cohort = n;
    }
    scenario.validate()?;
    let methods = a
        .methods
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|m| parse_method(m, a.variance))
        .collect::<Result<Vec<_>>>()?;
    let options = StudyOptions {
        tune: TuneConfig {
            folds: a.folds,
            n_lambda: a.n_lambda,
            lambda_min_ratio: a.lambda_min_ratio,
            seed: scenario.seed,
        },
        resample: ResampleConfig {
            replicates: a.replicates,
            seed: scenario.seed,
            ..ResampleConfig::default()
        },
        ..StudyOptions::default()
    };
    let result = simulation::run_study(&scenario, &methods, &options)?;
    io::write_study(&result, &a.out)?;
    let summary = json!({
        "scenario": scenario,
        "kappa": result.kappa,
        "mean_sampled_clusters": result.mean_sampled,
        "mean_censoring_rate": result.mean_censoring,
        "failures": result.failures.len(),
        "methods": result.summaries,
    });
    std::fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json") + "\n")?;
    Ok(0)
}

fn cmd_km(a: &KmArgs) -> Result<i32> {
    let ds = load(&a.data)?;
    let beta = match &a.beta {
        Some(s) => parse_list(s)?,
        None => vec![0.0; ds.p],
    };
    if beta.len() != ds.p {
        return Err(Error::DimensionMismatch {
            expected: ds.p,
            found: beta.len(),
        });
    }
    let surv = fit_at(&ds, &beta)?;
    emit(&a.out, "km.csv", |w| io::write_km(&surv, w))?;
    Ok(0)
}

/// Convenience for tests and scripts: runs with `strataft` as argv[0].
pub fn run_args(args: &[&str]) -> i32 {
    run(std::iter::once("strataft").chain(args.iter().copied()))
}
