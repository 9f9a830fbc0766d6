//! The `gca` command-line program.
//!
//! Every run writes `resolved.toml` next to its outputs. It holds the full
//! configuration with the seed filled in, and `gca replay` reruns it
//! bit-identically.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{GcaError, Result};
use crate::fitting::{irw_fit, Design, IrwConfig};
use crate::inference::{bootstrap, quantile_curves, residual_diagnostics, select_model, BootstrapConfig, CurveGroup};
use crate::io::{self, build_design, CovValue, CovariateKind, LongFormatTable, MeanModel, ModelFormulaConfig};
use crate::model::{FitResult, VarianceModel};
use crate::simulation::{run_scenario, ScenarioConfig, ScenarioReport};
use crate::spline::{basis_derivative, eval_basis, SplineFamily, SplineSpec};

pub const SEED_ENV: &str = "GCA_SEED";

#[derive(Debug, Parser)]
#[command(name = "gca", version, about = "Growth curves with shape-restricted heteroscedastic errors")]
pub struct Cli {
    /// Random seed; overrides the config file and the GCA_SEED variable.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for bootstrap and simulation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Number of bootstrap replicates.
    #[arg(long, global = true)]
    pub bootstrap_reps: Option<usize>,
    /// Gauss-Hermite nodes for the conditional-mean likelihood.
    #[arg(long, global = true)]
    pub quad_nodes: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a spline basis and print it as CSV.
    Basis {
        #[arg(long, default_value = "I")]
        family: String,
        #[arg(long)]
        degree: usize,
        #[arg(long)]
        df: usize,
        #[arg(long)]
        lower: f64,
        #[arg(long)]
        upper: f64,
        /// Comma-separated evaluation points.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Vec<f64>,
        /// Evenly spaced evaluation points instead of `--x`.
        #[arg(long)]
        grid: Option<usize>,
        /// Print derivatives instead of values.
        #[arg(long)]
        derivative: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one model: fit.csv, fit.json, variance.csv, qq.csv.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit plus parametric bootstrap: adds bootstrap.csv and band.csv.
    Bootstrap {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a grid of variance models and rank them: report.csv.
    Select {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit plus reference quantile curves: curves.csv.
    Curves {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation scenario: report.csv, report.txt, band.csv.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an example data set as CSV (`chickweight` or `pancreas_synthetic`).
    Data {
        name: String,
        /// Size of the synthetic data set.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rerun a logged `resolved.toml`.
    Replay {
        resolved: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolvedRun {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelFormulaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioConfig>,
}

/// Maps an error to the process exit code: 1 usage, 2 data, 3 numerical failure.
pub fn exit_code(e: &GcaError) -> i32 {
    match e {
        GcaError::MissingColumn(_)
        | GcaError::Parse { .. }
        | GcaError::EmptyData(_)
        | GcaError::UnknownSubject(_)
        | GcaError::Io(_)
        | GcaError::RankDeficient(_)
        | GcaError::DimensionMismatch(_)
        | GcaError::OutOfRange { .. } => 2,
        GcaError::NonConvergence(_)
        | GcaError::AllCandidatesFailed
        | GcaError::QuadratureFailure(_)
        | GcaError::EmptyReplicates
        | GcaError::SingularCovariance(_)
        | GcaError::NonPositiveVariance { .. } => 3,
        GcaError::InvalidSpec(_)
        | GcaError::InvalidArgument(_)
        | GcaError::UnsupportedDimension(_)
        | GcaError::UnsupportedFormula(_)
        | GcaError::Config(_) => 1,
    }
}

/// Full-precision number for machine-readable files.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        x.to_string()
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf8")
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Writes every file or none: on failure the files already written are removed.
fn write_all(dir: &Path, files: &[(String, String)]) -> Result<()> {
    let mut done: Vec<PathBuf> = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        if let Err(e) = write_atomic(&path, body) {
            for p in &done {
                let _ = std::fs::remove_file(p);
            }
            return Err(e);
        }
        done.push(path);
    }
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| GcaError::Io(format!("{}: {e}", path.display())))
}

/// Seed precedence: command line, config file, environment, built-in default.
fn resolve_seed(flag: Option<u64>, in_file: Option<u64>, default: u64) -> Result<u64> {
    if let Some(s) = flag.or(in_file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| GcaError::Config(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(default),
    }
}

fn resolve_model(cli: &Cli, path: &Path) -> Result<ModelFormulaConfig> {
    let mut cfg = ModelFormulaConfig::from_toml_str(&read_to_string(path)?)?;
    let seed = resolve_seed(cli.seed, cfg.seed, IrwConfig::default().seed)?;
    cfg.seed = Some(seed);
    cfg.fit.seed = seed;
    if let Some(r) = cli.bootstrap_reps {
        cfg.bootstrap.n_rep = r;
    }
    if let Some(q) = cli.quad_nodes {
        cfg.fit.n_quad = q;
    }
    if let Some(p) = &cfg.data.path {
        let base = path.parent().unwrap_or(Path::new("."));
        let full = if p.is_absolute() { p.clone() } else { base.join(p) };
        cfg.data.path = Some(std::fs::canonicalize(&full).map_err(|e| GcaError::Io(format!("{}: {e}", full.display())))?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_scenario(cli: &Cli, path: &Path) -> Result<ScenarioConfig> {
    let text = read_to_string(path)?;
    let raw: toml::Table = toml::from_str(&text).map_err(|e| GcaError::Config(e.to_string()))?;
    let mut cfg: ScenarioConfig = toml::from_str(&text).map_err(|e| GcaError::Config(e.to_string()))?;
    let in_file = raw.contains_key("seed").then_some(cfg.seed);
    cfg.seed = resolve_seed(cli.seed, in_file, ScenarioConfig::default().seed)?;
    if let Some(r) = cli.bootstrap_reps {
        cfg.n_bootstrap = r;
    }
    if let Some(q) = cli.quad_nodes {
        cfg.irw.n_quad = q;
    }
    cfg.validate().map_err(|e| GcaError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Parses `argv`, runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let pool = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(p) => Some(p),
            Err(e) => {
                eprintln!("error: cannot start {n} threads: {e}");
                return 1;
            }
        },
        None => None,
    };
    let result = match &pool {
        Some(p) => p.install(|| dispatch(&cli)),
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Basis {
            family,
            degree,
            df,
            lower,
            upper,
            x,
            grid,
            derivative,
            out,
        } => {
            let family: SplineFamily = family.parse()?;
            let spec = SplineSpec::even(family, *degree, *df, *lower, *upper)?;
            let pts: Vec<f64> = match grid {
                Some(n) if *n >= 2 => (0..*n).map(|i| lower + (upper - lower) * i as f64 / (*n - 1) as f64).collect(),
                Some(_) => return Err(GcaError::InvalidArgument("--grid needs at least 2 points".into())),
                None if x.is_empty() => return Err(GcaError::InvalidArgument("give --x or --grid".into())),
                None => x.clone(),
            };
            let b = if *derivative { basis_derivative(&spec, &pts)? } else { eval_basis(&spec, &pts)? };
            let mut header = vec!["x".to_string()];
            header.extend((1..=b.ncols()).map(|k| format!("B{k}")));
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            let body = csv_string(
                &header,
                pts.iter().enumerate().map(|(i, &xi)| {
                    let mut r = vec![num(xi)];
                    r.extend(b.row(i).into_iter().map(num));
                    r
                }),
            );
            emit(out.as_deref(), &body)
        }
        Command::Data { name, n, out } => {
            let body = match name.as_str() {
                "chickweight" => io::chickweight_csv().to_string(),
                "pancreas_synthetic" => io::pancreas_synthetic_csv(*n, cli.seed.unwrap_or(7)),
                other => return Err(GcaError::InvalidArgument(format!("unknown data set '{other}'"))),
            };
            emit(out.as_deref(), &body)
        }
        Command::Fit { config, out } => execute_or_log("fit", resolved_model(cli, "fit", config), out),
        Command::Bootstrap { config, out } => execute_or_log("bootstrap", resolved_model(cli, "bootstrap", config), out),
        Command::Select { config, out } => execute_or_log("select", resolved_model(cli, "select", config), out),
        Command::Curves { config, out } => execute_or_log("curves", resolved_model(cli, "curves", config), out),
        Command::Simulate { config, out } => {
            let run = resolve_scenario(cli, config).map(|s| ResolvedRun {
                command: "simulate".into(),
                model: None,
                scenario: Some(s),
            });
            execute_or_log("simulate", run, out)
        }
        Command::Replay { resolved, out } => {
            let run = read_to_string(resolved)
                .and_then(|text| toml::from_str(&text).map_err(|e| GcaError::Config(e.to_string())));
            execute_or_log("replay", run, out)
        }
    }
}

fn emit(out: Option<&Path>, body: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn resolved_model(cli: &Cli, command: &str, config: &Path) -> Result<ResolvedRun> {
    Ok(ResolvedRun {
        command: command.into(),
        model: Some(resolve_model(cli, config)?),
        scenario: None,
    })
}

/// Like [`execute`], but a configuration that failed to resolve still leaves a `run.log`.
fn execute_or_log(command: &str, run: Result<ResolvedRun>, out: &Path) -> Result<()> {
    match run {
        Ok(run) => execute(run, out),
        Err(e) => {
            let log = format!("gca {} {command}\nstatus: failed: {e}\n", env!("CARGO_PKG_VERSION"));
            if std::fs::create_dir_all(out).is_ok() {
                let _ = write_atomic(&out.join("run.log"), &log);
            }
            Err(e)
        }
    }
}

/// Runs a resolved command and writes its outputs plus `resolved.toml` and `run.log` into `out`.
pub fn execute(run: ResolvedRun, out: &Path) -> Result<()> {
    let resolved = toml::to_string(&run).map_err(|e| GcaError::Config(e.to_string()))?;
    let mut log = String::new();
    let _ = writeln!(log, "gca {} {}", env!("CARGO_PKG_VERSION"), run.command);
    let outcome = match (run.command.as_str(), &run.model, &run.scenario) {
        ("simulate", _, Some(s)) => run_simulate(s, &mut log),
        (cmd @ ("fit" | "bootstrap" | "select" | "curves"), Some(m), _) => run_model(cmd, m, &mut log),
        (cmd, _, _) => Err(GcaError::Config(format!("cannot replay command '{cmd}' with the given sections"))),
    };
    let _ = writeln!(log, "--- resolved configuration ---\n{resolved}");
    std::fs::create_dir_all(out)?;
    match outcome {
        Ok(mut files) => {
            let _ = writeln!(log, "status: ok");
            files.push(("resolved.toml".into(), resolved));
            files.push(("run.log".into(), log));
            write_all(out, &files)
        }
        Err(e) => {
            let _ = writeln!(log, "status: failed: {e}");
            let _ = write_atomic(&out.join("run.log"), &log);
            Err(e)
        }
    }
}

type Files = Vec<(String, String)>;

fn run_model(cmd: &str, cfg: &ModelFormulaConfig, log: &mut String) -> Result<Files> {
    let table = cfg.load_table()?;
    let _ = writeln!(log, "seed: {}", cfg.seed.unwrap_or(cfg.fit.seed));
    let _ = writeln!(log, "data: {} rows, {} subjects", table.n_rows(), table.n_subjects());
    for line in &table.exclusion_log {
        let _ = writeln!(log, "{line}");
    }
    let (design, mean) = build_design(&table, cfg)?;
    let _ = writeln!(
        log,
        "design: {} with {} mean columns",
        match &design {
            Design::Independent(_) => "independent",
            Design::Clustered(_) => "clustered",
        },
        mean.p()
    );

    if cmd == "select" {
        let report = select_model(&design, &cfg.select.templates(), &cfg.fit)?;
        let rows = report.candidates.iter().enumerate().map(|(i, c)| {
            vec![
                format!("{:?}", c.template.shape).to_lowercase(),
                c.template.degree.to_string(),
                c.template.df.to_string(),
                c.template.index_kind.to_string(),
                num(c.loglik),
                num(c.aic),
                num(c.bic),
                c.n_params.to_string(),
                c.converged.to_string(),
                (i == report.winner_aic).to_string(),
                (i == report.winner_bic).to_string(),
                c.error.clone().unwrap_or_default(),
            ]
        });
        let body = csv_string(
            &[
                "shape", "degree", "df", "index", "loglik", "aic", "bic", "n_params", "converged", "best_aic",
                "best_bic", "error",
            ],
            rows,
        );
        let w = &report.candidates[report.winner_aic];
        let _ = writeln!(log, "best by AIC: {:?} df {} index {}", w.template.shape, w.template.df, w.template.index_kind);
        return Ok(vec![("report.csv".into(), body)]);
    }

    let fit = irw_fit(&design, &cfg.variance.template(), &cfg.fit)?;
    let _ = writeln!(
        log,
        "fit: loglik {:.6}, AIC {:.4}, BIC {:.4}, {} iterations",
        fit.loglik, fit.aic, fit.bic, fit.n_iterations
    );
    if !fit.converged {
        return Err(GcaError::NonConvergence(format!(
            "reweighting did not settle within {} iterations",
            cfg.fit.max_iter
        )));
    }
    let mut files = fit_files(&fit, &mean)?;

    if cmd == "bootstrap" {
        let bc = BootstrapConfig {
            n_rep: cfg.bootstrap.n_rep,
            seed: cfg.seed.unwrap_or(cfg.fit.seed),
            level: cfg.bootstrap.level,
            grid_points: cfg.bootstrap.grid_points,
        };
        let summary = bootstrap(&fit, &design, &cfg.fit, &bc)?;
        let _ = writeln!(log, "bootstrap: {} used, {} dropped", summary.n_used, summary.n_dropped);
        let rows = fit.column_names.iter().enumerate().map(|(j, name)| {
            vec![
                "beta".to_string(),
                name.clone(),
                num(fit.beta_hat[j]),
                num(summary.se_beta[j]),
                num(summary.ci_beta[j].0),
                num(summary.ci_beta[j].1),
            ]
        });
        let rows = rows
            .chain(fit.re_cov.alpha.iter().enumerate().map(|(j, a)| {
                vec!["alpha".into(), format!("alpha{j}"), num(*a), num(summary.se_alpha[j]), String::new(), String::new()]
            }))
            .chain(fit.variance.theta.iter().enumerate().map(|(j, t)| {
                vec!["theta".into(), format!("theta{j}"), num(*t), num(summary.se_theta[j]), String::new(), String::new()]
            }));
        files.push((
            "bootstrap.csv".into(),
            csv_string(&["section", "name", "estimate", "se", "ci_lower", "ci_upper"], rows),
        ));
        let band = csv_string(
            &["v", "g_hat", "lower", "upper"],
            summary.band_grid.iter().enumerate().map(|(i, &v)| {
                vec![
                    num(v),
                    num(fit.variance.g(v)),
                    num(summary.g_band_lower[i]),
                    num(summary.g_band_upper[i]),
                ]
            }),
        );
        files.push(("band.csv".into(), band));
    }

    if cmd == "curves" {
        let groups = curve_groups(&table, &mean, cfg)?;
        let curves = quantile_curves(&fit, &groups, cfg.curves.n_draws, &cfg.curves.probs, cfg.seed.unwrap_or(cfg.fit.seed))?;
        let mut header = vec!["group".to_string(), "t".into(), "mean".into()];
        header.extend(cfg.curves.probs.iter().map(|p| format!("q{p}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = curves.iter().flat_map(|c| {
            (0..c.t.len()).map(move |j| {
                let mut r = vec![c.name.clone(), num(c.t[j]), num(c.mean[j])];
                r.extend(c.quantiles.iter().map(|q| num(q[j])));
                r
            })
        });
        files.push(("curves.csv".into(), csv_string(&header, rows)));
    }
    Ok(files)
}

#[derive(Serialize, Deserialize)]
pub struct SavedFit {
    pub mean_model: MeanModel,
    pub fit: FitResult,
}

fn fit_files(fit: &FitResult, mean: &MeanModel) -> Result<Files> {
    let mut rows: Vec<Vec<String>> = fit
        .column_names
        .iter()
        .enumerate()
        .map(|(j, n)| vec!["beta".into(), n.clone(), num(fit.beta_hat[j]), num(fit.beta_se_model[j])])
        .collect();
    rows.extend(
        fit.re_cov
            .alpha
            .iter()
            .enumerate()
            .map(|(j, a)| vec!["alpha".into(), format!("alpha{j}"), num(*a), String::new()]),
    );
    rows.extend(
        fit.variance
            .theta
            .iter()
            .enumerate()
            .map(|(j, t)| vec!["theta".into(), format!("theta{j}"), num(*t), String::new()]),
    );
    for (name, v) in [("loglik", fit.loglik), ("aic", fit.aic), ("bic", fit.bic)] {
        rows.push(vec!["fit".into(), name.into(), num(v), String::new()]);
    }
    for (name, v) in [
        ("n_params", fit.n_params),
        ("n_units", fit.n_units),
        ("n_iterations", fit.n_iterations),
    ] {
        rows.push(vec!["fit".into(), name.into(), v.to_string(), String::new()]);
    }
    let fit_csv = csv_string(&["section", "name", "estimate", "se_model"], rows);

    let json = serde_json::to_string_pretty(&SavedFit {
        mean_model: mean.clone(),
        fit: fit.clone(),
    })
    .map_err(|e| GcaError::Io(e.to_string()))?;

    let grid = variance_grid(&fit.variance, &fit.fitted_index, 101);
    let variance = csv_string(&["v", "g"], grid.iter().map(|&v| vec![num(v), num(fit.variance.g(v))]));

    let diag = residual_diagnostics(fit);
    let qq = csv_string(&["theoretical", "standardized"], diag.qq.iter().map(|(a, b)| vec![num(*a), num(*b)]));
    Ok(vec![
        ("fit.csv".into(), fit_csv),
        ("fit.json".into(), json),
        ("variance.csv".into(), variance),
        ("qq.csv".into(), qq),
    ])
}

fn variance_grid(vm: &VarianceModel, index: &[f64], n: usize) -> Vec<f64> {
    match vm.range() {
        Some(_) => vm.grid(n),
        None => {
            let (lo, hi) = index.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        }
    }
}

/// One group per level of `curves.group_by` (or a single group). Other
/// categorical covariates sit at their reference level, numeric ones at their mean.
fn curve_groups(table: &LongFormatTable, mean: &MeanModel, cfg: &ModelFormulaConfig) -> Result<Vec<CurveGroup>> {
    let (lo, hi) = table
        .time
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    let n = cfg.curves.grid_points.max(2);
    let t: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let mut base = BTreeMap::new();
    for c in &table.covariates {
        let v = match c.spec.kind {
            CovariateKind::Numeric => {
                let s: f64 = c
                    .values
                    .iter()
                    .map(|v| match v {
                        CovValue::Num(x) => *x,
                        CovValue::Cat(_) => 0.0,
                    })
                    .sum();
                CovValue::Num(s / c.values.len() as f64)
            }
            CovariateKind::Categorical => CovValue::Cat(c.reference().unwrap_or_default().to_string()),
        };
        base.insert(c.spec.name.clone(), v);
    }
    let levels: Vec<(String, BTreeMap<String, CovValue>)> = match &cfg.curves.group_by {
        None => vec![("all".into(), base)],
        Some(g) => {
            let col = table
                .covariate(g)
                .ok_or_else(|| GcaError::Config(format!("unknown covariate '{g}'")))?;
            col.levels
                .iter()
                .map(|l| {
                    let mut covs = base.clone();
                    covs.insert(g.clone(), CovValue::Cat(l.clone()));
                    (format!("{g}={l}"), covs)
                })
                .collect()
        }
    };
    levels
        .into_iter()
        .map(|(name, covs)| {
            Ok(CurveGroup {
                name,
                x: mean.x_matrix(&t, &covs)?,
                z: mean.z_matrix(&t),
                t: t.clone(),
            })
        })
        .collect()
}

fn run_simulate(cfg: &ScenarioConfig, log: &mut String) -> Result<Files> {
    let _ = writeln!(log, "seed: {}", cfg.seed);
    let report = run_scenario(cfg)?;
    let _ = writeln!(log, "datasets: {} completed, {} with failures", report.n_completed, report.n_failed);
    if report.n_completed == 0 {
        return Err(GcaError::NonConvergence("no simulated data set was fitted".into()));
    }
    Ok(scenario_files(&report))
}

fn scenario_files(report: &ScenarioReport) -> Files {
    let rows = report.rows.iter().map(|r| {
        vec![
            r.estimator.name().to_string(),
            r.coefficient.clone(),
            num(r.truth),
            num(r.bias),
            num(r.se),
            opt_num(r.se_hat),
            opt_num(r.cp),
            r.n_used.to_string(),
        ]
    });
    let mut files = vec![
        (
            "report.csv".to_string(),
            csv_string(&["estimator", "coefficient", "truth", "bias", "se", "se_hat", "cp", "n_used"], rows),
        ),
        ("report.txt".to_string(), report.to_table()),
    ];
    if let Some(b) = &report.band {
        files.push((
            "band.csv".into(),
            csv_string(
                &["mu", "truth", "lower", "upper"],
                (0..b.grid.len()).map(|i| vec![num(b.grid[i]), num(b.truth[i]), num(b.lower[i]), num(b.upper[i])]),
            ),
        ));
    }
    files
}
