use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use splinesel::criteria::{default_sigma_window, select, sigma_estimate};
use splinesel::geometry::curvature_sq;
use splinesel::oracle::{decomposition_approx, decomposition_mc, log_log_slope, rate_probe};
use splinesel::simlab::{
    curvature_table, emit_tables, ideal_table, read_runs, reversal_table, simulate_to_dir, truth_curve,
    write_csv, write_json, RunRecord, Scenario, SigmaMode, SimConfig, TruthCurve,
};
use splinesel::spectrum::{DesignGrid, DesignKind, SpectrumCache, SpectrumStore};
use splinesel::{Criterion, Error, Executor};

/// Exit status for malformed invocations and configuration files.
const EXIT_USAGE: u8 = 2;
/// Exit status for failures while running.
const EXIT_RUNTIME: u8 = 1;

#[derive(Parser, Debug)]
#[command(name = "splinesel", version, about = "Smoothing-parameter selection for cubic smoothing splines")]
struct Cli {
    /// Directory for cached spectral decompositions (also read from
    /// SPLINESEL_CACHE_DIR).
    #[arg(long, global = true, env = "SPLINESEL_CACHE_DIR")]
    cache_dir: Option<PathBuf>,

    /// Worker threads; overrides SPLINESEL_THREADS (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decompose a design and write its eigenvalues.
    Spectrum {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value = "equispaced:-1,1")]
        design: DesignKind,
        #[arg(long, default_value = "out")]
        output_dir: PathBuf,
    },
    /// Select the smoothing parameter for one dataset.
    Select {
        /// CSV with columns `x,y` (header required).
        #[arg(long)]
        input: PathBuf,
        /// One or more criteria: cp, gml, ee or P:Q.
        #[arg(long, value_delimiter = ',', default_value = "ee")]
        criterion: Vec<Criterion>,
        /// `known:SIGMA`, `estimated` or `estimated:M`.
        #[arg(long, default_value = "known:1.0")]
        sigma: SigmaArg,
    },
    /// Run the Monte Carlo experiment and write runs.csv.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's output_dir.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides the config's replicate count.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Summarise a runs file into table1, table2, fig4_hist and df0_bars.
    Tables {
        #[arg(long)]
        runs: PathBuf,
        /// Config used for the run; defaults to config.json beside the runs
        /// file, then to the built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the directory holding the runs file.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Squared curvature at the ideal parameter (table1.csv).
    Curvature {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Reversal-region diagnostics at the ideal parameter.
    Reversal {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 10_000)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo bias/covariance/variability decomposition.
    Decompose {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 2000)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Growth rates of the central parameters and of the curvature.
    Rates {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    /// Base configuration; the flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    criteria: Option<Vec<Criterion>>,
    #[arg(long)]
    truth: Option<TruthCurve>,
    #[arg(long)]
    design: Option<DesignKind>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ScenarioArgs {
    fn resolve(&self, default_n: &[usize]) -> Result<SimConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => SimConfig::load(path)?,
            None => SimConfig {
                n_list: default_n.to_vec(),
                ..SimConfig::default()
            },
        };
        if let Some(n) = &self.n {
            cfg.n_list = n.clone();
        }
        if let Some(c) = &self.criteria {
            cfg.criteria = c.clone();
        }
        if let Some(t) = &self.truth {
            cfg.truth = t.clone();
        }
        if let Some(d) = &self.design {
            cfg.design = d.clone();
        }
        if let Some(s) = self.sigma {
            cfg.sigma = s;
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Noise level for `select`.
#[derive(Debug, Clone, Copy)]
enum SigmaArg {
    Known(f64),
    Estimated(Option<usize>),
}

impl FromStr for SigmaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(v) = s.strip_prefix("known:") {
            return match v.parse::<f64>() {
                Ok(sigma) if sigma > 0.0 && sigma.is_finite() => Ok(SigmaArg::Known(sigma)),
                _ => Err(format!("known sigma must be a positive number, got {v:?}")),
            };
        }
        match s.parse::<SigmaMode>() {
            Ok(SigmaMode::Estimated { window }) => Ok(SigmaArg::Estimated(window)),
            _ => Err(format!("expected known:SIGMA, estimated or estimated:M, got {s:?}")),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report_error("usage", &e.to_string());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let (kind, code) = classify(&err);
            report_error(kind, &format!("{err:#}"));
            ExitCode::from(code)
        }
    }
}

fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    match err.downcast_ref::<Error>() {
        Some(e @ (Error::Config(_) | Error::Json(_))) => (e.kind(), EXIT_USAGE),
        Some(e) => (e.kind(), EXIT_RUNTIME),
        None => ("runtime", EXIT_RUNTIME),
    }
}

fn report_error(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": kind, "message": message.trim_end() }));
}

fn run(cli: Cli) -> anyhow::Result<String> {
    let exec = match cli.threads {
        Some(1) => Executor::sequential(),
        Some(t) => Executor::parallel(t),
        None => Executor::from_env(),
    };
    let store = match &cli.cache_dir {
        Some(dir) => SpectrumStore::with_cache(SpectrumCache::new(dir)),
        None => SpectrumStore::in_memory(),
    };
    match cli.command {
        Command::Spectrum { n, design, output_dir } => {
            let spec = store.design(&design, n)?;
            #[derive(Serialize)]
            struct Row {
                index: usize,
                x: f64,
                eigenvalue: f64,
            }
            let rows: Vec<Row> = (0..n)
                .map(|i| Row {
                    index: i,
                    x: spec.x()[i],
                    eigenvalue: spec.k()[i],
                })
                .collect();
            let path = output_dir.join(format!("spectrum_n{n}.csv"));
            write_csv(&path, &rows)?;
            Ok(json!({
                "command": "spectrum",
                "n": n,
                "null_dim": spec.null_dim(),
                "max_eigenvalue": spec.k()[n - 1],
                "output": path,
            })
            .to_string())
        }
        Command::Select { input, criterion, sigma } => {
            let (x, y) = read_xy(&input)?;
            let spec = store.get(&DesignGrid::new(x)?)?;
            let scale = match sigma {
                SigmaArg::Known(s) => s,
                SigmaArg::Estimated(window) => {
                    sigma_estimate(&spec, &y, window.unwrap_or_else(|| default_sigma_window(spec.n())))?
                }
            };
            let z: Vec<f64> = spec.rotate(&y, scale)?;
            let results = criterion
                .iter()
                .map(|&c| {
                    let r = select(c, &spec, &z)?;
                    Ok(json!({
                        "criterion": c.label(),
                        "lambda_hat": r.lambda,
                        "df_hat": r.df,
                        "at_boundary": r.at_boundary.as_str(),
                    }))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            Ok(json!({ "command": "select", "n": spec.n(), "sigma": scale, "results": results }).to_string())
        }
        Command::Simulate {
            config,
            output_dir,
            replicates,
        } => {
            let mut cfg = SimConfig::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if let Some(r) = replicates {
                cfg.replicates = r;
            }
            cfg.validate()?;
            write_json(&cfg.output_dir.join("config.json"), &cfg)?;
            let (path, summary) = simulate_to_dir(&cfg, &store, &exec)?;
            if !summary.failed_n.is_empty() {
                bail!(
                    "spectrum failed for n = {:?}; {} records written to {}",
                    summary.failed_n,
                    summary.records,
                    path.display()
                );
            }
            Ok(json!({
                "command": "simulate",
                "records": summary.records,
                "failed_records": summary.failed_records,
                "threads": exec.threads(),
                "output": path,
            })
            .to_string())
        }
        Command::Tables {
            runs,
            config,
            output_dir,
        } => {
            let records = read_runs(&runs).with_context(|| format!("reading {}", runs.display()))?;
            let run_dir = runs.parent().map(Path::to_path_buf).unwrap_or_default();
            let sibling = run_dir.join("config.json");
            let mut cfg = match config {
                Some(path) => SimConfig::load(&path)?,
                None if sibling.is_file() => SimConfig::load(&sibling)?,
                None => infer_config(&records)?,
            };
            cfg.output_dir = output_dir.unwrap_or(run_dir);
            let files = emit_tables(&records, &cfg, &store, &cfg.output_dir)?;
            Ok(json!({ "command": "tables", "records": records.len(), "outputs": files }).to_string())
        }
        Command::Curvature { scenario } => {
            let cfg = scenario.resolve(&[61, 121, 241])?;
            let sc = Scenario::from_config(&cfg);
            let table = curvature_table(&sc, &cfg.n_list, &cfg.criteria, &store)?;
            let bars = ideal_table(&sc, &cfg.n_list, &store)?;
            let t1 = cfg.output_dir.join("table1.csv");
            let t2 = cfg.output_dir.join("df0_bars.csv");
            write_csv(&t1, &table)?;
            write_csv(&t2, &bars)?;
            Ok(json!({ "command": "curvature", "rows": table.len(), "outputs": [t1, t2] }).to_string())
        }
        Command::Reversal {
            scenario,
            replicates,
            seed,
        } => {
            let cfg = scenario.resolve(&[61, 241, 961])?;
            let sc = Scenario::from_config(&cfg);
            let rows = reversal_table(&sc, &cfg.n_list, &cfg.criteria, replicates, seed, &store, &exec)?;
            let path = cfg.output_dir.join("reversal.csv");
            write_csv(&path, &rows)?;
            Ok(json!({ "command": "reversal", "rows": rows.len(), "output": path }).to_string())
        }
        Command::Decompose {
            scenario,
            replicates,
            seed,
        } => {
            let cfg = scenario.resolve(&[61, 241, 961])?;
            let sc = Scenario::from_config(&cfg);
            #[derive(Serialize)]
            struct Row {
                n: usize,
                criterion: String,
                lambda0: f64,
                df0: f64,
                lambda_c: f64,
                df_c: f64,
                bias_term: f64,
                covariance_term: f64,
                variability_term: f64,
                extra_risk: f64,
                identity_gap: f64,
                se_covariance: f64,
                se_variability: f64,
                se_extra_risk: f64,
                covariance_approx: f64,
                variability_approx: f64,
                replicates: usize,
            }
            let mut rows = Vec::new();
            for &n in &cfg.n_list {
                let (spec, truth) = sc.at(n, &store)?;
                let reports = decomposition_mc(&cfg.criteria, &spec, &truth, replicates, seed, &exec)?;
                for (c, r) in cfg.criteria.iter().zip(reports) {
                    let approx = decomposition_approx(*c, &spec, &truth, r.lambda_c)?;
                    rows.push(Row {
                        n,
                        criterion: c.label(),
                        lambda0: r.lambda0,
                        df0: r.df0,
                        lambda_c: r.lambda_c,
                        df_c: r.df_c,
                        bias_term: r.bias_term,
                        covariance_term: r.covariance_term,
                        variability_term: r.variability_term,
                        extra_risk: r.extra_risk,
                        identity_gap: r.identity_gap(),
                        se_covariance: r.mc_standard_errors[0],
                        se_variability: r.mc_standard_errors[1],
                        se_extra_risk: r.mc_standard_errors[2],
                        covariance_approx: approx.covariance_approx,
                        variability_approx: approx.variability_approx,
                        replicates: r.mc_replicates,
                    });
                }
            }
            let path = cfg.output_dir.join("decomposition.csv");
            write_csv(&path, &rows)?;
            Ok(json!({ "command": "decompose", "rows": rows.len(), "output": path }).to_string())
        }
        Command::Rates { scenario } => {
            let cfg = scenario.resolve(&[61, 121, 241, 481, 961])?;
            let truth = cfg.truth.clone();
            let curve = move |x: &[f64]| truth_curve(&truth, x);
            #[derive(Serialize)]
            struct Row {
                criterion: String,
                n: usize,
                lambda_c: f64,
                df_c: f64,
                at_boundary: &'static str,
                gamma_sq: f64,
            }
            #[derive(Serialize)]
            struct Slope {
                criterion: String,
                lambda_c_slope: f64,
                df_c_slope: f64,
                gamma_sq_slope: f64,
                excluded_n: String,
            }
            let sc = Scenario::from_config(&cfg);
            let lambda0: Vec<f64> = ideal_table(&sc, &cfg.n_list, &store)?.iter().map(|r| r.lambda0).collect();
            let ns: Vec<f64> = cfg.n_list.iter().map(|&n| n as f64).collect();
            let mut rows = Vec::new();
            let mut slopes = Vec::new();
            for &c in &cfg.criteria {
                let probe = rate_probe(c, &cfg.design, &cfg.n_list, &curve, cfg.sigma, &store)?;
                let mut gammas = Vec::new();
                for (row, &l0) in probe.rows.iter().zip(&lambda0) {
                    let spec = store.design(&cfg.design, row.n)?;
                    let g = curvature_sq(c, &spec, l0)?;
                    gammas.push(g);
                    rows.push(Row {
                        criterion: c.label(),
                        n: row.n,
                        lambda_c: row.lambda_c,
                        df_c: row.df_c,
                        at_boundary: row.at_boundary.as_str(),
                        gamma_sq: g,
                    });
                }
                slopes.push(Slope {
                    criterion: c.label(),
                    lambda_c_slope: probe.lambda_slope,
                    df_c_slope: probe.df_slope,
                    gamma_sq_slope: log_log_slope(&ns, &gammas),
                    excluded_n: probe
                        .excluded
                        .iter()
                        .map(usize::to_string)
                        .collect::<Vec<_>>()
                        .join(";"),
                });
            }
            let rows_path = cfg.output_dir.join("rates.csv");
            let slopes_path = cfg.output_dir.join("rate_slopes.csv");
            write_csv(&rows_path, &rows)?;
            write_csv(&slopes_path, &slopes)?;
            Ok(json!({ "command": "rates", "rows": rows.len(), "outputs": [rows_path, slopes_path] }).to_string())
        }
    }
}

/// Reads an `x,y` CSV, sorted by `x`.
fn read_xy(path: &Path) -> anyhow::Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .map(|h| h.split(',').map(|s| s.trim().to_ascii_lowercase()).collect())
        .unwrap_or_default();
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(xi), Some(yi)) = (col("x"), col("y")) else {
        return Err(Error::Config(format!("{}: header must name columns x and y", path.display())).into());
    };
    let mut pairs = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |i: usize| -> anyhow::Result<f64> {
            fields
                .get(i)
                .and_then(|v| v.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| {
                    Error::Config(format!("{}: bad number on data row {}", path.display(), lineno + 1)).into()
                })
        };
        pairs.push((get(xi)?, get(yi)?));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(pairs.into_iter().unzip())
}

/// Recovers the sample sizes and criteria present in a runs file; the
/// remaining settings take their defaults.
fn infer_config(records: &[RunRecord]) -> anyhow::Result<SimConfig> {
    let mut n_list: Vec<usize> = records.iter().map(|r| r.n).collect();
    n_list.sort_unstable();
    n_list.dedup();
    let mut criteria: Vec<Criterion> = Vec::new();
    for r in records {
        let c: Criterion = r.criterion.parse()?;
        if !criteria.contains(&c) {
            criteria.push(c);
        }
    }
    if n_list.is_empty() {
        bail!(Error::Config("runs file has no records".into()));
    }
    log::warn!("no config found beside the runs file; assuming default design, truth and sigma");
    Ok(SimConfig {
        n_list,
        criteria,
        ..SimConfig::default()
    })
}
