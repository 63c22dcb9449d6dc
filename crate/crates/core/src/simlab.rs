//! Simulation driver: configuration, data generation, per-replicate
//! selection, persistence of run records, and summary tables.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use evalexpr::{
    build_operator_tree, ContextWithMutableVariables, DefaultNumericTypes, HashMapContext, Node,
    Value,
};
use serde::{Deserialize, Serialize};

use crate::criteria::{default_sigma_window, sigma_estimate, Criterion, Selector};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::geometry::{curvature_sq, reversal_summary, ReversalSummary};
use crate::oracle::{ideal_lambda, TruthSpectrum};
use crate::rng::{standard_normals, Purpose};
use crate::search::SearchGrid;
use crate::spectrum::{build_design, DesignKind, DesignSpectrum, SpectrumStore};

/// Replicates evaluated per batch before their records are flushed.
const BATCH: usize = 256;

/// A true curve.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum TruthCurve {
    /// `sin(π(x + 1)) / (x/2 + 1)`
    #[default]
    PaperFig3,
    Zero,
    /// `intercept + slope·x`
    Linear { intercept: f64, slope: f64 },
    /// An arithmetic expression in `x` (and the constant `pi`).
    Expression(String),
}

impl fmt::Display for TruthCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruthCurve::PaperFig3 => f.write_str("paper-fig3"),
            TruthCurve::Zero => f.write_str("zero"),
            TruthCurve::Linear { intercept, slope } => write!(f, "linear({intercept},{slope})"),
            TruthCurve::Expression(e) => write!(f, "expr:{e}"),
        }
    }
}

impl FromStr for TruthCurve {
    type Err = Error;

    /// `paper-fig3`, `zero`, `linear(A,B)` or `expr:EXPRESSION`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(e) = s.strip_prefix("expr:") {
            build_operator_tree::<DefaultNumericTypes>(e)
                .map_err(|err| Error::Config(format!("bad truth expression {e:?}: {err}")))?;
            return Ok(TruthCurve::Expression(e.to_string()));
        }
        match s {
            "paper-fig3" => return Ok(TruthCurve::PaperFig3),
            "zero" => return Ok(TruthCurve::Zero),
            _ => {}
        }
        if let Some(args) = s.strip_prefix("linear(").and_then(|r| r.strip_suffix(')')) {
            let parts: Vec<f64> = args
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad linear truth {s:?}")))?;
            if let [intercept, slope] = parts[..] {
                return Ok(TruthCurve::Linear { intercept, slope });
            }
        }
        Err(Error::Config(format!("unknown truth curve {s:?}")))
    }
}

impl Serialize for TruthCurve {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TruthCurve {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Evaluates the curve at the design points.
pub fn truth_curve(curve: &TruthCurve, x: &[f64]) -> Result<Vec<f64>> {
    match curve {
        TruthCurve::PaperFig3 => Ok(x
            .iter()
            .map(|&v| (std::f64::consts::PI * (v + 1.0)).sin() / (v / 2.0 + 1.0))
            .collect()),
        TruthCurve::Zero => Ok(vec![0.0; x.len()]),
        TruthCurve::Linear { intercept, slope } => Ok(x.iter().map(|v| intercept + slope * v).collect()),
        TruthCurve::Expression(e) => {
            let tree: Node<DefaultNumericTypes> = build_operator_tree(e)
                .map_err(|err| Error::Config(format!("bad truth expression {e:?}: {err}")))?;
            let mut ctx = HashMapContext::<DefaultNumericTypes>::new();
            let bad = |err: evalexpr::EvalexprError<DefaultNumericTypes>| {
                Error::Config(format!("evaluating {e:?}: {err}"))
            };
            ctx.set_value("pi".into(), Value::Float(std::f64::consts::PI))
                .map_err(bad)?;
            x.iter()
                .map(|&v| {
                    ctx.set_value("x".into(), Value::Float(v)).map_err(bad)?;
                    let out = tree.eval_number_with_context(&ctx).map_err(bad)?;
                    if out.is_finite() {
                        Ok(out)
                    } else {
                        Err(Error::Config(format!("{e:?} is not finite at x = {v}")))
                    }
                })
                .collect()
        }
    }
}

/// How the noise level used for selection is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    /// Use the configured σ.
    #[default]
    Known,
    /// Estimate σ from the highest `window` spectral components; `None`
    /// picks `max(20, n/10)`.
    Estimated { window: Option<usize> },
}

impl fmt::Display for SigmaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SigmaMode::Known => f.write_str("known"),
            SigmaMode::Estimated { window: None } => f.write_str("estimated"),
            SigmaMode::Estimated { window: Some(m) } => write!(f, "estimated:{m}"),
        }
    }
}

impl FromStr for SigmaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "known" => Ok(SigmaMode::Known),
            "estimated" => Ok(SigmaMode::Estimated { window: None }),
            other => other
                .strip_prefix("estimated:")
                .and_then(|m| m.parse().ok())
                .map(|m| SigmaMode::Estimated { window: Some(m) })
                .ok_or_else(|| Error::Config(format!("unknown sigma mode {s:?}"))),
        }
    }
}

impl Serialize for SigmaMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SigmaMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn default_n_list() -> Vec<usize> {
    vec![61, 121, 241, 481, 961]
}

fn default_replicates() -> usize {
    1000
}

fn default_criteria() -> Vec<Criterion> {
    vec![Criterion::cp(), Criterion::gml(), Criterion::ee()]
}

fn default_sigma() -> f64 {
    1.0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Simulation configuration; the JSON form uses these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub design: DesignKind,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_criteria")]
    pub criteria: Vec<Criterion>,
    #[serde(default)]
    pub truth: TruthCurve,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            design: DesignKind::default(),
            n_list: default_n_list(),
            replicates: default_replicates(),
            seed: 0,
            criteria: default_criteria(),
            truth: TruthCurve::default(),
            sigma: default_sigma(),
            sigma_mode: SigmaMode::default(),
            output_dir: default_output_dir(),
        }
    }
}

impl SimConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be >= 1".into()));
        }
        if self.n_list.is_empty() {
            return Err(Error::Config("n_list must not be empty".into()));
        }
        if let Some(&n) = self.n_list.iter().find(|&&n| n < 8) {
            return Err(Error::Config(format!("n = {n} is too small (need n >= 8)")));
        }
        if self.criteria.is_empty() {
            return Err(Error::Config("criteria must not be empty".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// One replicate's outcome for one criterion. Failed replicates keep their
/// row, with NaN numbers and `at_boundary = "error"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n: usize,
    pub replicate: usize,
    pub criterion: String,
    pub lambda_hat: f64,
    pub df_hat: f64,
    /// `‖ĝ_{λ̂} − g‖²` in spectral units.
    pub sqerr: f64,
    /// `σ² · sqerr = ‖f̂_{λ̂} − f‖²`.
    pub sqerr_response: f64,
    pub at_boundary: String,
}

pub const ERROR_FLAG: &str = "error";

impl RunRecord {
    pub fn is_error(&self) -> bool {
        self.at_boundary == ERROR_FLAG
    }
}

/// Per-n status reported after a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub records: usize,
    pub failed_records: usize,
    /// Sample sizes skipped because their spectrum could not be built.
    pub failed_n: Vec<usize>,
}

/// Runs every `(n, replicate, criterion)` cell and passes records to `sink`
/// in that order.
pub fn run_simulation(
    cfg: &SimConfig,
    store: &SpectrumStore,
    exec: &Executor,
    sink: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<SimSummary> {
    cfg.validate()?;
    let mut summary = SimSummary {
        records: 0,
        failed_records: 0,
        failed_n: Vec::new(),
    };
    for &n in &cfg.n_list {
        let spec = match store.design(&cfg.design, n) {
            Ok(s) => s,
            Err(e) => {
                log::error!("n = {n}: spectrum unavailable, skipping: {e}");
                summary.failed_n.push(n);
                continue;
            }
        };
        let f = truth_curve(&cfg.truth, spec.x())?;
        let grid = SearchGrid::standard(&spec)?;
        let selectors: Vec<Selector> = cfg
            .criteria
            .iter()
            .map(|&c| Selector::new(c, &spec, &grid))
            .collect();
        let fu = spec.rotate(&f, 1.0)?;
        log::info!("n = {n}: {} replicates", cfg.replicates);
        let mut start = 0;
        while start < cfg.replicates {
            let len = BATCH.min(cfg.replicates - start);
            let batch = exec.map(len, |i| {
                replicate_records(cfg, &spec, &selectors, &f, &fu, start + i)
            });
            for rec in batch.iter().flatten() {
                if rec.is_error() {
                    summary.failed_records += 1;
                }
                summary.records += 1;
                sink(rec)?;
            }
            start += len;
        }
    }
    Ok(summary)
}

fn replicate_records(
    cfg: &SimConfig,
    spec: &DesignSpectrum,
    selectors: &[Selector],
    f: &[f64],
    fu: &[f64],
    replicate: usize,
) -> Vec<RunRecord> {
    let n = spec.n();
    let sigma = cfg.sigma;
    let noise = standard_normals(cfg.seed, n, replicate as u64, Purpose::Noise, n);
    let y: Vec<f64> = f.iter().zip(&noise).map(|(fi, e)| fi + sigma * e).collect();
    let prepared = spec.rotate(&y, 1.0).and_then(|yu| {
        let scale = match cfg.sigma_mode {
            SigmaMode::Known => sigma,
            SigmaMode::Estimated { window } => {
                sigma_estimate(spec, &y, window.unwrap_or_else(|| default_sigma_window(n)))?
            }
        };
        if !(scale > 0.0) {
            return Err(Error::numeric("sigma_estimate", "estimated σ is zero"));
        }
        let z: Vec<f64> = yu.iter().map(|v| v / scale).collect();
        Ok((yu, z))
    });
    selectors
        .iter()
        .map(|sel| {
            let label = sel.criterion().label();
            let outcome = prepared.as_ref().map_err(|e| e.to_string()).and_then(|(yu, z)| {
                let chosen = sel.select(z).map_err(|e| e.to_string())?;
                let a = spec.weights(chosen.lambda).map_err(|e| e.to_string())?.a;
                // ‖a∘Uᵀy − Uᵀf‖² / σ²
                let resp: f64 = a
                    .iter()
                    .zip(yu)
                    .zip(fu)
                    .map(|((a, y), f)| (a * y - f).powi(2))
                    .sum();
                Ok((chosen, resp))
            });
            match outcome {
                Ok((chosen, resp)) => RunRecord {
                    n,
                    replicate,
                    criterion: label,
                    lambda_hat: chosen.lambda,
                    df_hat: chosen.df,
                    sqerr: resp / (sigma * sigma),
                    sqerr_response: resp,
                    at_boundary: chosen.at_boundary.as_str().to_string(),
                },
                Err(e) => {
                    log::warn!("n = {n}, replicate {replicate}, {label}: {e}");
                    RunRecord {
                        n,
                        replicate,
                        criterion: label,
                        lambda_hat: f64::NAN,
                        df_hat: f64::NAN,
                        sqerr: f64::NAN,
                        sqerr_response: f64::NAN,
                        at_boundary: ERROR_FLAG.to_string(),
                    }
                }
            }
        })
        .collect()
}

/// Streams records to a CSV file as they arrive.
pub struct CsvSink {
    writer: csv::Writer<fs::File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        Ok(CsvSink {
            writer: csv::Writer::from_path(path)?,
        })
    }

    pub fn write(&mut self, rec: &RunRecord) -> Result<()> {
        self.writer.serialize(rec)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

/// Runs the simulation into `output_dir/runs.csv` and returns the path.
pub fn simulate_to_dir(cfg: &SimConfig, store: &SpectrumStore, exec: &Executor) -> Result<(PathBuf, SimSummary)> {
    let path = cfg.output_dir.join("runs.csv");
    let mut sink = CsvSink::create(&path)?;
    let summary = run_simulation(cfg, store, exec, &mut |r| sink.write(r))?;
    sink.finish()?;
    Ok((path, summary))
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Squared curvature at the ideal parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRow {
    pub n: usize,
    pub criterion: String,
    pub lambda0: f64,
    pub df0: f64,
    pub gamma_sq: f64,
}

/// Ideal parameter per sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealRow {
    pub n: usize,
    pub lambda0: f64,
    pub df0: f64,
    pub at_boundary: String,
}

/// Design, truth and noise shared by the deterministic tables.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub design: DesignKind,
    pub truth: TruthCurve,
    pub sigma: f64,
}

impl Scenario {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Scenario {
            design: cfg.design.clone(),
            truth: cfg.truth.clone(),
            sigma: cfg.sigma,
        }
    }

    /// Spectrum and truth at sample size `n`.
    pub fn at(&self, n: usize, store: &SpectrumStore) -> Result<(std::sync::Arc<DesignSpectrum>, TruthSpectrum)> {
        let spec = store.get(&build_design(&self.design, n)?)?;
        let f = truth_curve(&self.truth, spec.x())?;
        let truth = TruthSpectrum::new(&spec, f, self.sigma)?;
        Ok((spec, truth))
    }
}

pub fn ideal_table(scenario: &Scenario, n_list: &[usize], store: &SpectrumStore) -> Result<Vec<IdealRow>> {
    n_list
        .iter()
        .map(|&n| {
            let (spec, truth) = scenario.at(n, store)?;
            let ideal = ideal_lambda(&spec, &truth, &SearchGrid::standard(&spec)?)?;
            Ok(IdealRow {
                n,
                lambda0: ideal.lambda,
                df0: ideal.df,
                at_boundary: ideal.at_boundary.as_str().to_string(),
            })
        })
        .collect()
}

pub fn curvature_table(
    scenario: &Scenario,
    n_list: &[usize],
    criteria: &[Criterion],
    store: &SpectrumStore,
) -> Result<Vec<CurvatureRow>> {
    let mut rows = Vec::new();
    for &n in n_list {
        let (spec, truth) = scenario.at(n, store)?;
        let ideal = ideal_lambda(&spec, &truth, &SearchGrid::standard(&spec)?)?;
        for &c in criteria {
            rows.push(CurvatureRow {
                n,
                criterion: c.label(),
                lambda0: ideal.lambda,
                df0: ideal.df,
                gamma_sq: curvature_sq(c, &spec, ideal.lambda)?,
            });
        }
    }
    Ok(rows)
}

/// Reversal diagnostics at the ideal parameter, one row per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReversalRow {
    pub n: usize,
    pub criterion: String,
    pub lambda0: f64,
    pub beta: f64,
    pub rho: f64,
    pub mean: f64,
    pub variance: f64,
    pub t_n: f64,
    pub prob_normal: f64,
    pub prob_mc: f64,
    pub mc_se: f64,
}

impl ReversalRow {
    fn new(n: usize, criterion: String, s: ReversalSummary) -> Self {
        ReversalRow {
            n,
            criterion,
            lambda0: s.lambda0,
            beta: s.beta,
            rho: s.rho,
            mean: s.mean,
            variance: s.variance,
            t_n: s.t_n,
            prob_normal: s.prob_normal,
            prob_mc: s.prob_mc,
            mc_se: s.mc_se,
        }
    }
}

pub fn reversal_table(
    scenario: &Scenario,
    n_list: &[usize],
    criteria: &[Criterion],
    replicates: usize,
    seed: u64,
    store: &SpectrumStore,
    exec: &Executor,
) -> Result<Vec<ReversalRow>> {
    let mut rows = Vec::new();
    for &n in n_list {
        let (spec, truth) = scenario.at(n, store)?;
        let ideal = ideal_lambda(&spec, &truth, &SearchGrid::standard(&spec)?)?;
        for &c in criteria {
            let summary = reversal_summary(c, &spec, &truth, ideal.lambda, replicates, seed, exec)?;
            rows.push(ReversalRow::new(n, c.label(), summary));
        }
    }
    Ok(rows)
}

/// Sample mean and standard deviation of the squared error per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub criterion: String,
    pub n: usize,
    pub count: usize,
    pub errors: usize,
    pub mean_sqerr: Option<f64>,
    pub sd_sqerr: Option<f64>,
    pub mean_df: Option<f64>,
    pub sd_df: Option<f64>,
    /// Empty, or `missing` when no records cover the cell.
    pub note: String,
}

/// One histogram bin `[bin_lo, bin_lo + 1)` of selected df.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub criterion: String,
    pub n: usize,
    pub bin_lo: i64,
    pub bin_hi: i64,
    pub count: usize,
}

fn mean_sd(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    let sd = if v.len() > 1 {
        Some((v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt())
    } else {
        None
    };
    (Some(mean), sd)
}

/// Squared-error summary for every requested `(criterion, n)` cell.
pub fn error_table(records: &[RunRecord], criteria: &[String], n_list: &[usize]) -> Vec<ErrorRow> {
    let cells = group_cells(records);
    let mut rows = Vec::new();
    for c in criteria {
        for &n in n_list {
            let key = (c.clone(), n);
            let recs = cells.get(&key).map(Vec::as_slice).unwrap_or(&[]);
            let good: Vec<&RunRecord> = recs.iter().copied().filter(|r| !r.is_error()).collect();
            let sq: Vec<f64> = good.iter().map(|r| r.sqerr).collect();
            let df: Vec<f64> = good.iter().map(|r| r.df_hat).collect();
            let (mean_sqerr, sd_sqerr) = mean_sd(&sq);
            let (mean_df, sd_df) = mean_sd(&df);
            let note = if recs.is_empty() {
                log::warn!("no records for criterion {c} at n = {n}");
                "missing".to_string()
            } else {
                String::new()
            };
            rows.push(ErrorRow {
                criterion: c.clone(),
                n,
                count: recs.len(),
                errors: recs.len() - good.len(),
                mean_sqerr,
                sd_sqerr,
                mean_df,
                sd_df,
                note,
            });
        }
    }
    rows
}

/// Unit-width df histograms anchored at integers, covering the observed
/// range of each cell.
pub fn df_histogram(records: &[RunRecord], criteria: &[String], n_list: &[usize]) -> Vec<HistogramRow> {
    let cells = group_cells(records);
    let mut rows = Vec::new();
    for c in criteria {
        for &n in n_list {
            let Some(recs) = cells.get(&(c.clone(), n)) else {
                continue;
            };
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for r in recs.iter().filter(|r| !r.is_error()) {
                *counts.entry(r.df_hat.floor() as i64).or_default() += 1;
            }
            let (Some(&lo), Some(&hi)) = (counts.keys().next(), counts.keys().next_back()) else {
                continue;
            };
            for bin in lo..=hi {
                rows.push(HistogramRow {
                    criterion: c.clone(),
                    n,
                    bin_lo: bin,
                    bin_hi: bin + 1,
                    count: counts.get(&bin).copied().unwrap_or(0),
                });
            }
        }
    }
    rows
}

fn group_cells(records: &[RunRecord]) -> BTreeMap<(String, usize), Vec<&RunRecord>> {
    let mut cells: BTreeMap<(String, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.criterion.clone(), r.n)).or_default().push(r);
    }
    cells
}

/// Paths of the files written by [`emit_tables`].
#[derive(Debug, Clone, Serialize)]
pub struct TableFiles {
    pub table1: PathBuf,
    pub table2: PathBuf,
    pub fig4_hist: PathBuf,
    pub df0_bars: PathBuf,
}

pub fn emit_tables(
    records: &[RunRecord],
    cfg: &SimConfig,
    store: &SpectrumStore,
    out_dir: &Path,
) -> Result<TableFiles> {
    let scenario = Scenario::from_config(cfg);
    let labels: Vec<String> = cfg.criteria.iter().map(Criterion::label).collect();
    let files = TableFiles {
        table1: out_dir.join("table1.csv"),
        table2: out_dir.join("table2.csv"),
        fig4_hist: out_dir.join("fig4_hist.csv"),
        df0_bars: out_dir.join("df0_bars.csv"),
    };
    write_csv(&files.table1, &curvature_table(&scenario, &cfg.n_list, &cfg.criteria, store)?)?;
    write_csv(&files.table2, &error_table(records, &labels, &cfg.n_list))?;
    write_csv(&files.fig4_hist, &df_histogram(records, &labels, &cfg.n_list))?;
    write_csv(&files.df0_bars, &ideal_table(&scenario, &cfg.n_list, store)?)?;
    Ok(files)
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig3_curve_values() {
        let f = truth_curve(&TruthCurve::PaperFig3, &[-1.0, -0.5, 0.0]).unwrap();
        assert!(f[0].abs() < 1e-15);
        assert!((f[1] - 4.0 / 3.0).abs() < 1e-15);
        assert!(f[2].abs() < 1e-15);
        assert_eq!(truth_curve(&TruthCurve::Zero, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn truth_parsing() {
        assert_eq!("zero".parse::<TruthCurve>().unwrap(), TruthCurve::Zero);
        assert_eq!(
            "linear(1, -2)".parse::<TruthCurve>().unwrap(),
            TruthCurve::Linear { intercept: 1.0, slope: -2.0 }
        );
        assert!("wiggly".parse::<TruthCurve>().is_err());
        let e: TruthCurve = "expr:math::sin(pi * x) + x^2".parse().unwrap();
        let v = truth_curve(&e, &[0.5]).unwrap();
        assert!((v[0] - 1.25).abs() < 1e-12);
        assert!("expr:(((".parse::<TruthCurve>().is_err());
    }

    #[test]
    fn sigma_mode_parsing() {
        assert_eq!("known".parse::<SigmaMode>().unwrap(), SigmaMode::Known);
        assert_eq!(
            "estimated:40".parse::<SigmaMode>().unwrap(),
            SigmaMode::Estimated { window: Some(40) }
        );
        assert!("guess".parse::<SigmaMode>().is_err());
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = SimConfig::from_json("{}").unwrap();
        assert_eq!(cfg, SimConfig::default());
        assert!(SimConfig::from_json(r#"{"replicates": 0}"#).is_err());
        assert!(SimConfig::from_json(r#"{"sigma": -1}"#).is_err());
        assert!(SimConfig::from_json(r#"{"colour": "blue"}"#).is_err());
        let cfg = SimConfig::from_json(
            r#"{"design": {"kind": "equispaced", "lo": 0, "hi": 1}, "criteria": ["cp", "1.5:1"],
                "truth": "linear(0,1)", "sigma_mode": "estimated"}"#,
        )
        .unwrap();
        assert_eq!(cfg.criteria[1].p(), 1.5);
        let back = SimConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn histogram_mass_and_missing_cells() {
        let mk = |df: f64, crit: &str| RunRecord {
            n: 61,
            replicate: 0,
            criterion: crit.into(),
            lambda_hat: 1.0,
            df_hat: df,
            sqerr: df,
            sqerr_response: df,
            at_boundary: "none".into(),
        };
        let recs = vec![mk(3.2, "cp"), mk(3.9, "cp"), mk(6.1, "cp")];
        let hist = df_histogram(&recs, &["cp".into()], &[61]);
        assert_eq!(hist.iter().map(|h| h.count).sum::<usize>(), 3);
        assert_eq!(hist.len(), 4);
        let table = error_table(&recs, &["cp".into(), "gml".into()], &[61]);
        assert_eq!(table[0].count, 3);
        assert_eq!(table[1].note, "missing");
        assert!(table[1].mean_sqerr.is_none());
    }
}
