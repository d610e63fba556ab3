//! Config-driven experiments: arms × seeds × targets, one output directory
//! per run, and the aggregated seed-mean report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_csv, write_csv, DatasetManifest, GeneratorSpec, MetaPool, MultiDomainDataset};
use crate::eval::count_variance;
use crate::eval::{run_target, weight_accuracy_profile, EvalError, MetricsReport, TargetSetup};
use crate::trainer::{Arm, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ExperimentError {
    /// Divergence is a numeric failure; everything else is a usage or
    /// configuration problem.
    pub fn is_numeric(&self) -> bool {
        matches!(self, ExperimentError::Eval(EvalError::Train(TrainError::Diverged { .. })))
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// Where the training data comes from. Exactly one of `csv` and `generate`
/// must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub csv: Option<PathBuf>,
    /// Optional fresh evaluation records in the same CSV schema.
    pub eval_csv: Option<PathBuf>,
    pub generate: Option<GeneratorSpec>,
    /// Sampling seed of the generated training data.
    #[serde(default)]
    pub seed: u64,
    /// Records per cell of a freshly sampled evaluation set from the same
    /// generated world.
    pub eval_per_cell: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    SingleSplit,
    LeaveOneDomainOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub kind: ProtocolKind,
    /// Held-out domain for a single split; defaults to the last domain.
    pub target: Option<usize>,
    #[serde(default = "default_per_pair")]
    pub meta_per_pair: usize,
    #[serde(default)]
    pub meta_pool: MetaPool,
}

fn default_per_pair() -> usize {
    12
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { kind: ProtocolKind::SingleSplit, target: None, meta_per_pair: default_per_pair(), meta_pool: MetaPool::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_jobs() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.run.arms.is_empty() {
            return bad("run.arms must name at least one arm".into());
        }
        if self.run.seeds.is_empty() {
            return bad("run.seeds must list at least one seed".into());
        }
        if self.run.jobs == 0 {
            return bad("run.jobs must be at least 1".into());
        }
        match (&self.dataset.csv, &self.dataset.generate) {
            (Some(_), Some(_)) | (None, None) => {
                return bad("dataset needs exactly one of `csv` and `generate`".into())
            }
            (Some(p), None) if !p.exists() => return bad(format!("dataset.csv {} does not exist", p.display())),
            _ => {}
        }
        if let Some(p) = &self.dataset.eval_csv {
            if !p.exists() {
                return bad(format!("dataset.eval_csv {} does not exist", p.display()));
            }
        }
        if self.dataset.eval_per_cell.is_some() && self.dataset.generate.is_none() {
            return bad("dataset.eval_per_cell needs a generated dataset".into());
        }
        self.train.validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }
}

/// Training and evaluation records resolved from a [`DatasetConfig`].
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: MultiDomainDataset,
    pub eval: Option<MultiDomainDataset>,
}

/// Sampling seed of the evaluation set, distinct from any training seed.
const EVAL_SEED_TAG: u64 = 0xE7A1_5EED;

pub fn load_data(cfg: &DatasetConfig) -> Result<LoadedData, ExperimentError> {
    let data_err = |e: crate::data::DataError| ExperimentError::Eval(e.into());
    let train = match (&cfg.csv, &cfg.generate) {
        (Some(path), None) => load_csv(path, None).map_err(data_err)?,
        (None, Some(spec)) => spec.generate(cfg.seed).map_err(data_err)?,
        _ => return Err(ExperimentError::Config("dataset needs exactly one of `csv` and `generate`".into())),
    };
    let eval = match (&cfg.eval_csv, cfg.eval_per_cell, &cfg.generate) {
        (Some(path), _, _) => {
            Some(load_csv(path, Some((train.num_domains(), train.num_classes()))).map_err(data_err)?)
        }
        (None, Some(n), Some(spec)) => Some(spec.balanced(n).generate(cfg.seed ^ EVAL_SEED_TAG).map_err(data_err)?),
        _ => None,
    };
    if let Some(e) = &eval {
        if e.input_dim() != train.input_dim() {
            return Err(ExperimentError::Config("evaluation data has a different feature width".into()));
        }
    }
    Ok(LoadedData { train, eval })
}

/// One (arm, seed, target) combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RunSpec {
    pub target: usize,
    pub arm: Arm,
    pub seed: u64,
}

impl RunSpec {
    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(format!("target-{}", self.target)).join(self.arm.name()).join(format!("seed-{}", self.seed))
    }
}

pub fn plan(cfg: &ExperimentConfig, num_domains: usize) -> Result<Vec<RunSpec>, ExperimentError> {
    let targets: Vec<usize> = match cfg.protocol.kind {
        ProtocolKind::SingleSplit => {
            let t = cfg.protocol.target.unwrap_or(num_domains.saturating_sub(1));
            if t >= num_domains {
                return Err(ExperimentError::Config(format!(
                    "protocol.target {t} out of range for {num_domains} domains"
                )));
            }
            vec![t]
        }
        ProtocolKind::LeaveOneDomainOut => {
            if num_domains < 3 {
                return Err(ExperimentError::Eval(EvalError::TooFewDomains(num_domains)));
            }
            (0..num_domains).collect()
        }
    };
    if num_domains < 3 {
        // Training needs at least two source domains.
        return Err(ExperimentError::Config(format!("{num_domains} domains leave fewer than two sources")));
    }
    let mut runs = Vec::new();
    for &target in &targets {
        for &seed in &cfg.run.seeds {
            for &arm in &cfg.run.arms {
                runs.push(RunSpec { target, arm, seed });
            }
        }
    }
    Ok(runs)
}

/// The config that reproduces exactly one run when fed back to [`execute`].
pub fn frozen_config(cfg: &ExperimentConfig, run: &RunSpec) -> ExperimentConfig {
    let mut frozen = cfg.clone();
    frozen.train.seed = run.seed;
    frozen.protocol.kind = ProtocolKind::SingleSplit;
    frozen.protocol.target = Some(run.target);
    frozen.run.arms = vec![run.arm];
    frozen.run.seeds = vec![run.seed];
    frozen.run.jobs = 1;
    for p in [&mut frozen.dataset.csv, &mut frozen.dataset.eval_csv].into_iter().flatten() {
        if let Ok(abs) = std::fs::canonicalize(&*p) {
            *p = abs;
        }
    }
    frozen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub dir: PathBuf,
    pub metrics: Option<MetricsReport>,
    /// Rank correlation between per-cell accuracy and step-3 weight, over
    /// all cells and within domains.
    pub rank_correlation: Option<f64>,
    pub within_domain_correlation: Option<f64>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
    #[serde(default)]
    pub numeric_failure: bool,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize to JSON");
    std::fs::write(path, text).map_err(io_err(path))
}

/// Trains and evaluates one run, writing its artifacts into `run.dir(out)`:
/// `config.toml`, `history.csv`, `theta.json`, `psi.json` (reweighted arms),
/// `metrics.json` and, when snapshots were taken, `profile.csv`.
pub fn execute_run(cfg: &ExperimentConfig, data: &LoadedData, run: &RunSpec) -> Result<RunRecord, ExperimentError> {
    let dir = run.dir(&cfg.run.out);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let frozen = frozen_config(cfg, run);
    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, frozen.to_toml()).map_err(io_err(&config_path))?;

    let setup = TargetSetup {
        train: &data.train,
        eval: data.eval.as_ref(),
        target: run.target,
        meta_per_pair: cfg.protocol.meta_per_pair,
        meta_pool: cfg.protocol.meta_pool,
    };
    let (outcome, metrics) = run_target::<f64>(run.arm, &frozen.train, setup)?;

    let history_path = dir.join("history.csv");
    outcome.history.write_csv(&history_path).map_err(EvalError::from)?;
    let ad = |e: crate::autodiff::AutodiffError| ExperimentError::Io { path: dir.clone(), message: e.to_string() };
    outcome.theta.save_json(&dir.join("theta.json")).map_err(ad)?;
    if let Some(psi) = &outcome.psi {
        psi.save_json(&dir.join("psi.json")).map_err(ad)?;
    }
    write_json(&dir.join("metrics.json"), &metrics)?;

    let (mut rank_correlation, mut within_domain_correlation) = (None, None);
    if !outcome.history.snapshots.is_empty() && outcome.psi.is_some() {
        let t = frozen.train.iterations;
        let profile = weight_accuracy_profile(&outcome.history, 0..t)?;
        profile.write_csv(&dir.join("profile.csv"))?;
        rank_correlation = profile.rank_correlation;
        within_domain_correlation = profile.within_domain_correlation;
    }
    Ok(RunRecord {
        spec: *run,
        dir,
        metrics: Some(metrics),
        rank_correlation,
        within_domain_correlation,
        warnings: outcome.history.warnings.clone(),
        error: None,
        numeric_failure: false,
    })
}

/// Outcome of [`execute`]: every planned run, failed ones included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunRecord>,
}

impl ExperimentOutcome {
    pub fn failed(&self) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(|r| r.error.is_some())
    }

    pub fn any_numeric_failure(&self) -> bool {
        self.runs.iter().any(|r| r.numeric_failure)
    }
}

/// Validates the config, loads the data, executes every planned run on up
/// to `run.jobs` threads and writes `runs.json` into `run.out`.
///
/// Configuration and data errors abort before any run starts; a failing run
/// is recorded and the remaining runs still execute.
pub fn execute(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, ExperimentError> {
    cfg.validate()?;
    let data = load_data(&cfg.dataset)?;
    let runs = plan(cfg, data.train.num_domains())?;
    std::fs::create_dir_all(&cfg.run.out).map_err(io_err(&cfg.run.out))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.jobs)
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let records: Vec<RunRecord> = pool.install(|| {
        runs.par_iter()
            .map(|run| {
                execute_run(cfg, &data, run).unwrap_or_else(|e| {
                    log::error!("run {:?} failed: {e}", run);
                    RunRecord {
                        spec: *run,
                        dir: run.dir(&cfg.run.out),
                        metrics: None,
                        rank_correlation: None,
                        within_domain_correlation: None,
                        warnings: vec![],
                        numeric_failure: e.is_numeric(),
                        error: Some(e.to_string()),
                    }
                })
            })
            .collect()
    });
    let outcome = ExperimentOutcome { runs: records };
    write_json(&cfg.run.out.join("runs.json"), &outcome)?;
    Ok(outcome)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub arm: Arm,
    pub target: usize,
    pub mean: f64,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub std: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub with_domain_vector: f64,
    pub without_domain_vector: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub targets: Vec<usize>,
    pub cells: Vec<AggregateCell>,
    /// Per arm, the unweighted mean over targets of the seed means.
    pub average: Vec<(Arm, f64)>,
    pub ablation: Option<AblationRow>,
}

/// Seed means ± standard deviations per arm and target.
pub fn aggregate(reports: &[MetricsReport]) -> Result<AggregateReport, ExperimentError> {
    if reports.is_empty() {
        return Err(ExperimentError::Config("no completed runs to report".into()));
    }
    let mut groups: BTreeMap<(Arm, usize), Vec<f64>> = BTreeMap::new();
    for r in reports {
        groups.entry((r.arm, r.target_domain)).or_default().push(r.overall_accuracy);
    }
    let mut targets: Vec<usize> = groups.keys().map(|&(_, t)| t).collect();
    targets.sort_unstable();
    targets.dedup();
    let cells: Vec<AggregateCell> = groups
        .iter()
        .map(|(&(arm, target), v)| {
            let (mean, std) = mean_std(v);
            AggregateCell { arm, target, mean, std, seeds: v.len() }
        })
        .collect();
    let mut arms: Vec<Arm> = cells.iter().map(|c| c.arm).collect();
    arms.dedup();
    let average: Vec<(Arm, f64)> = arms
        .iter()
        .map(|&arm| {
            let means: Vec<f64> = cells.iter().filter(|c| c.arm == arm).map(|c| c.mean).collect();
            (arm, means.iter().sum::<f64>() / means.len() as f64)
        })
        .collect();
    let avg_of = |arm| average.iter().find(|(a, _)| *a == arm).map(|&(_, v)| v);
    let ablation = match (avg_of(Arm::Sbdg), avg_of(Arm::SbdgNoDomainVector)) {
        (Some(with), Some(without)) => Some(AblationRow { with_domain_vector: with, without_domain_vector: without }),
        _ => None,
    };
    Ok(AggregateReport { targets, cells, average, ablation })
}

impl AggregateReport {
    /// Aligned-column text: one row per arm, one column per held-out target
    /// plus the average, followed by the domain-vector ablation when present.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<24}", "method");
        for t in &self.targets {
            let _ = write!(s, "{:>18}", format!("target {t}"));
        }
        let _ = writeln!(s, "{:>10}", "avg");
        for &(arm, avg) in &self.average {
            let _ = write!(s, "{:<24}", arm.name());
            for &t in &self.targets {
                match self.cells.iter().find(|c| c.arm == arm && c.target == t) {
                    Some(c) => {
                        let _ = write!(s, "{:>18}", format!("{:.2} ± {:.2}", 100.0 * c.mean, 100.0 * c.std));
                    }
                    None => {
                        let _ = write!(s, "{:>18}", "-");
                    }
                }
            }
            let _ = writeln!(s, "{:>10.2}", 100.0 * avg);
        }
        if let Some(ab) = &self.ablation {
            let _ = writeln!(s, "\n{:<24}{:>10}", "domain vector", "avg");
            let _ = writeln!(s, "{:<24}{:>10.2}", "with", 100.0 * ab.with_domain_vector);
            let _ = writeln!(s, "{:<24}{:>10.2}", "without", 100.0 * ab.without_domain_vector);
        }
        s
    }
}

/// Every `metrics.json` below `dir`, in path order.
pub fn collect_metrics(dir: &Path) -> Result<Vec<MetricsReport>, ExperimentError> {
    fn walk(dir: &Path, found: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
        for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
            let path = entry.map_err(io_err(dir))?.path();
            if path.is_dir() {
                walk(&path, found)?;
            } else if path.file_name().is_some_and(|n| n == "metrics.json") {
                found.push(path);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| ExperimentError::Io { path: p.clone(), message: e.to_string() })
        })
        .collect()
}

/// Reads a generator spec from TOML, or JSON when the extension is `.json`.
pub fn load_generator_spec(path: &Path) -> Result<GeneratorSpec, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|m| ExperimentError::Config(format!("{}: {m}", path.display())))
}

/// Path of the manifest written next to a dataset CSV.
pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("manifest.json")
}

/// Samples the dataset, writes it as CSV to `out` and its manifest next to it.
pub fn generate_dataset(spec: &GeneratorSpec, seed: u64, out: &Path) -> Result<DatasetManifest, ExperimentError> {
    let ds = spec.generate(seed).map_err(EvalError::from)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_csv(&ds, out).map_err(EvalError::from)?;
    let (sigma2_class, sigma2_domain) = count_variance(&ds)?;
    let manifest = DatasetManifest {
        seed,
        num_domains: ds.num_domains(),
        num_classes: ds.num_classes(),
        input_dim: ds.input_dim(),
        counts: ds.counts(),
        sigma2_class,
        sigma2_domain,
        profile: Some(spec.profile.clone()),
        meta_pool: None,
    };
    write_json(&manifest_path(out), &manifest)?;
    Ok(manifest)
}

/// Aggregates every run below `runs`, writes the text table to `out` and the
/// JSON form to `out` with a `.json` extension, and returns the table.
pub fn write_report(runs: &Path, out: &Path) -> Result<String, ExperimentError> {
    if !runs.is_dir() {
        return Err(ExperimentError::Config(format!("{} is not a directory", runs.display())));
    }
    let report = aggregate(&collect_metrics(runs)?)?;
    let table = report.render();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(out, &table).map_err(io_err(out))?;
    write_json(&out.with_extension("json"), &report)?;
    Ok(table)
}
