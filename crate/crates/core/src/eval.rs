//! Accuracy breakdowns, imbalance statistics, the weight/accuracy profile,
//! and the leave-one-domain-out protocol.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::ParamSet;
use crate::data::{split_meta, CountMatrix, DataError, MetaPool, Minibatch, MultiDomainDataset};
use crate::models::{ModelError, TaskNet};
use crate::scalar::Scalar;
use crate::trainer::{run_arm, Arm, History, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("leave-one-domain-out needs at least 3 domains, got {0}")]
    TooFewDomains(usize),
    #[error("snapshot at iteration {0} has no matching training record")]
    MismatchedGrid(usize),
    #[error("training data for target {target} contains a record from that domain")]
    TargetLeak { target: usize },
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Correct/total prediction counts per (domain, class) cell.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTally {
    pub num_domains: usize,
    pub num_classes: usize,
    pub correct: Vec<usize>,
    pub total: Vec<usize>,
}

impl CellTally {
    pub fn measure<T: Scalar>(
        task: &TaskNet,
        theta: &ParamSet<T>,
        ds: &MultiDomainDataset,
    ) -> Result<Self, ModelError> {
        let batch = Minibatch::from_samples(ds.samples(), ds.input_dim(), ds.num_domains());
        let predictions = if batch.is_empty() {
            Vec::new()
        } else {
            task.predict(theta, &batch.feature_tensor::<T>())?
        };
        Ok(Self::from_predictions(ds, &predictions))
    }

    /// `predictions` in [`MultiDomainDataset::samples`] order.
    pub fn from_predictions(ds: &MultiDomainDataset, predictions: &[usize]) -> Self {
        let (k, c) = (ds.num_domains(), ds.num_classes());
        let mut tally = Self { num_domains: k, num_classes: c, correct: vec![0; k * c], total: vec![0; k * c] };
        for (s, &p) in ds.samples().zip(predictions) {
            let j = s.domain * c + s.label;
            tally.total[j] += 1;
            if p == s.label {
                tally.correct[j] += 1;
            }
        }
        tally
    }

    /// Row-major per-cell accuracy; `None` for empty cells.
    pub fn accuracies(&self) -> Vec<Option<f64>> {
        self.correct
            .iter()
            .zip(&self.total)
            .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
            .collect()
    }

    pub fn per_cell(&self) -> Vec<Vec<Option<f64>>> {
        self.accuracies().chunks(self.num_classes).map(<[_]>::to_vec).collect()
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let (mut hit, mut n) = (0, 0);
                for k in 0..self.num_domains {
                    hit += self.correct[k * self.num_classes + c];
                    n += self.total[k * self.num_classes + c];
                }
                (n > 0).then(|| hit as f64 / n as f64)
            })
            .collect()
    }

    pub fn overall(&self) -> Option<f64> {
        let n: usize = self.total.iter().sum();
        (n > 0).then(|| self.correct.iter().sum::<usize>() as f64 / n as f64)
    }

    /// Overall accuracy rebuilt from per-cell accuracies and cell counts.
    pub fn reaggregate(per_cell: &[Option<f64>], counts: &[usize]) -> Option<f64> {
        let n: usize = counts.iter().sum();
        let hits: f64 = per_cell
            .iter()
            .zip(counts)
            .map(|(a, &c)| a.map_or(0.0, |a| (a * c as f64).round()))
            .sum();
        (n > 0).then(|| hits / n as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    None,
    Class,
    DomainClass,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Accuracy {
    Overall(Option<f64>),
    PerClass(Vec<Option<f64>>),
    PerCell(Vec<Vec<Option<f64>>>),
}

/// Argmax accuracy of `theta` on `ds`, optionally broken down.
pub fn accuracy<T: Scalar>(
    task: &TaskNet,
    theta: &ParamSet<T>,
    ds: &MultiDomainDataset,
    group_by: GroupBy,
) -> Result<Accuracy, EvalError> {
    let tally = CellTally::measure(task, theta, ds)?;
    Ok(match group_by {
        GroupBy::None => Accuracy::Overall(tally.overall()),
        GroupBy::Class => Accuracy::PerClass(tally.per_class()),
        GroupBy::DomainClass => Accuracy::PerCell(tally.per_cell()),
    })
}

/// Population variance divided by the squared mean (squared coefficient
/// of variation).
pub fn normalized_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var / (mean * mean)
}

/// `(σ²_class, σ²_domain)` of a count matrix: normalized variances of the
/// class totals and of the domain totals.
pub fn count_variance_of(counts: &CountMatrix) -> Result<(f64, f64), EvalError> {
    let total: usize = counts.iter().flatten().sum();
    if total == 0 {
        return Err(EvalError::EmptyDataset);
    }
    let classes = counts.first().map_or(0, Vec::len);
    let class_totals: Vec<f64> = (0..classes)
        .map(|c| counts.iter().map(|row| row[c]).sum::<usize>() as f64)
        .collect();
    let domain_totals: Vec<f64> = counts.iter().map(|row| row.iter().sum::<usize>() as f64).collect();
    Ok((normalized_variance(&class_totals), normalized_variance(&domain_totals)))
}

pub fn count_variance(ds: &MultiDomainDataset) -> Result<(f64, f64), EvalError> {
    count_variance_of(&ds.counts())
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either series is constant or shorter than two.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Accuracy-before-step-1 and step-3 weight, per cell, at every snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSeries {
    pub domain: usize,
    pub class: usize,
    /// `(iteration, accuracy, mean ŵ)`; the weight is absent when the cell
    /// was not in that iteration's batch.
    pub points: Vec<(usize, Option<f64>, Option<f64>)>,
    pub window_accuracy: Option<f64>,
    pub window_weight: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightAccuracyProfile {
    pub cells: Vec<CellSeries>,
    pub window: (usize, usize),
    /// Spearman correlation across all cells of window-mean accuracy and
    /// window-mean weight; `None` when undefined.
    pub rank_correlation: Option<f64>,
    /// Mean over domains of the across-class Spearman correlation inside
    /// each domain. Domain-level weight offsets do not enter it.
    pub within_domain_correlation: Option<f64>,
}

impl WeightAccuracyProfile {
    /// Long-format CSV: `domain,class,iteration,accuracy,weight`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", path.display()));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(out, "domain,class,iteration,accuracy,weight").map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for cell in &self.cells {
            for &(t, acc, w) in &cell.points {
                writeln!(out, "{},{},{t},{},{}", cell.domain, cell.class, opt(acc), opt(w)).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }
}

/// Aligns the history's accuracy snapshots with its step-3 weight traces and
/// correlates them across cells over the iterations in `window`.
pub fn weight_accuracy_profile(history: &History, window: Range<usize>) -> Result<WeightAccuracyProfile, EvalError> {
    let c_count = history.num_classes;
    let cells = history.num_domains * c_count;
    let mut series: Vec<CellSeries> = (0..cells)
        .map(|j| CellSeries {
            domain: j / c_count,
            class: j % c_count,
            points: Vec::new(),
            window_accuracy: None,
            window_weight: None,
        })
        .collect();
    let mut acc_sum = vec![0.0; cells];
    let mut acc_n = vec![0usize; cells];
    for snap in &history.snapshots {
        let record = history
            .records
            .iter()
            .find(|r| r.iteration == snap.iteration)
            .ok_or(EvalError::MismatchedGrid(snap.iteration))?;
        for j in 0..cells {
            let w = (record.cell_count[j] > 0)
                .then(|| record.cell_weight_sum[j] / f64::from(record.cell_count[j]));
            series[j].points.push((snap.iteration, snap.per_cell[j], w));
            if window.contains(&snap.iteration) {
                if let Some(a) = snap.per_cell[j] {
                    acc_sum[j] += a;
                    acc_n[j] += 1;
                }
            }
        }
    }
    let weights = history.mean_cell_weights(window.clone());
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for j in 0..cells {
        series[j].window_accuracy = (acc_n[j] > 0).then(|| acc_sum[j] / acc_n[j] as f64);
        series[j].window_weight = weights[j];
        if let (Some(a), Some(w)) = (series[j].window_accuracy, weights[j]) {
            xs.push(a);
            ys.push(w);
        }
    }
    let per_domain: Vec<f64> = series
        .chunks(c_count)
        .filter_map(|dom| {
            let (a, w): (Vec<f64>, Vec<f64>) =
                dom.iter().filter_map(|c| Some((c.window_accuracy?, c.window_weight?))).unzip();
            spearman(&a, &w)
        })
        .collect();
    let within_domain_correlation =
        (!per_domain.is_empty()).then(|| per_domain.iter().sum::<f64>() / per_domain.len() as f64);
    Ok(WeightAccuracyProfile {
        cells: series,
        window: (window.start, window.end),
        rank_correlation: spearman(&xs, &ys),
        within_domain_correlation,
    })
}

/// Outcome of one trained arm evaluated against a held-out target domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arm: Arm,
    pub seed: u64,
    /// Index of the held-out domain in the full dataset.
    pub target_domain: usize,
    /// Accuracy on the target domain.
    pub overall_accuracy: f64,
    /// Per-class accuracy on the target domain.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Per-(source domain, class) accuracy on the source evaluation records.
    pub per_domain_class_accuracy: Vec<Vec<Option<f64>>>,
    pub source_accuracy: Option<f64>,
    /// Normalized count variances of the source training data.
    pub sigma2_class: f64,
    pub sigma2_domain: f64,
    /// Mean step-3 weight per source cell over the last quarter of training.
    pub weight_summary: Vec<Vec<Option<f64>>>,
}

/// Data and settings shared by every arm trained against one target.
#[derive(Clone, Copy, Debug)]
pub struct TargetSetup<'a> {
    /// Training records of every domain, target included.
    pub train: &'a MultiDomainDataset,
    /// Fresh records of every domain for evaluation; falls back to `train`
    /// (target domain) and the imbalanced split (source cells) when absent.
    pub eval: Option<&'a MultiDomainDataset>,
    pub target: usize,
    pub meta_per_pair: usize,
    pub meta_pool: MetaPool,
}

/// Trains `arm` on every domain but the target and evaluates it.
pub fn run_target<T: Scalar>(
    arm: Arm,
    config: &TrainConfig,
    setup: TargetSetup<'_>,
) -> Result<(TrainOutcome<T>, MetricsReport), EvalError> {
    let sources = setup.train.without_domain(setup.target)?;
    if sources.samples().any(|s| s.origin.domain == setup.target) {
        return Err(EvalError::TargetLeak { target: setup.target });
    }
    let split = split_meta(&sources, setup.meta_per_pair, setup.meta_pool, config.seed)?;
    if split.imbalanced.samples().chain(split.balanced.samples()).any(|s| s.origin.domain == setup.target) {
        return Err(EvalError::TargetLeak { target: setup.target });
    }
    let eval_sources = match setup.eval {
        Some(e) => e.without_domain(setup.target)?,
        None => split.imbalanced.clone(),
    };
    let target = setup.eval.unwrap_or(setup.train).select_domains(&[setup.target])?;

    let outcome = run_arm::<T>(arm, config, &split, Some(&eval_sources))?;
    let task = TaskNet::new(crate::models::TaskNetConfig {
        input_dim: sources.input_dim(),
        hidden_dims: config.task_hidden.clone(),
        num_classes: sources.num_classes(),
    })?;
    let target_tally = CellTally::measure(&task, &outcome.theta, &target)?;
    let source_tally = CellTally::measure(&task, &outcome.theta, &eval_sources)?;
    let (sigma2_class, sigma2_domain) = count_variance(&split.imbalanced)?;
    let quarter = config.iterations - config.iterations / 4;
    let weight_summary = outcome
        .history
        .mean_cell_weights(quarter..config.iterations)
        .chunks(sources.num_classes())
        .map(<[_]>::to_vec)
        .collect();
    let report = MetricsReport {
        arm,
        seed: config.seed,
        target_domain: setup.target,
        overall_accuracy: target_tally.overall().ok_or(EvalError::EmptyDataset)?,
        per_class_accuracy: target_tally.per_class(),
        per_domain_class_accuracy: source_tally.per_cell(),
        source_accuracy: source_tally.overall(),
        sigma2_class,
        sigma2_domain,
        weight_summary,
    };
    Ok((outcome, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetResult {
    pub target: usize,
    pub sigma2_domain: f64,
    pub reports: Vec<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LodoReport {
    pub targets: Vec<TargetResult>,
    /// Unweighted mean of the per-target accuracies, per arm.
    pub average: Vec<(Arm, f64)>,
}

/// Holds out each domain in turn, trains every arm on the rest with shared
/// seeds, and averages target accuracies across held-out domains.
pub fn leave_one_domain_out<T: Scalar>(
    config: &TrainConfig,
    arms: &[Arm],
    train: &MultiDomainDataset,
    eval: Option<&MultiDomainDataset>,
    meta_per_pair: usize,
    meta_pool: MetaPool,
) -> Result<LodoReport, EvalError> {
    let k = train.num_domains();
    if k < 3 {
        return Err(EvalError::TooFewDomains(k));
    }
    let targets: Vec<TargetResult> = (0..k)
        .into_par_iter()
        .map(|target| {
            let setup = TargetSetup { train, eval, target, meta_per_pair, meta_pool };
            let reports = arms
                .iter()
                .map(|&arm| run_target::<T>(arm, config, setup).map(|(_, r)| r))
                .collect::<Result<Vec<_>, _>>()?;
            let sigma2_domain = reports.first().map_or(0.0, |r| r.sigma2_domain);
            Ok(TargetResult { target, sigma2_domain, reports })
        })
        .collect::<Result<_, EvalError>>()?;
    let average = arms
        .iter()
        .map(|&arm| {
            let accs: Vec<f64> = targets
                .iter()
                .flat_map(|t| t.reports.iter().filter(|r| r.arm == arm).map(|r| r.overall_accuracy))
                .collect();
            (arm, accs.iter().sum::<f64>() / accs.len() as f64)
        })
        .collect();
    Ok(LodoReport { targets, average })
}
