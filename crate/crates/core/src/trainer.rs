//! The self-balanced training loop and its equal-weight baseline.
//!
//! One iteration of the self-balanced loop:
//!
//! 1. per-sample losses and gradients `g_i` at `Θ`, weights `w_i` from the
//!    reweighting network, virtual step `Θ̂ = Θ - (α/n) Σ w_i g_i`;
//! 2. meta-gradient of the balanced-batch loss at `Θ̂` with respect to `Ψ`,
//!    then `Ψ ← Ψ - β ∇_Ψ`;
//! 3. weights `ŵ_i` recomputed with the new `Ψ` on the step-1 losses, and the
//!    real step `Θ ← Θ - (α/n) Σ ŵ_i g_i`, taken from `Θ`, not `Θ̂`.
//!
//! Because `w_i` enters `Θ̂` linearly with coefficient `-(α/n) g_i`, the
//! meta-gradient is `-(α/n) Σ_i ⟨h, g_i⟩ ∇_Ψ w_i` with `h` the balanced-loss
//! gradient at `Θ̂`. No second-order tape is needed.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamSet, PerSampleGrads, Tape, Tensor};
use crate::data::{sample_minibatch, DataError, DatasetSplit, Minibatch, MultiDomainDataset};
use crate::eval::CellTally;
use crate::models::{ModelError, ReweightNet, ReweightNetConfig, TaskNet, TaskNetConfig};
use crate::scalar::Scalar;

/// Mean `ŵ` over an epoch below which training is flagged as collapsed.
pub const WEIGHT_COLLAPSE_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(String),
}

/// The three ways a run can train the task network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Sbdg,
    Erm,
    SbdgNoDomainVector,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Sbdg => "sbdg",
            Arm::Erm => "erm",
            Arm::SbdgNoDomainVector => "sbdg-no-domain-vector",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Arm::Sbdg, Arm::Erm, Arm::SbdgNoDomainVector]
            .into_iter()
            .find(|a| a.name() == s)
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of iterations `T`.
    pub iterations: usize,
    /// Task step size `α`.
    pub alpha: f64,
    /// Reweighting step size `β`.
    pub beta: f64,
    /// Imbalanced-set batch size per domain.
    pub n_per_domain: usize,
    /// Meta-set batch size per domain.
    pub m_per_domain: usize,
    pub seed: u64,
    /// Drop the domain one-hot from the reweighting network's input.
    pub ablate_domain_vector: bool,
    pub task_hidden: Vec<usize>,
    pub reweight_hidden: usize,
    /// Record per-cell accuracy on the monitor set every this many
    /// iterations (0 disables).
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            alpha: 5e-4,
            beta: 5e-5,
            n_per_domain: 128,
            m_per_domain: 9,
            seed: 0,
            ablate_domain_vector: false,
            task_hidden: vec![64, 32],
            reweight_hidden: 100,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be finite and non-negative");
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return bad("beta must be finite and non-negative");
        }
        if self.n_per_domain == 0 || self.m_per_domain == 0 {
            return bad("batch sizes must be at least 1");
        }
        if self.reweight_hidden == 0 || self.task_hidden.contains(&0) {
            return bad("layer widths must be at least 1");
        }
        Ok(())
    }
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// A minibatch converted to the scalar type of the networks.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub domain_onehot: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_minibatch(mb: &Minibatch) -> Self {
        Self {
            x: mb.feature_tensor(),
            labels: mb.labels.clone(),
            domains: mb.domains.clone(),
            domain_onehot: mb.domain_tensor(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-sample cross-entropy losses at `theta` and their parameter gradients.
pub fn per_sample_task_grads<T: Scalar>(
    task: &TaskNet,
    theta: &ParamSet<T>,
    batch: &Batch<T>,
) -> Result<(Vec<T>, PerSampleGrads<T>), TrainError> {
    let mut tape = Tape::new();
    let bound = tape.bind(theta);
    let x = tape.leaf(batch.x.clone());
    let logits = task.logits_on_tape(&mut tape, &bound, x)?;
    let losses = tape.softmax_xent(logits, &batch.labels)?;
    let grads = tape.per_sample_grads(losses, &bound)?;
    Ok((tape.value(losses).data().to_vec(), grads))
}

/// `theta - (alpha/n) Σ_i weights[i] g_i`. Both the virtual and the real
/// update, and the equal-weight baseline, go through this one function.
pub fn weighted_step<T: Scalar>(
    theta: &ParamSet<T>,
    alpha: T,
    weights: &[T],
    grads: &PerSampleGrads<T>,
) -> Result<ParamSet<T>, TrainError> {
    let coef = alpha / T::of(weights.len() as f64);
    let direction = grads.weighted_sum(weights)?;
    let next: Vec<T> = theta
        .flatten()
        .iter()
        .zip(&direction)
        .map(|(&p, &g)| p - coef * g)
        .collect();
    Ok(ParamSet::from_flat(&theta.layout(), &next)?)
}

/// Intermediates of step 1, reused by steps 2 and 3.
#[derive(Clone, Debug)]
pub struct VirtualUpdate<T> {
    pub theta_hat: ParamSet<T>,
    pub losses: Vec<T>,
    pub grads: PerSampleGrads<T>,
    pub weights: Vec<T>,
}

pub fn step1_virtual_update<T: Scalar>(
    task: &TaskNet,
    reweight: &ReweightNet,
    theta: &ParamSet<T>,
    psi: &ParamSet<T>,
    batch: &Batch<T>,
    alpha: T,
) -> Result<VirtualUpdate<T>, TrainError> {
    let (losses, grads) = per_sample_task_grads(task, theta, batch)?;
    let weights = sample_weights(reweight, psi, &losses, batch)?;
    let theta_hat = weighted_step(theta, alpha, &weights, &grads)?;
    Ok(VirtualUpdate { theta_hat, losses, grads, weights })
}

fn sample_weights<T: Scalar>(
    reweight: &ReweightNet,
    psi: &ParamSet<T>,
    losses: &[T],
    batch: &Batch<T>,
) -> Result<Vec<T>, TrainError> {
    let losses = Tensor::vector(losses.to_vec())?;
    Ok(reweight.forward(psi, &losses, &batch.domain_onehot)?.into_data())
}

#[derive(Clone, Debug)]
pub struct MetaGradient<T> {
    pub grad_psi: ParamSet<T>,
    /// Mean balanced-batch loss at `Θ̂`.
    pub meta_loss: T,
    /// `⟨h, g_i⟩` for each imbalanced sample.
    pub alignments: Vec<T>,
}

/// Balanced-batch mean loss at `theta` and its gradient.
pub fn meta_loss_and_grad<T: Scalar>(
    task: &TaskNet,
    theta: &ParamSet<T>,
    batch: &Batch<T>,
) -> Result<(T, ParamSet<T>), TrainError> {
    let mut tape = Tape::new();
    let bound = tape.bind(theta);
    let x = tape.leaf(batch.x.clone());
    let logits = task.logits_on_tape(&mut tape, &bound, x)?;
    let losses = tape.softmax_xent(logits, &batch.labels)?;
    let mean = tape.mean(losses)?;
    let loss = tape.value(mean).data()[0];
    Ok((loss, tape.backward(mean)?.params(&bound)))
}

/// Exact gradient of the balanced-batch loss at `Θ̂(Ψ)` with respect to `Ψ`,
/// where `Θ̂(Ψ)` is the step-1 update.
pub fn meta_gradient<T: Scalar>(
    task: &TaskNet,
    reweight: &ReweightNet,
    virtual_update: &VirtualUpdate<T>,
    psi: &ParamSet<T>,
    batch_imbalanced: &Batch<T>,
    batch_balanced: &Batch<T>,
    alpha: T,
) -> Result<MetaGradient<T>, TrainError> {
    let (meta_loss, h) = meta_loss_and_grad(task, &virtual_update.theta_hat, batch_balanced)?;
    if h.layout() != *virtual_update.grads.layout() {
        return Err(AutodiffError::Shape {
            op: "meta_gradient",
            detail: "meta gradient and per-sample gradients have different layouts".into(),
        }
        .into());
    }
    let alignments = virtual_update.grads.dot_each(&h.flatten())?;
    let n = T::of(alignments.len() as f64);
    let coefs: Vec<T> = alignments.iter().map(|&s| -(alpha / n) * s).collect();

    let mut tape = Tape::new();
    let bound = tape.bind(psi);
    let losses = tape.leaf(Tensor::vector(virtual_update.losses.clone())?);
    let domains = tape.leaf(batch_imbalanced.domain_onehot.clone());
    let w = reweight.weights_on_tape(&mut tape, &bound, losses, domains)?;
    let objective = tape.weighted_sum(w, &coefs)?;
    let grad_psi = tape.backward(objective)?.params(&bound);
    Ok(MetaGradient { grad_psi, meta_loss, alignments })
}

/// `Ψ - β ∇_Ψ`.
pub fn step2_meta_update<T: Scalar>(
    psi: &ParamSet<T>,
    grad_psi: &ParamSet<T>,
    beta: T,
) -> Result<ParamSet<T>, TrainError> {
    let mut next = psi.clone();
    next.axpy(-beta, grad_psi)?;
    Ok(next)
}

/// Real update from `theta` with weights recomputed under `psi_next` on the
/// step-1 losses. Returns the new parameters and the weights `ŵ_i`.
pub fn step3_actual_update<T: Scalar>(
    reweight: &ReweightNet,
    theta: &ParamSet<T>,
    psi_next: &ParamSet<T>,
    batch: &Batch<T>,
    virtual_update: &VirtualUpdate<T>,
    alpha: T,
) -> Result<(ParamSet<T>, Vec<T>), TrainError> {
    let weights = sample_weights(reweight, psi_next, &virtual_update.losses, batch)?;
    let next = weighted_step(theta, alpha, &weights, &virtual_update.grads)?;
    Ok((next, weights))
}

/// Per-iteration log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Mean unweighted task loss on the imbalanced batch at `Θ^(t)`.
    pub task_loss: f64,
    /// Mean balanced-batch loss at `Θ̂^(t)`; absent for the baseline.
    pub meta_loss: Option<f64>,
    pub weight_min: f64,
    pub weight_max: f64,
    pub weight_mean: f64,
    /// Sum of the step-3 weights per (domain, class) cell, row-major.
    pub cell_weight_sum: Vec<f64>,
    pub cell_count: Vec<u32>,
}

/// Per-cell accuracy on the monitor set, measured with `Θ^(t)` before step 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracySnapshot {
    pub iteration: usize,
    pub per_cell: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub num_domains: usize,
    pub num_classes: usize,
    pub records: Vec<IterationRecord>,
    pub snapshots: Vec<AccuracySnapshot>,
    pub warnings: Vec<String>,
}

impl History {
    /// Mean step-3 weight per cell over iterations in `range`; `None` for
    /// cells never sampled there.
    pub fn mean_cell_weights(&self, range: std::ops::Range<usize>) -> Vec<Option<f64>> {
        let cells = self.num_domains * self.num_classes;
        let mut sum = vec![0.0; cells];
        let mut count = vec![0u64; cells];
        for r in self.records.iter().filter(|r| range.contains(&r.iteration)) {
            for j in 0..cells {
                sum[j] += r.cell_weight_sum[j];
                count[j] += u64::from(r.cell_count[j]);
            }
        }
        sum.iter()
            .zip(&count)
            .map(|(&s, &c)| (c > 0).then(|| s / c as f64))
            .collect()
    }

    pub fn weight_bounds(&self) -> Option<(f64, f64)> {
        let lo = self.records.iter().map(|r| r.weight_min).reduce(f64::min)?;
        let hi = self.records.iter().map(|r| r.weight_max).reduce(f64::max)?;
        Some((lo, hi))
    }

    /// `iteration,task_loss,meta_loss,weight_min,weight_max,weight_mean,w_d{k}_c{c}...`
    /// where each cell column is that iteration's mean `ŵ` (empty if the
    /// cell was not in the batch).
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", path.display()));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let mut header = "iteration,task_loss,meta_loss,weight_min,weight_max,weight_mean".to_string();
        for k in 0..self.num_domains {
            for c in 0..self.num_classes {
                header.push_str(&format!(",w_d{k}_c{c}"));
            }
        }
        writeln!(out, "{header}").map_err(io)?;
        for r in &self.records {
            let mut line = format!(
                "{},{:e},{},{:e},{:e},{:e}",
                r.iteration,
                r.task_loss,
                r.meta_loss.map(|v| format!("{v:e}")).unwrap_or_default(),
                r.weight_min,
                r.weight_max,
                r.weight_mean
            );
            for (s, &n) in r.cell_weight_sum.iter().zip(&r.cell_count) {
                line.push(',');
                if n > 0 {
                    line.push_str(&format!("{:e}", s / f64::from(n)));
                }
            }
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub theta: ParamSet<T>,
    pub psi: ParamSet<T>,
    pub iteration: usize,
    batch_rng: ChaCha8Rng,
    meta_rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub theta: ParamSet<T>,
    /// Final reweighting parameters; `None` for the baseline.
    pub psi: Option<ParamSet<T>>,
    pub history: History,
}

/// What one call to [`Trainer::step`] produced.
#[derive(Clone, Debug)]
pub struct StepOutcome<T> {
    /// `Θ̂^(t)`; `None` for the baseline.
    pub theta_hat: Option<ParamSet<T>>,
    pub step3_weights: Vec<T>,
}

enum Mode<'a> {
    SelfBalanced { balanced: &'a MultiDomainDataset },
    EqualWeight,
}

/// Iterative driver for both the self-balanced loop and the baseline.
///
/// The imbalanced batch stream depends only on the seed, so a self-balanced
/// run and a baseline run with the same seed see identical batches.
pub struct Trainer<'a, T: Scalar> {
    config: TrainConfig,
    mode: Mode<'a>,
    task: TaskNet,
    reweight: ReweightNet,
    imbalanced: &'a MultiDomainDataset,
    monitor: Option<&'a MultiDomainDataset>,
    state: TrainState<T>,
    history: History,
    epoch_len: usize,
    epoch_weight_sum: f64,
    epoch_weight_count: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn self_balanced(
        config: &TrainConfig,
        split: &'a DatasetSplit,
        monitor: Option<&'a MultiDomainDataset>,
    ) -> Result<Self, TrainError> {
        if split.balanced.num_domains() != split.imbalanced.num_domains() {
            return Err(TrainError::InvalidConfig(
                "balanced and imbalanced sets have different domain counts".into(),
            ));
        }
        Self::build(config, Mode::SelfBalanced { balanced: &split.balanced }, &split.imbalanced, monitor)
    }

    pub fn equal_weight(
        config: &TrainConfig,
        ds: &'a MultiDomainDataset,
        monitor: Option<&'a MultiDomainDataset>,
    ) -> Result<Self, TrainError> {
        Self::build(config, Mode::EqualWeight, ds, monitor)
    }

    fn build(
        config: &TrainConfig,
        mode: Mode<'a>,
        imbalanced: &'a MultiDomainDataset,
        monitor: Option<&'a MultiDomainDataset>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if imbalanced.is_empty() {
            return Err(TrainError::InvalidConfig("training set is empty".into()));
        }
        if let Some(m) = monitor {
            if m.num_domains() != imbalanced.num_domains() || m.num_classes() != imbalanced.num_classes() {
                return Err(TrainError::InvalidConfig(
                    "monitor set must have the training set's domains and classes".into(),
                ));
            }
        }
        let task = TaskNet::new(TaskNetConfig {
            input_dim: imbalanced.input_dim(),
            hidden_dims: config.task_hidden.clone(),
            num_classes: imbalanced.num_classes(),
        })?;
        let reweight = ReweightNet::new(ReweightNetConfig {
            num_domains: imbalanced.num_domains(),
            hidden_dim: config.reweight_hidden,
            use_domain_vector: !config.ablate_domain_vector,
        })?;
        let state = TrainState {
            theta: task.init_params(derive_seed(config.seed, 1)),
            psi: reweight.init_params(derive_seed(config.seed, 2)),
            iteration: 0,
            batch_rng: stream(config.seed, 1),
            meta_rng: stream(config.seed, 2),
        };
        let batch = config.n_per_domain * imbalanced.num_domains();
        Ok(Self {
            config: config.clone(),
            mode,
            task,
            reweight,
            imbalanced,
            monitor,
            state,
            history: History {
                num_domains: imbalanced.num_domains(),
                num_classes: imbalanced.num_classes(),
                ..History::default()
            },
            epoch_len: imbalanced.len().div_ceil(batch).max(1),
            epoch_weight_sum: 0.0,
            epoch_weight_count: 0,
        })
    }

    /// Replaces the initial parameters, e.g. to pin the reweighting network.
    pub fn with_params(mut self, theta: ParamSet<T>, psi: ParamSet<T>) -> Result<Self, TrainError> {
        if theta.layout() != self.state.theta.layout() || psi.layout() != self.state.psi.layout() {
            return Err(TrainError::InvalidConfig("parameter layout does not match the networks".into()));
        }
        self.state.theta = theta;
        self.state.psi = psi;
        Ok(self)
    }

    pub fn state(&self) -> &TrainState<T> {
        &self.state
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn task_net(&self) -> &TaskNet {
        &self.task
    }

    pub fn reweight_net(&self) -> &ReweightNet {
        &self.reweight
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    pub fn step(&mut self) -> Result<StepOutcome<T>, TrainError> {
        let t = self.state.iteration;
        let diverged = |e: TrainError| match e {
            TrainError::Autodiff(AutodiffError::NonFinite { op })
            | TrainError::Model(ModelError::Autodiff(AutodiffError::NonFinite { op })) => {
                TrainError::Diverged { iteration: t, detail: format!("non-finite value in {op}") }
            }
            other => other,
        };

        let mb = sample_minibatch(self.imbalanced, self.config.n_per_domain, &mut self.state.batch_rng)?;
        let batch = Batch::<T>::from_minibatch(&mb);
        let meta_batch = match self.mode {
            Mode::SelfBalanced { balanced } => {
                let mb = sample_minibatch(balanced, self.config.m_per_domain, &mut self.state.meta_rng)?;
                Some(Batch::<T>::from_minibatch(&mb))
            }
            Mode::EqualWeight => None,
        };

        if self.config.snapshot_every > 0 && t.is_multiple_of(self.config.snapshot_every) {
            if let Some(monitor) = self.monitor {
                let tally = CellTally::measure(&self.task, &self.state.theta, monitor)?;
                self.history.snapshots.push(AccuracySnapshot { iteration: t, per_cell: tally.accuracies() });
            }
        }

        let alpha = T::of(self.config.alpha);
        let (outcome, losses, meta_loss) = match &meta_batch {
            Some(meta_batch) => {
                let vu = step1_virtual_update(
                    &self.task,
                    &self.reweight,
                    &self.state.theta,
                    &self.state.psi,
                    &batch,
                    alpha,
                )
                .map_err(diverged)?;
                let mg = meta_gradient(&self.task, &self.reweight, &vu, &self.state.psi, &batch, meta_batch, alpha)
                    .map_err(diverged)?;
                let psi_next = step2_meta_update(&self.state.psi, &mg.grad_psi, T::of(self.config.beta))?;
                if !psi_next.is_finite() {
                    return Err(TrainError::Diverged { iteration: t, detail: "non-finite Ψ".into() });
                }
                let (theta_next, weights) =
                    step3_actual_update(&self.reweight, &self.state.theta, &psi_next, &batch, &vu, alpha)
                        .map_err(diverged)?;
                self.state.theta = theta_next;
                self.state.psi = psi_next;
                let losses = vu.losses.clone();
                (
                    StepOutcome { theta_hat: Some(vu.theta_hat), step3_weights: weights },
                    losses,
                    Some(mg.meta_loss.as_f64()),
                )
            }
            None => {
                let (losses, grads) =
                    per_sample_task_grads(&self.task, &self.state.theta, &batch).map_err(diverged)?;
                let weights = vec![T::one(); losses.len()];
                self.state.theta = weighted_step(&self.state.theta, alpha, &weights, &grads)?;
                (StepOutcome { theta_hat: None, step3_weights: weights }, losses, None)
            }
        };
        if !self.state.theta.is_finite() {
            return Err(TrainError::Diverged { iteration: t, detail: "non-finite Θ".into() });
        }

        self.log(t, &batch, &losses, meta_loss, &outcome.step3_weights);
        self.state.iteration += 1;
        Ok(outcome)
    }

    fn log(&mut self, t: usize, batch: &Batch<T>, losses: &[T], meta_loss: Option<f64>, weights: &[T]) {
        let c_count = self.history.num_classes;
        let cells = self.history.num_domains * c_count;
        let mut cell_weight_sum = vec![0.0; cells];
        let mut cell_count = vec![0u32; cells];
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for (i, w) in weights.iter().map(|w| w.as_f64()).enumerate() {
            let j = batch.domains[i] * c_count + batch.labels[i];
            cell_weight_sum[j] += w;
            cell_count[j] += 1;
            lo = lo.min(w);
            hi = hi.max(w);
            sum += w;
        }
        let n = weights.len() as f64;
        let task_loss = losses.iter().map(|l| l.as_f64()).sum::<f64>() / n;
        self.history.records.push(IterationRecord {
            iteration: t,
            task_loss,
            meta_loss,
            weight_min: lo,
            weight_max: hi,
            weight_mean: sum / n,
            cell_weight_sum,
            cell_count,
        });

        self.epoch_weight_sum += sum;
        self.epoch_weight_count += weights.len();
        if (t + 1).is_multiple_of(self.epoch_len) {
            let mean = self.epoch_weight_sum / self.epoch_weight_count as f64;
            if mean < WEIGHT_COLLAPSE_THRESHOLD {
                let msg = format!(
                    "mean sample weight {mean:.2e} over the epoch ending at iteration {t} is below {WEIGHT_COLLAPSE_THRESHOLD:e}; training has effectively stopped"
                );
                log::warn!("{msg}");
                self.history.warnings.push(msg);
            }
            self.epoch_weight_sum = 0.0;
            self.epoch_weight_count = 0;
        }
    }

    pub fn run(mut self) -> Result<TrainOutcome<T>, TrainError> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome<T> {
        let psi = match self.mode {
            Mode::SelfBalanced { .. } => Some(self.state.psi),
            Mode::EqualWeight => None,
        };
        TrainOutcome { theta: self.state.theta, psi, history: self.history }
    }
}

/// Runs the self-balanced loop for `config.iterations` iterations.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    split: &DatasetSplit,
    monitor: Option<&MultiDomainDataset>,
) -> Result<TrainOutcome<T>, TrainError> {
    Trainer::self_balanced(config, split, monitor)?.run()
}

/// Equal-weight SGD on the mean loss with the same batches and initial `Θ`.
pub fn train_erm<T: Scalar>(
    config: &TrainConfig,
    ds: &MultiDomainDataset,
    monitor: Option<&MultiDomainDataset>,
) -> Result<TrainOutcome<T>, TrainError> {
    Trainer::equal_weight(config, ds, monitor)?.run()
}

/// Trains one arm. The baseline uses only the imbalanced set.
pub fn run_arm<T: Scalar>(
    arm: Arm,
    config: &TrainConfig,
    split: &DatasetSplit,
    monitor: Option<&MultiDomainDataset>,
) -> Result<TrainOutcome<T>, TrainError> {
    match arm {
        Arm::Sbdg => train(&TrainConfig { ablate_domain_vector: false, ..config.clone() }, split, monitor),
        Arm::SbdgNoDomainVector => {
            train(&TrainConfig { ablate_domain_vector: true, ..config.clone() }, split, monitor)
        }
        Arm::Erm => train_erm(config, &split.imbalanced, monitor),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};
    use crate::data::{split_meta, CountSpec, GeneratorSpec, ImbalanceProfile, MetaPool};

    fn linear_task() -> TaskNet {
        TaskNet::new(TaskNetConfig { input_dim: 1, hidden_dims: vec![], num_classes: 2 }).unwrap()
    }

    fn reweight(k: usize) -> ReweightNet {
        ReweightNet::new(ReweightNetConfig { num_domains: k, hidden_dim: 3, use_domain_vector: true }).unwrap()
    }

    fn zero_theta() -> ParamSet<f64> {
        linear_task().init_params::<f64>(0).zeros_like()
    }

    // x = 1 in class 0 from domain 0, x = 2 in class 1 from domain 1.
    fn two_sample_batch() -> Batch<f64> {
        Batch {
            x: Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap(),
            labels: vec![0, 1],
            domains: vec![0, 1],
            domain_onehot: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        }
    }

    fn saturated_psi(rw: &ReweightNet) -> ParamSet<f64> {
        let mut psi = rw.init_params::<f64>(0).zeros_like();
        psi.get_mut("out.bias").unwrap().data_mut()[0] = 50.0;
        psi
    }

    #[test]
    fn default_config() {
        let c = TrainConfig::default();
        assert_eq!(c.alpha, 5e-4);
        assert_eq!(c.beta, 5e-5);
        assert!(c.validate().is_ok());
        assert!(TrainConfig { alpha: f64::NAN, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { beta: -1.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { n_per_domain: 0, ..c }.validate().is_err());
    }

    #[test]
    fn arm_names_round_trip() {
        for arm in [Arm::Sbdg, Arm::Erm, Arm::SbdgNoDomainVector] {
            assert_eq!(Arm::parse(arm.name()), Some(arm));
        }
        assert_eq!(Arm::parse("nope"), None);
    }

    #[test]
    fn step1_hand_computed() {
        // Zero logits give p = (1/2, 1/2). Per-sample weight gradients are
        // x(p - e_y): (-1/2, 1/2) and (1, -1); bias gradients (-1/2, 1/2) and
        // (1/2, -1/2). Zero Ψ gives w = 1/2, so with α = 1, n = 2:
        // Θ̂ = -(1/4)(g_1 + g_2) = W (-1/8, 1/8), b (0, 0).
        let vu = step1_virtual_update(
            &linear_task(),
            &reweight(2),
            &zero_theta(),
            &reweight(2).init_params::<f64>(0).zeros_like(),
            &two_sample_batch(),
            1.0,
        )
        .unwrap();
        assert_eq!(vu.weights, vec![0.5, 0.5]);
        let ln2 = std::f64::consts::LN_2;
        assert!((vu.losses[0] - ln2).abs() < 1e-15 && (vu.losses[1] - ln2).abs() < 1e-15);
        assert_eq!(vu.grads.row(0), &vec![-0.5, 0.5, -0.5, 0.5]);
        assert_eq!(vu.grads.row(1), &vec![1.0, -1.0, 0.5, -0.5]);
        assert_eq!(vu.theta_hat.flatten(), vec![-0.125, 0.125, 0.0, 0.0]);
    }

    #[test]
    fn step3_starts_from_theta_not_theta_hat() {
        let (task, rw) = (linear_task(), reweight(2));
        let batch = two_sample_batch();
        let psi = rw.init_params::<f64>(0).zeros_like();
        let vu = step1_virtual_update(&task, &rw, &zero_theta(), &psi, &batch, 1.0).unwrap();
        // Saturated Ψ' gives ŵ = 1: Θ' = -(1/2)(g_1 + g_2).
        let (next, w) = step3_actual_update(&rw, &zero_theta(), &saturated_psi(&rw), &batch, &vu, 1.0).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        assert_eq!(next.flatten(), vec![-0.25, 0.25, 0.0, 0.0]);
        // Unchanged Ψ reproduces the virtual step exactly.
        let (same, _) = step3_actual_update(&rw, &zero_theta(), &psi, &batch, &vu, 1.0).unwrap();
        assert_eq!(same, vu.theta_hat);
    }

    #[test]
    fn zero_weights_leave_theta_unchanged() {
        let theta = linear_task().init_params::<f64>(3);
        let (_, grads) = per_sample_task_grads(&linear_task(), &theta, &two_sample_batch()).unwrap();
        assert_eq!(weighted_step(&theta, 0.7, &[0.0, 0.0], &grads).unwrap(), theta);
    }

    #[test]
    fn constant_weights_match_plain_sgd() {
        let task = linear_task();
        let theta = task.init_params::<f64>(5);
        let batch = two_sample_batch();
        let (_, grads) = per_sample_task_grads(&task, &theta, &batch).unwrap();
        let (_, mean_grad) = meta_loss_and_grad(&task, &theta, &batch).unwrap();
        let stepped = weighted_step(&theta, 0.1, &[1.0, 1.0], &grads).unwrap();
        let mut sgd = theta.clone();
        sgd.axpy(-0.1, &mean_grad).unwrap();
        assert!(max_relative_error(&stepped, &sgd, 1e-12) < 1e-12);
    }

    #[test]
    fn saturated_or_frozen_reweighter_has_zero_meta_gradient() {
        let (task, rw) = (linear_task(), reweight(2));
        let batch = two_sample_batch();
        let theta = task.init_params::<f64>(1);
        let psi = saturated_psi(&rw);
        let vu = step1_virtual_update(&task, &rw, &theta, &psi, &batch, 1.0).unwrap();
        let mg = meta_gradient(&task, &rw, &vu, &psi, &batch, &batch, 1.0).unwrap();
        assert!(mg.grad_psi.flatten().iter().all(|&g| g == 0.0));
        assert_eq!(step2_meta_update(&psi, &mg.grad_psi, 0.3).unwrap(), psi);

        let psi = rw.init_params::<f64>(2);
        let vu = step1_virtual_update(&task, &rw, &theta, &psi, &batch, 0.0).unwrap();
        let mg = meta_gradient(&task, &rw, &vu, &psi, &batch, &batch, 0.0).unwrap();
        assert!(mg.grad_psi.flatten().iter().all(|&g| g == 0.0));
    }

    fn small_split(seed: u64) -> DatasetSplit {
        let spec = GeneratorSpec {
            num_domains: 2,
            num_classes: 2,
            input_dim: 3,
            profile: ImbalanceProfile {
                counts: CountSpec::Law { majority: 20, minority: 4, minority_cells: vec![[1, 0]] },
                noise: 1.0,
                class_separation: 2.0,
                domain_shift: 1.0,
                geometry_seed: 7,
            },
        };
        let ds = spec.generate(seed).unwrap();
        split_meta(&ds, 3, MetaPool::default(), seed).unwrap()
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let split = small_split(11);
        let mut rng = stream(4, 9);
        let batch = Batch::<f64>::from_minibatch(&sample_minibatch(&split.imbalanced, 4, &mut rng).unwrap());
        let meta = Batch::<f64>::from_minibatch(&sample_minibatch(&split.balanced, 2, &mut rng).unwrap());
        let task = TaskNet::new(TaskNetConfig { input_dim: 3, hidden_dims: vec![5], num_classes: 2 }).unwrap();
        let rw = ReweightNet::new(ReweightNetConfig { num_domains: 2, hidden_dim: 6, use_domain_vector: true })
            .unwrap();
        let theta = task.init_params::<f64>(21);
        let psi = rw.init_params::<f64>(22);
        let alpha = 0.5;

        let vu = step1_virtual_update(&task, &rw, &theta, &psi, &batch, alpha).unwrap();
        let analytic = meta_gradient(&task, &rw, &vu, &psi, &batch, &meta, alpha).unwrap().grad_psi;
        let numeric = finite_diff_grad(
            |p| {
                let vu = step1_virtual_update(&task, &rw, &theta, p, &batch, alpha).unwrap();
                meta_loss_and_grad(&task, &vu.theta_hat, &meta).unwrap().0
            },
            &psi,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric, 1e-7);
        assert!(err < 1e-4, "meta-gradient relative error {err:e}");
        assert!(analytic.flatten().iter().any(|&g| g != 0.0));
    }

    fn tiny_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            alpha: 0.05,
            beta: 0.01,
            n_per_domain: 4,
            m_per_domain: 2,
            seed: 3,
            task_hidden: vec![4],
            reweight_hidden: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_iterations_return_the_initialization() {
        let split = small_split(1);
        let trainer = Trainer::<f64>::self_balanced(&tiny_config(0), &split, None).unwrap();
        let init = trainer.state().theta.clone();
        let out = trainer.run().unwrap();
        assert_eq!(out.theta, init);
        assert!(out.history.records.is_empty());
    }

    #[test]
    fn beta_zero_keeps_psi_fixed() {
        let split = small_split(2);
        let config = TrainConfig { beta: 0.0, ..tiny_config(5) };
        let trainer = Trainer::<f64>::self_balanced(&config, &split, None).unwrap();
        let psi0 = trainer.state().psi.clone();
        assert_eq!(trainer.run().unwrap().psi.unwrap(), psi0);
    }

    #[test]
    fn zero_psi_without_meta_learning_is_half_step_erm() {
        let split = small_split(3);
        let config = TrainConfig { beta: 0.0, ..tiny_config(6) };
        let sb = Trainer::<f64>::self_balanced(&config, &split, None).unwrap();
        let (theta0, psi0) = (sb.state().theta.clone(), sb.state().psi.zeros_like());
        let sb = sb.with_params(theta0, psi0).unwrap().run().unwrap();
        let erm = train_erm::<f64>(&TrainConfig { alpha: config.alpha * 0.5, ..config }, &split.imbalanced, None)
            .unwrap();
        assert_eq!(sb.theta, erm.theta);
    }

    #[test]
    fn runs_are_deterministic() {
        let split = small_split(4);
        let a = train::<f64>(&tiny_config(4), &split, None).unwrap();
        let b = train::<f64>(&tiny_config(4), &split, None).unwrap();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.psi, b.psi);
        assert_eq!(a.history, b.history);
        let c = train::<f64>(&TrainConfig { seed: 99, ..tiny_config(4) }, &split, None).unwrap();
        assert_ne!(a.theta, c.theta);
    }

    #[test]
    fn collapse_is_warned() {
        let split = small_split(5);
        let config = TrainConfig { beta: 0.0, ..tiny_config(12) };
        let trainer = Trainer::<f64>::self_balanced(&config, &split, None).unwrap();
        let mut psi = trainer.state().psi.zeros_like();
        psi.get_mut("out.bias").unwrap().data_mut()[0] = -50.0;
        let theta = trainer.state().theta.clone();
        let out = trainer.with_params(theta, psi).unwrap().run().unwrap();
        assert!(!out.history.warnings.is_empty());
    }

    #[test]
    fn history_records_every_iteration_and_snapshots() {
        let split = small_split(6);
        let config = TrainConfig { snapshot_every: 2, ..tiny_config(5) };
        let out = train::<f64>(&config, &split, Some(&split.imbalanced)).unwrap();
        assert_eq!(out.history.records.len(), 5);
        let iters: Vec<usize> = out.history.snapshots.iter().map(|s| s.iteration).collect();
        assert_eq!(iters, vec![0, 2, 4]);
        let (lo, hi) = out.history.weight_bounds().unwrap();
        assert!(0.0 <= lo && hi <= 1.0);
        for r in &out.history.records {
            assert_eq!(r.cell_count.iter().sum::<u32>(), 8);
        }
    }
}
