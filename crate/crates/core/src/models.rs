//! The task classifier and the auxiliary reweighting network.
//!
//! Both networks are stateless descriptions of an architecture; their
//! parameters live in a [`ParamSet`] so the trainer can form virtual and
//! actual updates freely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BoundParams, ParamSet, Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("row {row} of the domain matrix is not a one-hot vector")]
    NotOneHot { row: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl TaskNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidConfig("all layer widths must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReweightNetConfig {
    pub num_domains: usize,
    pub hidden_dim: usize,
    /// When false the network sees only the loss (the ablation without the
    /// conditional domain vector).
    pub use_domain_vector: bool,
}

impl ReweightNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_domains == 0 || self.hidden_dim == 0 {
            return Err(ModelError::InvalidConfig(
                "num_domains and hidden_dim must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        if self.use_domain_vector {
            self.num_domains + 1
        } else {
            1
        }
    }
}

fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Glorot-uniform weights, zero biases, drawn layer by layer from one
/// ChaCha8 stream seeded with `seed`.
fn glorot_init<T: Scalar>(layers: &[(String, usize, usize)], seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, fan_in, fan_out) in layers {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w: Vec<T> = (0..fan_in * fan_out)
            .map(|_| T::of(rng.random_range(-limit..limit)))
            .collect();
        params
            .insert(weight_name(name), Tensor::new(vec![*fan_in, *fan_out], w).expect("finite"))
            .expect("unique layer names");
        params
            .insert(bias_name(name), Tensor::zeros(&[*fan_out]))
            .expect("unique layer names");
    }
    params
}

fn linear_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    layer: &str,
    x: Var,
) -> Result<Var, AutodiffError> {
    let h = tape.matmul(x, bound.var(&weight_name(layer))?)?;
    tape.add_bias(h, bound.var(&bias_name(layer))?)
}

fn linear<T: Scalar>(params: &ParamSet<T>, layer: &str, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let w = params
        .get(&weight_name(layer))
        .ok_or_else(|| AutodiffError::UnknownParam(weight_name(layer)))?;
    let b = params
        .get(&bias_name(layer))
        .ok_or_else(|| AutodiffError::UnknownParam(bias_name(layer)))?;
    Ok(x.matmul(w)?.add_bias(b)?)
}

/// MLP classifier producing logits; the softmax is folded into the loss.
#[derive(Clone, Debug)]
pub struct TaskNet {
    config: TaskNetConfig,
}

impl TaskNet {
    pub fn new(config: TaskNetConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &TaskNetConfig {
        &self.config
    }

    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut widths = vec![self.config.input_dim];
        widths.extend(&self.config.hidden_dims);
        widths.push(self.config.num_classes);
        widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| (format!("layer{i}"), w[0], w[1]))
            .collect()
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        glorot_init(&self.layers(), seed)
    }

    /// Records the forward pass on `tape` and returns the logits node.
    pub fn logits_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        x: Var,
    ) -> Result<Var, ModelError> {
        let layers = self.layers();
        let mut h = x;
        for (i, (name, _, _)) in layers.iter().enumerate() {
            h = linear_tape(tape, bound, name, h)?;
            if i + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Logits for an `n×input_dim` batch.
    pub fn forward<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(x)?;
        let layers = self.layers();
        let mut h = x.clone();
        for (i, (name, _, _)) in layers.iter().enumerate() {
            h = linear(params, name, &h)?;
            if i + 1 < layers.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn per_sample_losses<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<Tensor<T>, ModelError> {
        if labels.is_empty() {
            return Err(ModelError::InvalidConfig("empty batch".into()));
        }
        let logits = self.forward(params, x)?;
        Ok(crate::autodiff::softmax_xent_forward(&logits, labels)?.0)
    }

    pub fn predict<T: Scalar>(&self, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Vec<usize>, ModelError> {
        Ok(self.forward(params, x)?.argmax_rows())
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        if x.shape().len() != 2 || x.cols() != self.config.input_dim {
            return Err(AutodiffError::Shape {
                op: "task_forward",
                detail: format!("expected n×{}, got {:?}", self.config.input_dim, x.shape()),
            }
            .into());
        }
        Ok(())
    }
}

/// Two fully connected layers (ReLU hidden, sigmoid output) mapping a
/// sample's domain one-hot and loss to a weight in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ReweightNet {
    config: ReweightNetConfig,
}

impl ReweightNet {
    pub fn new(config: ReweightNetConfig) -> Result<Self, ModelError> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ReweightNetConfig {
        &self.config
    }

    fn layers(&self) -> Vec<(String, usize, usize)> {
        vec![
            ("hidden".to_string(), self.config.input_width(), self.config.hidden_dim),
            ("out".to_string(), self.config.hidden_dim, 1),
        ]
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        glorot_init(&self.layers(), seed)
    }

    /// Records `sigmoid(out(relu(hidden([d, L]))))` and returns the `n`-vector
    /// of weights. `losses` is an `n`-vector, `domains` an `n×K` one-hot matrix.
    pub fn weights_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        losses: Var,
        domains: Var,
    ) -> Result<Var, ModelError> {
        let n = tape.value(losses).numel();
        let loss_col = tape.reshape(losses, vec![n, 1])?;
        let input = if self.config.use_domain_vector {
            tape.concat(domains, loss_col)?
        } else {
            loss_col
        };
        let h = linear_tape(tape, bound, "hidden", input)?;
        let h = tape.relu(h)?;
        let o = linear_tape(tape, bound, "out", h)?;
        let w = tape.sigmoid(o)?;
        Ok(tape.reshape(w, vec![n])?)
    }

    /// Weights for `n` samples from their losses and `n×K` domain one-hots.
    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        losses: &Tensor<T>,
        domains: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        let n = losses.numel();
        if !losses.is_finite() {
            return Err(AutodiffError::NonFinite { op: "reweight_forward" }.into());
        }
        let loss_col = losses.reshape(vec![n, 1])?;
        let input = if self.config.use_domain_vector {
            self.check_domains(domains, n)?;
            domains.concat_cols(&loss_col)?
        } else {
            loss_col
        };
        let h = linear(params, "hidden", &input)?.relu();
        let w = linear(params, "out", &h)?.sigmoid();
        Ok(w.reshape(vec![n])?)
    }

    pub fn check_domains<T: Scalar>(&self, domains: &Tensor<T>, n: usize) -> Result<(), ModelError> {
        if domains.shape() != [n, self.config.num_domains] {
            return Err(AutodiffError::Shape {
                op: "reweight_forward",
                detail: format!(
                    "domain matrix must be {n}×{}, got {:?}",
                    self.config.num_domains,
                    domains.shape()
                ),
            }
            .into());
        }
        for row in 0..n {
            let r = domains.row(row);
            let ones = r.iter().filter(|&&v| v == T::one()).count();
            let zeros = r.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || ones + zeros != r.len() {
                return Err(ModelError::NotOneHot { row });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error};

    fn task(hidden: Vec<usize>) -> TaskNet {
        TaskNet::new(TaskNetConfig { input_dim: 2, hidden_dims: hidden, num_classes: 3 }).unwrap()
    }

    fn reweight(use_domain_vector: bool) -> ReweightNet {
        ReweightNet::new(ReweightNetConfig { num_domains: 3, hidden_dim: 4, use_domain_vector })
            .unwrap()
    }

    #[test]
    fn configs_are_validated() {
        assert!(TaskNet::new(TaskNetConfig { input_dim: 2, hidden_dims: vec![], num_classes: 1 }).is_err());
        assert!(TaskNet::new(TaskNetConfig { input_dim: 0, hidden_dims: vec![], num_classes: 2 }).is_err());
        assert!(TaskNet::new(TaskNetConfig { input_dim: 2, hidden_dims: vec![0], num_classes: 2 }).is_err());
        assert!(ReweightNet::new(ReweightNetConfig { num_domains: 0, hidden_dim: 1, use_domain_vector: true }).is_err());
        assert_eq!(reweight(true).config().input_width(), 4);
        assert_eq!(reweight(false).config().input_width(), 1);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let net = task(vec![5]);
        let a = net.init_params::<f64>(7);
        assert_eq!(a, net.init_params::<f64>(7));
        assert_ne!(a, net.init_params::<f64>(8));
        for (name, t) in a.iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0));
            } else {
                let limit = (6.0 / t.shape().iter().sum::<usize>() as f64).sqrt();
                assert!(t.data().iter().all(|v| v.abs() <= limit));
            }
        }
    }

    #[test]
    fn linear_net_parameter_count() {
        let net = TaskNet::new(TaskNetConfig { input_dim: 7, hidden_dims: vec![], num_classes: 4 }).unwrap();
        assert_eq!(net.init_params::<f64>(0).numel(), 7 * 4 + 4);
    }

    #[test]
    fn zero_params_give_uniform_prediction() {
        let net = task(vec![4]);
        let zero = net.init_params::<f64>(0).zeros_like();
        let x = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.3, 0.7]).unwrap();
        let logits = net.forward(&zero, &x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let losses = net.per_sample_losses(&zero, &x, &[0, 2]).unwrap();
        for &l in losses.data() {
            assert!((l - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn one_layer_logits_equal_first_weight_row() {
        let net = task(vec![]);
        let mut p = net.init_params::<f64>(3);
        p.get_mut("layer0.weight")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let logits = net.forward(&p, &Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(logits.data(), &[1.0, 2.0, 3.0]);
        assert!(net.forward(&p, &Tensor::<f64>::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn losses_match_manual_log_probabilities() {
        let net = task(vec![]);
        let mut p = net.init_params::<f64>(3);
        p.get_mut("layer0.weight")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, -1.0, 0.5, 2.0, 0.0]);
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0]]).unwrap();
        let labels = [0, 1, 2];
        let losses = net.per_sample_losses(&p, &x, &labels).unwrap();
        // Logits by hand: [1,0,-1], [0.5,2,0], [1.5,-2,-2].
        let rows = [[1.0f64, 0.0, -1.0], [0.5, 2.0, 0.0], [1.5, -2.0, -2.0]];
        for (i, row) in rows.iter().enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let expected = -(row[labels[i]].exp() / z).ln();
            assert!((losses.data()[i] - expected).abs() < 1e-12);
        }
        assert!(net.per_sample_losses(&p, &x, &[0, 1, 3]).is_err());
    }

    #[test]
    fn confident_correct_logits_have_near_zero_loss() {
        let net = task(vec![]);
        let mut p = net.init_params::<f64>(0).zeros_like();
        p.get_mut("layer0.bias").unwrap().data_mut().copy_from_slice(&[40.0, 0.0, 0.0]);
        let x = Tensor::<f64>::zeros(&[2, 2]);
        for &l in net.per_sample_losses(&p, &x, &[0, 0]).unwrap().data() {
            assert!(l < 1e-15);
        }
    }

    #[test]
    fn zero_reweight_params_give_half() {
        let net = reweight(true);
        let zero = net.init_params::<f64>(0).zeros_like();
        let losses = Tensor::vector(vec![0.1, 3.0]).unwrap();
        let d = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(net.forward(&zero, &losses, &d).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn reweight_matches_hand_computed_forward() {
        let net = reweight(true);
        let p = net.init_params::<f64>(11);
        let w1 = p.get("hidden.weight").unwrap();
        let w2 = p.get("out.weight").unwrap();
        // Input [1, 0, 0, 1.0]: hidden pre-activation = row 0 + row 3 of W1.
        let mut out = 0.0;
        for j in 0..4 {
            let pre = w1.data()[j] + 1.0 * w1.data()[3 * 4 + j];
            out += pre.max(0.0) * w2.data()[j];
        }
        let expected = 1.0 / (1.0 + (-out).exp());
        let got = net
            .forward(
                &p,
                &Tensor::vector(vec![1.0]).unwrap(),
                &Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap(),
            )
            .unwrap();
        assert!((got.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_identical_weights() {
        let net = reweight(true);
        let p = net.init_params::<f64>(5);
        let d = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let w = net.forward(&p, &Tensor::vector(vec![0.7, 0.7]).unwrap(), &d).unwrap();
        assert_eq!(w.data()[0], w.data()[1]);
    }

    #[test]
    fn reweight_rejects_bad_domain_rows() {
        let net = reweight(true);
        let p = net.init_params::<f64>(5);
        let losses = Tensor::vector(vec![0.7]).unwrap();
        let two_hot = Tensor::from_rows(&[vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(net.forward(&p, &losses, &two_hot), Err(ModelError::NotOneHot { row: 0 }));
        let narrow = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(net.forward(&p, &losses, &narrow).is_err());
        // The ablated network ignores the domain matrix entirely.
        let ablated = reweight(false);
        let q = ablated.init_params::<f64>(5);
        assert!(ablated.forward(&q, &losses, &two_hot).is_ok());
    }

    #[test]
    fn tape_forward_matches_pure_forward_bitwise() {
        let net = task(vec![6, 4]);
        let p = net.init_params::<f64>(9);
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1]]).unwrap();
        let mut tape = Tape::new();
        let bound = tape.bind(&p);
        let xv = tape.leaf(x.clone());
        let z = net.logits_on_tape(&mut tape, &bound, xv).unwrap();
        assert_eq!(tape.value(z), &net.forward(&p, &x).unwrap());
    }

    #[test]
    fn mean_loss_gradient_matches_finite_differences() {
        let net = task(vec![5]);
        let p = net.init_params::<f64>(21);
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.1], vec![-0.4, 0.9]]).unwrap();
        let labels = [2, 0, 1];
        let mut tape = Tape::new();
        let bound = tape.bind(&p);
        let xv = tape.leaf(x.clone());
        let z = net.logits_on_tape(&mut tape, &bound, xv).unwrap();
        let l = tape.softmax_xent(z, &labels).unwrap();
        let m = tape.mean(l).unwrap();
        let analytic = tape.backward(m).unwrap().params(&bound);
        let f = |q: &ParamSet<f64>| {
            let l = net.per_sample_losses(q, &x, &labels).unwrap();
            l.data().iter().sum::<f64>() / 3.0
        };
        let numeric = finite_diff_grad(f, &p, 1e-6);
        assert!(max_relative_error(&analytic, &numeric, 1e-7) < 1e-5);
    }
}
