//! Finite-difference verification of every backward rule, the two networks
//! and the meta-gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::{finite_diff_grad, max_relative_error, BoundParams, Fault, ParamSet, Tape, Tensor, Var};
use crate::models::{ReweightNet, ReweightNetConfig, TaskNet, TaskNetConfig};
use crate::trainer::{meta_gradient, meta_loss_and_grad, step1_virtual_update, Batch, TrainError};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const META_TOLERANCE: f64 = 1e-4;
pub const STEPS: [f64; 2] = [1e-6, 1e-5];
/// Denominator floor of the relative error; below it the error is absolute.
pub const ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub step: f64,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<16} step {:.0e}  max rel err {:.3e}  tol {:.0e}  {}",
            self.name,
            self.step,
            self.max_relative_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed())
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &BoundParams) -> Result<Var, TrainError>>;

struct Case {
    name: &'static str,
    inputs: ParamSet<f64>,
    build: Build,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite draws")
}

/// Normal draws pushed at least 0.1 away from zero, so a finite-difference
/// probe never straddles the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    normal(rng, shape).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

fn inputs(named: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (name, t) in named {
        p.insert(name, t).expect("distinct names");
    }
    p
}

fn unary(op: fn(&mut Tape<f64>, Var) -> Result<Var, crate::autodiff::AutodiffError>) -> Build {
    Box::new(move |tape, b| Ok(op(tape, b.var("a")?)?))
}

fn binary(op: fn(&mut Tape<f64>, Var, Var) -> Result<Var, crate::autodiff::AutodiffError>) -> Build {
    Box::new(move |tape, b| Ok(op(tape, b.var("a")?, b.var("b")?)?))
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let (n, d, h) = (3, 4, 5);
    let weights: Vec<f64> = (0..n * h).map(|_| rng.sample(StandardNormal)).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % h).collect();
    vec![
        Case {
            name: "matmul",
            inputs: inputs(vec![("a", normal(rng, &[n, d])), ("b", normal(rng, &[d, h]))]),
            build: binary(Tape::matmul),
        },
        Case {
            name: "add_bias",
            inputs: inputs(vec![("a", normal(rng, &[n, h])), ("b", normal(rng, &[h]))]),
            build: binary(Tape::add_bias),
        },
        Case {
            name: "add",
            inputs: inputs(vec![("a", normal(rng, &[n, h])), ("b", normal(rng, &[n, h]))]),
            build: binary(Tape::add),
        },
        Case {
            name: "mul",
            inputs: inputs(vec![("a", normal(rng, &[n, h])), ("b", normal(rng, &[n, h]))]),
            build: binary(Tape::mul),
        },
        Case {
            name: "scale",
            inputs: inputs(vec![("a", normal(rng, &[n, h]))]),
            build: Box::new(|tape, b| Ok(tape.scale(b.var("a")?, -1.75)?)),
        },
        Case { name: "relu", inputs: inputs(vec![("a", off_kink(rng, &[n, h]))]), build: unary(Tape::relu) },
        Case { name: "sigmoid", inputs: inputs(vec![("a", normal(rng, &[n, h]))]), build: unary(Tape::sigmoid) },
        Case {
            name: "concat",
            inputs: inputs(vec![("a", normal(rng, &[n, 2])), ("b", normal(rng, &[n, 3]))]),
            build: binary(Tape::concat),
        },
        Case {
            name: "reshape",
            inputs: inputs(vec![("a", normal(rng, &[n, h]))]),
            build: Box::new(move |tape, b| Ok(tape.reshape(b.var("a")?, vec![n * h])?)),
        },
        Case { name: "sum", inputs: inputs(vec![("a", normal(rng, &[n, h]))]), build: unary(Tape::sum) },
        Case { name: "mean", inputs: inputs(vec![("a", normal(rng, &[n, h]))]), build: unary(Tape::mean) },
        Case {
            name: "weighted_sum",
            inputs: inputs(vec![("a", normal(rng, &[n, h]))]),
            build: Box::new(move |tape, b| Ok(tape.weighted_sum(b.var("a")?, &weights)?)),
        },
        Case {
            name: "softmax_xent",
            inputs: inputs(vec![("a", normal(rng, &[n, h]))]),
            build: Box::new(move |tape, b| Ok(tape.softmax_xent(b.var("a")?, &labels)?)),
        },
    ]
}

fn network_cases(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Case>, TrainError> {
    let (n, d, k, c) = (5, 4, 3, 3);
    let task = TaskNet::new(TaskNetConfig { input_dim: d, hidden_dims: vec![6, 5], num_classes: c })?;
    let x = normal(rng, &[n, d]);
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let mlp = Case {
        name: "task_mlp",
        inputs: task.init_params(seed),
        build: Box::new(move |tape, b| {
            let xv = tape.leaf(x.clone());
            let logits = task.logits_on_tape(tape, b, xv)?;
            let losses = tape.softmax_xent(logits, &labels)?;
            Ok(tape.mean(losses)?)
        }),
    };

    let reweight = ReweightNet::new(ReweightNetConfig { num_domains: k, hidden_dim: 6, use_domain_vector: true })?;
    let losses = normal(rng, &[n]).map(f64::abs);
    let mut onehot = Tensor::zeros(&[n, k]);
    for i in 0..n {
        onehot.data_mut()[i * k + i % k] = 1.0;
    }
    let coefs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let rw = Case {
        name: "reweight_net",
        inputs: reweight.init_params(seed ^ 1),
        build: Box::new(move |tape, b| {
            let l = tape.leaf(losses.clone());
            let dv = tape.leaf(onehot.clone());
            let w = reweight.weights_on_tape(tape, b, l, dv)?;
            Ok(tape.weighted_sum(w, &coefs)?)
        }),
    };
    Ok(vec![mlp, rw])
}

/// Reduces a non-scalar output to a scalar with fixed random coefficients so
/// every output entry contributes a distinct weight.
fn scalar_output(tape: &mut Tape<f64>, out: Var, coefs: &[f64]) -> Result<Var, TrainError> {
    let n = tape.value(out).numel();
    if tape.value(out).shape().is_empty() {
        return Ok(out);
    }
    Ok(tape.weighted_sum(out, &coefs[..n])?)
}

fn check_case(case: &Case, coefs: &[f64], fault: Option<Fault>) -> Result<Vec<CheckResult>, TrainError> {
    let mut tape = match fault {
        Some(f) => Tape::with_fault(f),
        None => Tape::new(),
    };
    let bound = tape.bind(&case.inputs);
    let out = (case.build)(&mut tape, &bound)?;
    let out = scalar_output(&mut tape, out, coefs)?;
    let analytic = tape.backward(out)?.params(&bound);

    let eval = |p: &ParamSet<f64>| -> f64 {
        let mut tape = Tape::new();
        let bound = tape.bind(p);
        let out = (case.build)(&mut tape, &bound).expect("forward succeeded at the base point");
        let out = scalar_output(&mut tape, out, coefs).expect("same shape as at the base point");
        tape.value(out).data()[0]
    };
    Ok(STEPS
        .iter()
        .map(|&step| CheckResult {
            name: case.name.to_string(),
            step,
            max_relative_error: max_relative_error(&analytic, &finite_diff_grad(eval, &case.inputs, step), ERROR_FLOOR),
            tolerance: OP_TOLERANCE,
        })
        .collect())
}

fn meta_gradient_check(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<CheckResult>, TrainError> {
    let (k, c, d, n, m) = (2, 2, 3, 8, 4);
    let task = TaskNet::new(TaskNetConfig { input_dim: d, hidden_dims: vec![5], num_classes: c })?;
    let reweight = ReweightNet::new(ReweightNetConfig { num_domains: k, hidden_dim: 6, use_domain_vector: true })?;
    let batch = |rng: &mut ChaCha8Rng, n: usize| {
        let domains: Vec<usize> = (0..n).map(|i| i % k).collect();
        let mut onehot = Tensor::zeros(&[n, k]);
        for (i, &dk) in domains.iter().enumerate() {
            onehot.data_mut()[i * k + dk] = 1.0;
        }
        Batch { x: normal(rng, &[n, d]), labels: (0..n).map(|i| (i / k) % c).collect(), domains, domain_onehot: onehot }
    };
    let imbalanced = batch(rng, n);
    let balanced = batch(rng, m);
    let theta = task.init_params::<f64>(seed ^ 2);
    let psi = reweight.init_params::<f64>(seed ^ 3);
    let alpha = 0.5;

    let vu = step1_virtual_update(&task, &reweight, &theta, &psi, &imbalanced, alpha)?;
    let analytic = meta_gradient(&task, &reweight, &vu, &psi, &imbalanced, &balanced, alpha)?.grad_psi;
    let eval = |p: &ParamSet<f64>| {
        let vu = step1_virtual_update(&task, &reweight, &theta, p, &imbalanced, alpha).expect("finite step");
        meta_loss_and_grad(&task, &vu.theta_hat, &balanced).expect("finite loss").0
    };
    Ok(STEPS
        .iter()
        .map(|&step| CheckResult {
            name: "meta_gradient".into(),
            step,
            max_relative_error: max_relative_error(&analytic, &finite_diff_grad(eval, &psi, step), ERROR_FLOOR),
            tolerance: META_TOLERANCE,
        })
        .collect())
}

/// Runs every check. `fault` corrupts the analytic side of the op and
/// network checks so the report must come back failing.
pub fn run_gradchecks(seed: u64, fault: Option<Fault>) -> Result<GradcheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coefs: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
    let mut cases = op_cases(&mut rng);
    cases.extend(network_cases(&mut rng, seed)?);
    let mut report = GradcheckReport::default();
    for case in &cases {
        report.results.extend(check_case(case, &coefs, fault)?);
    }
    report.results.extend(meta_gradient_check(&mut rng, seed)?);
    Ok(report)
}
