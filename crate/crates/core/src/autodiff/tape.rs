use crate::scalar::Scalar;

use super::{AutodiffError, ParamLayout, ParamSet, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient corruptions, used to check that the gradient checker
/// actually catches broken backward rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the sigmoid backward rule by `1 + 1e-3`.
    SigmoidGradient,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Mul,
    Scale(T),
    Relu,
    Sigmoid,
    Concat { left_cols: usize },
    Reshape,
    Sum,
    Mean,
    WeightedSum(Vec<T>),
    /// Per-row cross-entropy; saves the row softmax.
    SoftmaxXent { labels: Vec<usize>, probs: Tensor<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::AddBias => "add_bias",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Concat { .. } => "concat",
            Op::Reshape => "reshape",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::WeightedSum(_) => "weighted_sum",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: Vec<usize>,
    value: Tensor<T>,
}

/// Linear record of a forward computation. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

/// Parameters of a [`ParamSet`] registered as tape leaves.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<(String, Var)>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var, AutodiffError> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    adjoints: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.adjoints[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn params(&self, bound: &BoundParams) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for (name, v) in bound.iter() {
            out.insert(name, self.wrt(v))
                .expect("bound parameter names are unique");
        }
        out
    }
}

/// Per-sample parameter gradients stored as an `n × P` row-major matrix,
/// one flattened gradient per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PerSampleGrads<T> {
    layout: ParamLayout,
    samples: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> PerSampleGrads<T> {
    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn sample(&self, i: usize) -> ParamSet<T> {
        ParamSet::from_flat(&self.layout, self.row(i)).expect("row width matches layout")
    }

    /// `Σ_i weights[i] · g_i`, accumulated in sample order.
    pub fn weighted_sum(&self, weights: &[T]) -> Result<Vec<T>, AutodiffError> {
        self.check_len(weights.len())?;
        let mut acc = vec![T::zero(); self.width];
        for (i, &w) in weights.iter().enumerate() {
            for (a, &g) in acc.iter_mut().zip(self.row(i)) {
                *a += w * g;
            }
        }
        Ok(acc)
    }

    /// `⟨direction, g_i⟩` for every sample.
    pub fn dot_each(&self, direction: &[T]) -> Result<Vec<T>, AutodiffError> {
        if direction.len() != self.width {
            return Err(AutodiffError::Shape {
                op: "per_sample_dot",
                detail: format!("direction has {} entries, gradients {}", direction.len(), self.width),
            });
        }
        Ok((0..self.samples)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(direction)
                    .fold(T::zero(), |acc, (&g, &h)| acc + g * h)
            })
            .collect())
    }

    fn check_len(&self, n: usize) -> Result<(), AutodiffError> {
        if n == self.samples {
            Ok(())
        } else {
            Err(AutodiffError::Shape {
                op: "per_sample_weights",
                detail: format!("{n} weights for {} samples", self.samples),
            })
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self { nodes: Vec::new(), fault: Some(fault) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_unchecked(Op::Leaf, vec![], value)
    }

    /// Records every entry of `params` as a leaf.
    pub fn bind(&mut self, params: &ParamSet<T>) -> BoundParams {
        BoundParams {
            vars: params
                .iter()
                .map(|(name, t)| (name.to_string(), self.leaf(t.clone())))
                .collect(),
        }
    }

    fn push_unchecked(&mut self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, inputs, value });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<usize>, value: Tensor<T>) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        Ok(self.push_unchecked(op, inputs, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul, vec![a.0, b.0], out)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).add_bias(self.value(bias))?;
        self.push(Op::AddBias, vec![x.0, bias.0], out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        self.push(Op::Add, vec![a.0, b.0], out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let out = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul, vec![a.0, b.0], out)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, AutodiffError> {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale(c), vec![x.0], out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).relu();
        self.push(Op::Relu, vec![x.0], out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let out = self.value(x).sigmoid();
        self.push(Op::Sigmoid, vec![x.0], out)
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let left_cols = self.value(a).cols();
        let out = self.value(a).concat_cols(self.value(b))?;
        self.push(Op::Concat { left_cols }, vec![a.0, b.0], out)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        let out = self.value(x).reshape(shape)?;
        self.push(Op::Reshape, vec![x.0], out)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        self.push(Op::Sum, vec![x.0], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v);
        let n = T::of(t.numel() as f64);
        self.push(Op::Mean, vec![x.0], Tensor::scalar(s / n))
    }

    /// `Σ_i weights[i] · x_i` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.numel() != weights.len() {
            return Err(AutodiffError::Shape {
                op: "weighted_sum",
                detail: format!("{} weights for {} values", weights.len(), t.numel()),
            });
        }
        let s = t
            .data()
            .iter()
            .zip(weights)
            .fold(T::zero(), |a, (&v, &w)| a + w * v);
        self.push(Op::WeightedSum(weights.to_vec()), vec![x.0], Tensor::scalar(s))
    }

    /// Per-sample cross-entropy `-log softmax(logits_i)[labels_i]`, as an `n`-vector.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let (losses, probs) = softmax_xent_forward(self.value(logits), labels)?;
        self.push(
            Op::SoftmaxXent { labels: labels.to_vec(), probs },
            vec![logits.0],
            losses,
        )
    }

    fn zip_same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(AutodiffError::Shape {
                op,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, AutodiffError> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(AutodiffError::NonScalarOutput { shape: out.shape().to_vec() });
        }
        self.backward_seeded(output, Tensor::ones(out.shape()))
    }

    fn backward_seeded(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>, AutodiffError> {
        let mut adj: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(upstream) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            for (input, contribution) in self.local_grads(node, &upstream)? {
                accumulate(&mut adj[input], contribution);
            }
            adj[idx] = Some(upstream);
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn local_grads(
        &self,
        node: &Node<T>,
        up: &Tensor<T>,
    ) -> Result<Vec<(usize, Tensor<T>)>, AutodiffError> {
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let grads = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul => {
                let da = up.matmul(&input(1).transpose()?)?;
                let db = input(0).transpose()?.matmul(up)?;
                vec![(node.inputs[0], da), (node.inputs[1], db)]
            }
            Op::AddBias => {
                let h = up.cols();
                let mut db = vec![T::zero(); h];
                for i in 0..up.rows() {
                    for (d, &u) in db.iter_mut().zip(up.row(i)) {
                        *d += u;
                    }
                }
                vec![
                    (node.inputs[0], up.clone()),
                    (node.inputs[1], Tensor::from_parts(vec![h], db)),
                ]
            }
            Op::Add => vec![(node.inputs[0], up.clone()), (node.inputs[1], up.clone())],
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                let da = zip_map(up, b, |u, y| u * y);
                let db = zip_map(up, a, |u, x| u * x);
                vec![(node.inputs[0], da), (node.inputs[1], db)]
            }
            Op::Scale(c) => vec![(node.inputs[0], up.map(|u| u * *c))],
            Op::Relu => {
                let dx = zip_map(up, input(0), |u, x| if x > T::zero() { u } else { T::zero() });
                vec![(node.inputs[0], dx)]
            }
            Op::Sigmoid => {
                let bump = match self.fault {
                    Some(Fault::SigmoidGradient) => T::of(1.001),
                    None => T::one(),
                };
                let dx = zip_map(up, &node.value, |u, s| u * s * (T::one() - s) * bump);
                vec![(node.inputs[0], dx)]
            }
            Op::Concat { left_cols } => {
                let (da, db) = up.split_cols(*left_cols)?;
                vec![(node.inputs[0], da), (node.inputs[1], db)]
            }
            Op::Reshape => vec![(node.inputs[0], up.reshape(input(0).shape().to_vec())?)],
            Op::Sum => {
                let u = up.data()[0];
                vec![(node.inputs[0], Tensor::full(input(0).shape(), u))]
            }
            Op::Mean => {
                let x = input(0);
                let u = up.data()[0] / T::of(x.numel() as f64);
                vec![(node.inputs[0], Tensor::full(x.shape(), u))]
            }
            Op::WeightedSum(w) => {
                let u = up.data()[0];
                let data = w.iter().map(|&wi| wi * u).collect();
                vec![(node.inputs[0], Tensor::from_parts(input(0).shape().to_vec(), data))]
            }
            Op::SoftmaxXent { labels, probs } => {
                let c = probs.cols();
                let mut d = probs.data().to_vec();
                for (i, &y) in labels.iter().enumerate() {
                    let u = up.data()[i];
                    let row = &mut d[i * c..(i + 1) * c];
                    row[y] -= T::one();
                    for v in row.iter_mut() {
                        *v *= u;
                    }
                }
                vec![(node.inputs[0], Tensor::from_parts(probs.shape().to_vec(), d))]
            }
        };
        Ok(grads)
    }

    /// Gradient of each entry of the loss vector `losses` with respect to every
    /// bound parameter, one row per sample.
    ///
    /// Requires the graph feeding `losses` to be row-separable: samples only
    /// meet parameters through `x·W` (parameter on the right) and bias adds,
    /// and no op mixes rows. Under that condition row `i` of every upstream
    /// adjoint of `Σ_i losses_i` belongs to sample `i` alone.
    pub fn per_sample_grads(
        &self,
        losses: Var,
        bound: &BoundParams,
    ) -> Result<PerSampleGrads<T>, AutodiffError> {
        let n = match self.value(losses).shape() {
            [n] => *n,
            other => {
                return Err(AutodiffError::Shape {
                    op: "per_sample_grads",
                    detail: format!("losses must be a vector, got {other:?}"),
                })
            }
        };
        let param_nodes: Vec<usize> = bound.iter().map(|(_, v)| v.0).collect();
        let ancestors = self.ancestors(losses);
        for &idx in &ancestors {
            let node = &self.nodes[idx];
            let separable = match node.op {
                Op::Leaf => true,
                Op::MatMul | Op::AddBias => {
                    self.nodes[node.inputs[1]].inputs.is_empty()
                        && !param_nodes.contains(&node.inputs[0])
                }
                Op::Add | Op::Mul | Op::Scale(_) | Op::Relu | Op::Sigmoid | Op::Concat { .. } => {
                    !node.inputs.iter().any(|i| param_nodes.contains(i))
                }
                Op::SoftmaxXent { .. } => !param_nodes.contains(&node.inputs[0]),
                Op::Reshape | Op::Sum | Op::Mean | Op::WeightedSum(_) => false,
            };
            let batch_rows = matches!(node.op, Op::Leaf) || node.value.rows() == n;
            if !separable || !batch_rows {
                return Err(AutodiffError::NotBatchSeparable(format!(
                    "node {idx} ({}) mixes samples or consumes a parameter directly",
                    node.op.name()
                )));
            }
        }

        let layout = bound_layout(self, bound);
        let width = layout.numel();
        let offsets = layout.offsets();
        let mut data = vec![T::zero(); n * width];
        let grads = self.backward_seeded(losses, Tensor::ones(&[n]))?;

        for &idx in &ancestors {
            let node = &self.nodes[idx];
            if !matches!(node.op, Op::MatMul | Op::AddBias) {
                continue;
            }
            let Some(p) = param_nodes.iter().position(|&pn| pn == node.inputs[1]) else {
                continue;
            };
            let Some(up) = grads.adjoints[idx].as_ref() else { continue };
            let off = offsets[p];
            let h = up.cols();
            match node.op {
                Op::MatMul => {
                    let a = &self.nodes[node.inputs[0]].value;
                    for i in 0..n {
                        let row = &mut data[i * width + off..];
                        let du = up.row(i);
                        for (k, &ak) in a.row(i).iter().enumerate() {
                            if ak == T::zero() {
                                continue;
                            }
                            for (g, &u) in row[k * h..(k + 1) * h].iter_mut().zip(du) {
                                *g += ak * u;
                            }
                        }
                    }
                }
                _ => {
                    for i in 0..n {
                        let row = &mut data[i * width + off..i * width + off + h];
                        for (g, &u) in row.iter_mut().zip(up.row(i)) {
                            *g += u;
                        }
                    }
                }
            }
        }
        Ok(PerSampleGrads { layout, samples: n, width, data })
    }

    fn ancestors(&self, root: Var) -> Vec<usize> {
        let mut seen = vec![false; self.nodes.len()];
        seen[root.0] = true;
        for idx in (0..=root.0).rev() {
            if seen[idx] {
                for &i in &self.nodes[idx].inputs {
                    seen[i] = true;
                }
            }
        }
        seen.iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
            .collect()
    }
}

fn bound_layout<T: Scalar>(tape: &Tape<T>, bound: &BoundParams) -> ParamLayout {
    let mut set = ParamSet::<T>::new();
    for (name, v) in bound.iter() {
        set.insert(name, Tensor::zeros(tape.value(v).shape()))
            .expect("bound names are unique");
    }
    set.layout()
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Log-sum-exp stabilized per-row cross-entropy. Returns the losses and the
/// row softmax.
pub fn softmax_xent_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(Tensor<T>, Tensor<T>), AutodiffError> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        other => {
            return Err(AutodiffError::Shape {
                op: "softmax_xent",
                detail: format!("logits must be n×C, got {other:?}"),
            })
        }
    };
    if labels.len() != n {
        return Err(AutodiffError::Shape {
            op: "softmax_xent",
            detail: format!("{} labels for {n} rows", labels.len()),
        });
    }
    let mut losses = Vec::with_capacity(n);
    let mut probs = Vec::with_capacity(n * c);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(AutodiffError::LabelOutOfRange { row: i, label: y, classes: c });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum = row.iter().fold(T::zero(), |a, &z| a + (z - max).exp());
        let lse = max + sum.ln();
        losses.push(lse - row[y]);
        probs.extend(row.iter().map(|&z| (z - lse).exp()));
    }
    Ok((Tensor::from_parts(vec![n], losses), Tensor::from_parts(vec![n, c], probs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[6.0]);
    }

    #[test]
    fn constant_output_gives_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let c = tape.leaf(t(&[1], &[5.0]));
        let s = tape.sum(c).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarOutput { .. })));
    }

    #[test]
    fn add_bias_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4, 3]));
        let b = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.add_bias(x, b).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(b).data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn relu_masks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_backward_splits_adjoint() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[1, 1], &[1.0]));
        let b = tape.leaf(t(&[1, 2], &[2.0, 3.0]));
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).data(), &[1.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn xent_reference_values() {
        let (l, _) = softmax_xent_forward(&Tensor::<f64>::zeros(&[1, 5]), &[3]).unwrap();
        assert!((l.data()[0] - 5f64.ln()).abs() < 1e-12);
        let (l, _) = softmax_xent_forward(&t(&[1, 2], &[10.0, -10.0]), &[0]).unwrap();
        assert!((l.data()[0] - 2.061_153_6e-9).abs() < 1e-15);
        assert!(matches!(
            softmax_xent_forward(&Tensor::<f64>::zeros(&[1, 2]), &[2]),
            Err(AutodiffError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn per_sample_grads_sum_to_batch_gradient() {
        let mut tape = Tape::new();
        let mut params = ParamSet::new();
        params
            .insert("w", t(&[2, 3], &[0.1, -0.2, 0.3, 0.5, 0.4, -0.6]))
            .unwrap();
        params.insert("b", t(&[3], &[0.01, 0.02, -0.03])).unwrap();
        let bound = tape.bind(&params);
        let x = tape.leaf(t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 0.0, 3.0]));
        let h = tape.matmul(x, bound.var("w").unwrap()).unwrap();
        let z = tape.add_bias(h, bound.var("b").unwrap()).unwrap();
        let l = tape.softmax_xent(z, &[0, 2, 1]).unwrap();
        let psg = tape.per_sample_grads(l, &bound).unwrap();
        let total = psg.weighted_sum(&[1.0; 3]).unwrap();
        let s = tape.sum(l).unwrap();
        let full = tape.backward(s).unwrap().params(&bound).flatten();
        for (a, b) in total.iter().zip(&full) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn per_sample_grads_reject_row_mixing() {
        let mut tape = Tape::new();
        let mut params = ParamSet::new();
        params.insert("w", t(&[1, 1], &[2.0])).unwrap();
        let bound = tape.bind(&params);
        let x = tape.leaf(t(&[2, 1], &[1.0, 2.0]));
        let h = tape.matmul(x, bound.var("w").unwrap()).unwrap();
        let m = tape.mean(h).unwrap();
        let mm = tape.reshape(m, vec![1, 1]).unwrap();
        let v = tape.reshape(mm, vec![1]).unwrap();
        assert!(matches!(
            tape.per_sample_grads(v, &bound),
            Err(AutodiffError::NotBatchSeparable(_))
        ));
    }
}
