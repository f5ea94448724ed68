//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every forward operation together with the values it
//! produced. Parameters live outside the tape in a [`ParamSet`] and are
//! referenced by [`ParamId`]; [`Tape::backward`] walks the record in reverse
//! and accumulates parameter gradients into that set.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{self, LossValue, Reduction};
use crate::tensor::{Scalar, Tensor};

/// A named trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Scalar = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("ParamSet::add", format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Converts every value to another precision; gradients are reset.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Input,
    Conv2d { input: Var, kernels: ParamId, bias: ParamId, padding: usize },
    MaxPool { input: Var, argmax: Vec<usize> },
    Upsample { input: Var },
    Relu { input: Var },
    Concat { a: Var, b: Var, split: usize },
    Dense { input: Var, weights: ParamId, bias: ParamId },
    Reshape { input: Var },
    Stack { inputs: Vec<Var> },
    Softmax { input: Var },
    CrossEntropy { probs: Var, labels: Vec<usize>, scale: T },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T>, scale: T },
    Mse { pred: Var, target: Tensor<T>, scale: T },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    loss: Option<LossValue>,
}

/// Gradients with respect to tape inputs created by [`Tape::input_with_grad`].
#[derive(Debug, Default)]
pub struct InputGrads<T: Scalar> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> InputGrads<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var.0)
    }
}

/// Record of one forward computation.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::UnknownNode(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Loss summary for a node created by one of the loss operations.
    pub fn loss(&self, v: Var) -> Option<LossValue> {
        self.nodes.get(v.0).and_then(|n| n.loss)
    }

    /// Hash of every ReLU's active set and every max-pool selection. Two
    /// forward passes with equal signatures lie on the same smooth piece of
    /// the network function.
    pub fn kink_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for v in self.nodes[input.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Drops the tape and returns the value of `v`.
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        self.nodes.swap_remove(v.0).value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name(&op).to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad, loss: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, false)
    }

    /// An input whose gradient is reported by [`Tape::backward`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, true)
    }

    pub fn conv2d(
        &mut self,
        params: &ParamSet<T>,
        input: Var,
        kernels: ParamId,
        bias: ParamId,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            &self.node(input)?.value,
            &params.get(kernels).value,
            &params.get(bias).value,
            padding,
        )?;
        self.push(out, Op::Conv2d { input, kernels, bias, padding }, true)
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = ops::maxpool2x2(&self.node(input)?.value)?;
        let rg = self.needs(input);
        self.push(out, Op::MaxPool { input, argmax }, rg)
    }

    pub fn upsample2x2(&mut self, input: Var) -> Result<Var> {
        let out = ops::upsample2x2(&self.node(input)?.value)?;
        let rg = self.needs(input);
        self.push(out, Op::Upsample { input }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu(&self.node(input)?.value);
        let rg = self.needs(input);
        self.push(out, Op::Relu { input }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(&self.node(a)?.value, &self.node(b)?.value)?;
        let split = self.value(a).shape()[0];
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat { a, b, split }, rg)
    }

    pub fn dense(&mut self, params: &ParamSet<T>, input: Var, weights: ParamId, bias: ParamId) -> Result<Var> {
        let out = ops::dense(
            &self.node(input)?.value,
            &params.get(weights).value,
            &params.get(bias).value,
        )?;
        self.push(out, Op::Dense { input, weights, bias }, true)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(input)?.value.clone().reshape(shape)?;
        let rg = self.needs(input);
        self.push(out, Op::Reshape { input }, rg)
    }

    /// Flattens equally sized values into the rows of an `[N, len]` tensor.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::invalid("stack", "nothing to stack"));
        };
        let len = self.node(first)?.value.len();
        let mut data = Vec::with_capacity(len * inputs.len());
        for &v in inputs {
            let value = &self.node(v)?.value;
            if value.len() != len {
                return Err(Error::shape("stack", format!("values of {len} and {} elements", value.len())));
            }
            data.extend_from_slice(value.data());
        }
        let out = Tensor::new(&[inputs.len(), len], data)?;
        let rg = inputs.iter().any(|&v| self.needs(v));
        self.push(out, Op::Stack { inputs: inputs.to_vec() }, rg)
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax_over_classes(&self.node(input)?.value)?;
        let rg = self.needs(input);
        self.push(out, Op::Softmax { input }, rg)
    }

    fn push_loss(&mut self, loss: LossValue, reduction: Reduction, op: Op<T>, rg: bool) -> Result<Var> {
        let v = self.push(Tensor::scalar(T::from_f64(loss.get(reduction))), op, rg)?;
        self.nodes[v.0].loss = Some(loss);
        Ok(v)
    }

    /// Cross-entropy of a probability map against integer labels.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let loss = ops::cross_entropy_loss(&self.node(probs)?.value, labels)?;
        let scale = reduction_scale::<T>(reduction, labels.len());
        let rg = self.needs(probs);
        self.push_loss(loss, reduction, Op::CrossEntropy { probs, labels: labels.to_vec(), scale }, rg)
    }

    /// Cross-entropy computed from logits (softmax fused in).
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(&self.node(logits)?.value, labels)?;
        let scale = reduction_scale::<T>(reduction, labels.len());
        let rg = self.needs(logits);
        let op = Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs, scale };
        self.push_loss(loss, reduction, op, rg)
    }

    pub fn mse(&mut self, pred: Var, target: &Tensor<T>, reduction: Reduction) -> Result<Var> {
        let loss = ops::mse_loss(&self.node(pred)?.value, target)?;
        let scale = reduction_scale::<T>(reduction, target.len());
        let rg = self.needs(pred);
        self.push_loss(loss, reduction, Op::Mse { pred, target: target.clone(), scale }, rg)
    }

    /// Probabilities cached by a fused softmax cross-entropy node.
    pub fn cached_probs(&self, loss: Var) -> Option<&Tensor<T>> {
        match &self.nodes.get(loss.0)?.op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates from the scalar `loss`, adding `∂loss/∂θ` into every
    /// reachable parameter's `grad`.
    pub fn backward(&self, loss: Var, params: &mut ParamSet<T>) -> Result<InputGrads<T>> {
        self.backward_scaled(loss, T::one(), params)
    }

    /// As [`Tape::backward`], with the loss gradient seeded at `seed`.
    pub fn backward_scaled(&self, loss: Var, seed: T, params: &mut ParamSet<T>) -> Result<InputGrads<T>> {
        if self.nodes.is_empty() {
            return Err(Error::NoForward);
        }
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(seed));
        let mut inputs = InputGrads { grads: HashMap::new() };

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor<T>>>, to: Var, d: Tensor<T>| -> Result<()> {
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&d),
                    slot => {
                        *slot = Some(d);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => {
                    inputs.grads.insert(id, g);
                }
                Op::Conv2d { input, kernels, bias, padding } => {
                    let want = self.needs(*input);
                    let kv = params.get(*kernels).value.clone();
                    let (dk, db) = two_grads(params, *kernels, *bias);
                    let dx = ops::conv2d_backward(self.value(*input), &kv, *padding, &g, dk, db, want)?;
                    if let Some(dx) = dx {
                        send(&mut grads, *input, dx)?;
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let dx = ops::maxpool2x2_backward(self.value(*input).shape(), argmax, &g)?;
                    send(&mut grads, *input, dx)?;
                }
                Op::Upsample { input } => {
                    send(&mut grads, *input, ops::upsample2x2_backward(&g)?)?;
                }
                Op::Relu { input } => {
                    send(&mut grads, *input, ops::relu_backward(self.value(*input), &g))?;
                }
                Op::Concat { a, b, split } => {
                    let (da, db) = ops::split_channels(&g, *split)?;
                    if self.needs(*a) {
                        send(&mut grads, *a, da)?;
                    }
                    if self.needs(*b) {
                        send(&mut grads, *b, db)?;
                    }
                }
                Op::Dense { input, weights, bias } => {
                    let want = self.needs(*input);
                    // weights can be very large; split borrows instead of cloning
                    let (w, dw, db) = dense_views(params, *weights, *bias);
                    let dx = ops::dense_backward(self.value(*input), w, &g, dw, db, want)?;
                    if let Some(dx) = dx {
                        send(&mut grads, *input, dx)?;
                    }
                }
                Op::Reshape { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    send(&mut grads, *input, g.reshape(&shape)?)?;
                }
                Op::Stack { inputs } => {
                    let len = g.len() / inputs.len();
                    for (&v, chunk) in inputs.iter().zip(g.data().chunks_exact(len)) {
                        if self.needs(v) {
                            send(&mut grads, v, Tensor::new(self.value(v).shape(), chunk.to_vec())?)?;
                        }
                    }
                }
                Op::Softmax { input } => {
                    send(&mut grads, *input, ops::softmax_backward(&node.value, &g)?)?;
                }
                Op::CrossEntropy { probs, labels, scale } => {
                    let s = *scale * g.data()[0];
                    send(&mut grads, *probs, ops::cross_entropy_backward(self.value(*probs), labels, s)?)?;
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs, scale } => {
                    let s = *scale * g.data()[0];
                    send(&mut grads, *logits, ops::softmax_cross_entropy_backward(probs, labels, s)?)?;
                }
                Op::Mse { pred, target, scale } => {
                    let s = *scale * g.data()[0];
                    send(&mut grads, *pred, ops::mse_backward(self.value(*pred), target, s))?;
                }
            }
        }
        Ok(inputs)
    }
}

fn reduction_scale<T: Scalar>(reduction: Reduction, count: usize) -> T {
    match reduction {
        Reduction::Sum => T::one(),
        Reduction::Mean => T::one() / T::from_f64(count as f64),
    }
}

fn two_grads<T: Scalar>(params: &mut ParamSet<T>, a: ParamId, b: ParamId) -> (&mut [T], &mut [T]) {
    assert_ne!(a, b, "kernel and bias must be distinct parameters");
    let (lo, hi, swap) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
    let (left, right) = params.params.split_at_mut(hi);
    let (x, y) = (left[lo].grad.data_mut(), right[0].grad.data_mut());
    if swap {
        (y, x)
    } else {
        (x, y)
    }
}

fn dense_views<T: Scalar>(
    params: &mut ParamSet<T>,
    weights: ParamId,
    bias: ParamId,
) -> (&Tensor<T>, &mut [T], &mut [T]) {
    assert_ne!(weights, bias, "weights and bias must be distinct parameters");
    let (lo, hi) = (weights.0.min(bias.0), weights.0.max(bias.0));
    let (left, right) = params.params.split_at_mut(hi);
    let (pl, ph) = (&mut left[lo], &mut right[0]);
    let (w, b) = if weights.0 < bias.0 { (pl, ph) } else { (ph, pl) };
    let Parameter { value, grad, .. } = w;
    (&*value, grad.data_mut(), b.grad.data_mut())
}

fn op_name<T: Scalar>(op: &Op<T>) -> &'static str {
    match op {
        Op::Input => "input",
        Op::Conv2d { .. } => "conv2d",
        Op::MaxPool { .. } => "maxpool2x2",
        Op::Upsample { .. } => "upsample2x2",
        Op::Relu { .. } => "relu",
        Op::Concat { .. } => "concat_channels",
        Op::Dense { .. } => "dense",
        Op::Reshape { .. } => "reshape",
        Op::Stack { .. } => "stack",
        Op::Softmax { .. } => "softmax",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        Op::Mse { .. } => "mse",
    }
}
