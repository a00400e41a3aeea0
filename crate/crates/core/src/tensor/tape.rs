use std::cell::RefCell;

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Upsample2x(usize),
    Concat(usize, usize),
    Add(usize, usize),
    Scale(usize, f64),
    Flatten(usize),
    Mse(usize, usize),
    SoftmaxCe {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Records tensor operations so gradients can be replayed in reverse.
///
/// A tape is built fresh for every forward pass. Leaves created with
/// [`Tape::param`] receive gradients; [`Tape::constant`] leaves do not, and
/// nothing upstream of only-constant inputs is differentiated.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Records a trainable leaf. Its gradient is available after [`Tape::backward`].
    pub fn param(&self, value: &Tensor<T>) -> Var<'_, T> {
        let mut v = value.clone();
        v.grad = None;
        self.push(v, Op::Leaf, true)
    }

    /// Records an input that is never differentiated.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn unary(
        &self,
        x: Var<'_, T>,
        op: Op,
        f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Var<'_, T>> {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[x.id].value)?
        };
        let needs = self.needs(&[x.id]);
        Ok(self.push(out, op, needs))
    }

    fn binary(
        &self,
        a: Var<'_, T>,
        b: Var<'_, T>,
        op: Op,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Var<'_, T>> {
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.id].value, &nodes[b.id].value)?
        };
        let needs = self.needs(&[a.id, b.id]);
        Ok(self.push(out, op, needs))
    }

    pub fn conv2d(
        &self,
        input: Var<'_, T>,
        kernel: Var<'_, T>,
        bias: Var<'_, T>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'_, T>> {
        let out = {
            let nodes = self.nodes.borrow();
            kernels::conv2d_forward(
                &nodes[input.id].value,
                &nodes[kernel.id].value,
                &nodes[bias.id].value,
                stride,
                padding,
            )?
        };
        let needs = self.needs(&[input.id, kernel.id, bias.id]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input: input.id,
                kernel: kernel.id,
                bias: bias.id,
                stride,
                padding,
            },
            needs,
        ))
    }

    pub fn linear(
        &self,
        input: Var<'_, T>,
        weight: Var<'_, T>,
        bias: Var<'_, T>,
    ) -> Result<Var<'_, T>> {
        let out = {
            let nodes = self.nodes.borrow();
            kernels::linear_forward(
                &nodes[input.id].value,
                &nodes[weight.id].value,
                &nodes[bias.id].value,
            )?
        };
        let needs = self.needs(&[input.id, weight.id, bias.id]);
        Ok(self.push(
            out,
            Op::Linear {
                input: input.id,
                weight: weight.id,
                bias: bias.id,
            },
            needs,
        ))
    }

    pub fn relu(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.unary(x, Op::Relu(x.id), |t| Ok(kernels::relu(t)))
    }

    pub fn sigmoid(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.unary(x, Op::Sigmoid(x.id), |t| Ok(kernels::sigmoid(t)))
    }

    pub fn upsample_nearest_2x(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.unary(x, Op::Upsample2x(x.id), kernels::upsample_nearest_2x)
    }

    pub fn concat_channels(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>> {
        self.binary(a, b, Op::Concat(a.id, b.id), kernels::concat_channels)
    }

    pub fn add(&self, a: Var<'_, T>, b: Var<'_, T>) -> Result<Var<'_, T>> {
        self.binary(a, b, Op::Add(a.id, b.id), |x, y| {
            if x.shape() != y.shape() {
                return Err(Error::dim(format!(
                    "add shape mismatch {:?} vs {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
            let data = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| p + q)
                .collect();
            Tensor::new(x.shape(), data)
        })
    }

    pub fn scale(&self, x: Var<'_, T>, factor: f64) -> Result<Var<'_, T>> {
        let f = T::lit(factor);
        self.unary(x, Op::Scale(x.id, factor), |t| {
            Tensor::new(t.shape(), t.data().iter().map(|&v| v * f).collect())
        })
    }

    /// Collapses every axis after the first: `B x ...` to `B x N`.
    pub fn flatten(&self, x: Var<'_, T>) -> Result<Var<'_, T>> {
        self.unary(x, Op::Flatten(x.id), |t| {
            let b = t.shape()[0];
            t.clone().reshape(&[b, t.numel() / b])
        })
    }

    pub fn mse(&self, pred: Var<'_, T>, target: Var<'_, T>) -> Result<Var<'_, T>> {
        self.binary(pred, target, Op::Mse(pred.id, target.id), |p, t| {
            Ok(Tensor::scalar(kernels::mse(p, t)?))
        })
    }

    pub fn softmax_cross_entropy(
        &self,
        logits: Var<'_, T>,
        labels: &[usize],
    ) -> Result<Var<'_, T>> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            kernels::softmax_cross_entropy(&nodes[logits.id].value, labels)?
        };
        let needs = self.needs(&[logits.id]);
        let op = Op::SoftmaxCe {
            logits: logits.id,
            labels: labels.to_vec(),
            probs: probs
                .data()
                .iter()
                .map(|p| p.to_f64().unwrap_or(f64::NAN))
                .collect(),
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let numel = nodes[loss.id].value.numel();
        if numel != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {numel} elements"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![T::one()]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let wants = |i: usize| nodes[i].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let cg = kernels::conv2d_backward(
                        &nodes[*input].value,
                        &nodes[*kernel].value,
                        &nodes[*bias].value,
                        *stride,
                        *padding,
                        &g,
                        wants(*input),
                    )?;
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, *input, dx);
                    }
                    if wants(*kernel) {
                        accumulate(&mut grads, *kernel, cg.kernel);
                    }
                    if wants(*bias) {
                        accumulate(&mut grads, *bias, cg.bias);
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let lg = kernels::linear_backward(
                        &nodes[*input].value,
                        &nodes[*weight].value,
                        &nodes[*bias].value,
                        &g,
                    )?;
                    for (i, d) in [(*input, lg.input), (*weight, lg.weight), (*bias, lg.bias)] {
                        if wants(i) {
                            accumulate(&mut grads, i, d);
                        }
                    }
                }
                Op::Relu(x) => {
                    let dx = nodes[*x]
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&s, &d)| d * s * (T::one() - s))
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Upsample2x(x) => {
                    let dims = nodes[*x].value.dims4()?;
                    accumulate(
                        &mut grads,
                        *x,
                        kernels::upsample_nearest_2x_backward(dims, &g),
                    );
                }
                Op::Concat(a, b) => {
                    let batch = nodes[*a].value.shape()[0];
                    let la = nodes[*a].value.numel() / batch;
                    let lb = nodes[*b].value.numel() / batch;
                    let (ga, gb) = kernels::concat_channels_backward(batch, la, lb, &g);
                    if wants(*a) {
                        accumulate(&mut grads, *a, ga);
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Scale(x, factor) => {
                    let f = T::lit(*factor);
                    accumulate(&mut grads, *x, g.iter().map(|&d| d * f).collect());
                }
                Op::Flatten(x) => {
                    accumulate(&mut grads, *x, g);
                }
                Op::Mse(p, t) => {
                    let pv = &nodes[*p].value;
                    let tv = &nodes[*t].value;
                    let coef = T::lit(2.0) * g[0] / T::from_usize(pv.numel()).expect("count");
                    let dp: Vec<T> = pv
                        .data()
                        .iter()
                        .zip(tv.data())
                        .map(|(&a, &b)| coef * (a - b))
                        .collect();
                    if wants(*t) {
                        accumulate(&mut grads, *t, dp.iter().map(|&d| -d).collect());
                    }
                    if wants(*p) {
                        accumulate(&mut grads, *p, dp);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let k = probs.len() / labels.len();
                    let inv_b = g[0] / T::from_usize(labels.len()).expect("batch");
                    let mut d: Vec<T> = probs.iter().map(|&p| T::lit(p) * inv_b).collect();
                    for (row, &label) in labels.iter().enumerate() {
                        d[row * k + label] -= inv_b;
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }

        // keep gradients for leaves only
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// A copy of the recorded value behind `v`.
    pub fn value(&self, v: Var<'_, T>) -> Tensor<T> {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn with_value<R>(&self, v: Var<'_, T>, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.id].value)
    }

    /// Moves the value out of the tape, leaving an empty placeholder behind.
    /// Only meant for outputs read after the tape is no longer needed.
    pub fn take_value(&self, v: Var<'_, T>) -> Tensor<T> {
        let mut nodes = self.nodes.borrow_mut();
        std::mem::replace(&mut nodes[v.id].value, Tensor::scalar(T::nan()))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], id: usize, delta: Vec<T>) {
    match &mut grads[id] {
        Some(acc) => kernels::add_into(acc, &delta),
        slot @ None => *slot = Some(delta),
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(*self)
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> Result<T> {
        self.tape.with_value(*self, |t| t.item())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a parameter leaf. `None` when the
    /// leaf did not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Vec<T>> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}
