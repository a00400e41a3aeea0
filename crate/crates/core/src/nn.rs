//! Named parameter storage and the two layer kinds both networks are built from.

use crate::error::{Error, Result};
use crate::tensor::{xavier_init, AdamConfig, AdamState, Gradients, Real, Rng, Tape, Tensor, Var};

/// Index of a tensor inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct Params<T: Real> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Params {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replaces every tensor, checking names and shapes line up.
    pub fn load(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }

    /// Registers every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.constant(t.clone()))
                .collect(),
        }
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Adds `weight * d(loss)/d(param)` into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_, T>, grads: &Gradients<T>, weight: f64) {
        let w = T::lit(weight);
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            let Some(g) = grads.wrt(*v) else { continue };
            let acc = t.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
            for (a, &d) in acc.iter_mut().zip(g) {
                *a += w * d;
            }
        }
    }

    pub fn adam(&self, config: AdamConfig) -> AdamState<T> {
        let refs: Vec<&Tensor<T>> = self.tensors.iter().collect();
        AdamState::new(config, &refs)
    }

    pub fn adam_step(&mut self, state: &mut AdamState<T>) -> Result<()> {
        let mut refs: Vec<&mut Tensor<T>> = self.tensors.iter_mut().collect();
        state.step(&mut refs)
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Parameters of one model registered on a tape.
pub struct Bound<'t, T: Real> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Wraps externally created leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

/// 2-D convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    /// Xavier-initialised `out x in x k x k` kernel with zero bias, "same"
    /// padding for odd `k`.
    pub fn new<T: Real>(
        params: &mut Params<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let kernel = params.add(
            format!("{name}.kernel"),
            xavier_init(&[out_channels, in_channels, k, k], rng)?,
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Ok(Conv {
            kernel,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        tape.conv2d(
            x,
            p.var(self.kernel),
            p.var(self.bias),
            self.stride,
            self.padding,
        )
    }
}

/// Fully connected layer.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Real>(
        params: &mut Params<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = params.add(
            format!("{name}.weight"),
            xavier_init(&[outputs, inputs], rng)?,
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Ok(Dense { weight, bias })
    }

    pub fn forward<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }
}
