//! Named parameter and buffer stores plus the convolutional layers built on them.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{BnMode, Tape, Var};
use crate::tensor::{Real, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Excluded from optimizer updates when set.
    pub frozen: bool,
}

/// Name-indexed collection of tensors. Names are unique.
#[derive(Clone, Debug)]
pub struct Store<T> {
    entries: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

pub type ParamStore<T> = Store<T>;
/// Non-learned state such as batch-norm running statistics.
pub type BufferStore<T> = Store<T>;

impl<T> Default for Store<T> {
    fn default() -> Self {
        Store {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> Store<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::invalid("store", format!("duplicate name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Parameter {
            name,
            tensor,
            frozen: false,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter<T>)> {
        self.entries.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Sets the frozen flag on every entry whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.frozen = true;
                n += 1;
            }
        }
        n
    }
}

/// Forward-pass context threading the tape, parameters and mutable buffers.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a ParamStore<T>,
    pub buffers: &'a mut BufferStore<T>,
    pub training: bool,
}

impl<T: Real> Ctx<'_, T> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(id, &self.params.get(id).tensor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Softplus,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// He-uniform weights; bias uniform in `±1/sqrt(fan_in)` so that a
    /// pixel with all-zero inputs still gets a nonzero output.
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(TensorError::invalid("conv2d", format!("kernel {kernel} not in {{1, 3}}")));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::from_fn(&[out_channels, in_channels, kernel, kernel], |_| {
            T::from_f64(rng.gen_range(-bound..bound))
        });
        let weight = params.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            let b = 1.0 / fan_in.sqrt();
            let t = Tensor::from_fn(&[out_channels], |_| T::from_f64(rng.gen_range(-b..b)));
            Some(params.add(format!("{name}.bias"), t)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    /// With `affine == false` the scale and shift stay fixed at 1 and 0.
    pub fn new<T: Real>(
        params: &mut ParamStore<T>,
        buffers: &mut BufferStore<T>,
        name: &str,
        channels: usize,
        affine: bool,
    ) -> Result<Self> {
        let (gamma, beta) = if affine {
            (
                Some(params.add(format!("{name}.gamma"), Tensor::full(&[channels], T::ONE))?),
                Some(params.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?),
            )
        } else {
            (None, None)
        };
        Ok(BatchNorm2d {
            gamma,
            beta,
            running_mean: buffers.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: buffers.add(format!("{name}.running_var"), Tensor::full(&[channels], T::ONE))?,
            channels,
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = self.gamma.map(|g| ctx.param(g));
        let beta = self.beta.map(|b| ctx.param(b));
        let eps = T::from_f64(self.eps);
        if ctx.training {
            let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, BnMode::Train, eps)?;
            let stats = stats.expect("training mode yields statistics");
            let m = T::from_f64(self.momentum);
            let keep = T::ONE - m;
            for (r, &b) in ctx.buffers.get_mut(self.running_mean).tensor.data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in ctx.buffers.get_mut(self.running_var).tensor.data_mut().iter_mut().zip(&stats.var_unbiased) {
                *r = keep * *r + m * b;
            }
            Ok(y)
        } else {
            let mean = ctx.buffers.get(self.running_mean).tensor.data().to_vec();
            let var = ctx.buffers.get(self.running_var).tensor.data().to_vec();
            let (y, _) = ctx
                .tape
                .batch_norm(x, gamma, beta, BnMode::Eval { mean: &mean, var: &var }, eps)?;
            Ok(y)
        }
    }
}

/// Convolution, batch normalization and an activation.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Activation,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        params: &mut ParamStore<T>,
        buffers: &mut BufferStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        act: Activation,
        affine: bool,
        rng: &mut R,
    ) -> Result<Self> {
        // The following batch norm makes a conv bias redundant.
        let conv = Conv2d::new(params, &format!("{name}.conv"), in_channels, out_channels, kernel, false, rng)?;
        let bn = BatchNorm2d::new(params, buffers, &format!("{name}.bn"), out_channels, affine)?;
        Ok(ConvBn { conv, bn, act })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(match self.act {
            Activation::Identity => y,
            Activation::Relu => ctx.tape.relu(y),
            Activation::Softplus => ctx.tape.softplus(y),
        })
    }
}
