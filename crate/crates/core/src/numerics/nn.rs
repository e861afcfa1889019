//! Parameterised layers built from tape primitives.

use rand_chacha::ChaCha8Rng;

use super::param::{BufferId, BufferStore, ParamId, ParamStore};
use super::real::{lit, Real};
use super::tape::{BnUpdate, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Registers named parameters and buffers under a dotted prefix.
pub struct Builder<'a, T> {
    pub params: &'a mut ParamStore<T>,
    pub buffers: &'a mut BufferStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(params: &'a mut ParamStore<T>, buffers: &'a mut BufferStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            params,
            buffers,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = self.path(name);
        Builder {
            params: &mut *self.params,
            buffers: &mut *self.buffers,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        let path = self.path(name);
        self.params.add(path, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor<T>) -> BufferId {
        let path = self.path(name);
        self.buffers.add(path, value)
    }

    pub fn randn(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        Tensor::randn(shape, std, self.rng)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::uniform(shape, bound, self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
    /// He-uniform over the fan-in, suited to ReLU stacks.
    HeUniform,
    /// `U(-1/√fan_in, 1/√fan_in)`.
    FanInUniform,
    Zeros,
}

fn init_tensor<T: Real>(b: &mut Builder<'_, T>, shape: &[usize], fan_in: usize, init: Init) -> Tensor<T> {
    match init {
        Init::Normal(std) => b.randn(shape, std),
        Init::HeUniform => b.uniform(shape, (6.0 / fan_in as f64).sqrt()),
        Init::FanInUniform => b.uniform(shape, 1.0 / (fan_in as f64).sqrt()),
        Init::Zeros => Tensor::zeros(shape),
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, d_in: usize, d_out: usize, bias: bool, init: Init) -> Self {
        let w = init_tensor(b, &[d_in, d_out], d_in, init);
        let weight = b.param("weight", w);
        let bias = bias.then(|| b.param("bias", Tensor::zeros(&[d_out])));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|id| tape.param(id));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: Init,
    ) -> Self {
        let w = init_tensor(b, &[c_out, c_in, kernel, kernel], c_in * kernel * kernel, init);
        let weight = b.param("weight", w);
        let bias = bias.then(|| b.param("bias", Tensor::zeros(&[c_out])));
        Conv2d {
            weight,
            bias,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|id| tape.param(id));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalisation with learnable affine and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub features: usize,
    /// Axis of the input holding the features.
    pub axis: usize,
}

impl BatchNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, features: usize, axis: usize) -> Self {
        BatchNorm {
            gamma: b.param("gamma", Tensor::ones(&[features])),
            beta: b.param("beta", Tensor::zeros(&[features])),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[features])),
            running_var: b.buffer("running_var", Tensor::ones(&[features])),
            features,
            axis,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let gamma = tape.param(self.gamma);
        let beta = tape.param(self.beta);
        if tape.is_train() {
            let count = tape.value(x).numel() / self.features;
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, self.axis)?;
            let unbias: T = lit(count as f64 / (count as f64 - 1.0));
            tape.bn_updates.push(BnUpdate {
                mean_buf: self.running_mean,
                var_buf: self.running_var,
                mean,
                var_unbiased: var.into_iter().map(|v| v * unbias).collect(),
            });
            Ok(y)
        } else {
            let buffers = tape
                .buffers()
                .ok_or_else(|| Error::config("eval-mode batch norm needs running statistics"))?;
            let mean = buffers.get(self.running_mean).data();
            let var = buffers.get(self.running_var).data();
            tape.batch_norm_eval(x, gamma, beta, self.axis, mean, var)
        }
    }
}

/// Folds observed batch statistics into running statistics.
pub fn apply_bn_updates<T: Real>(buffers: &mut BufferStore<T>, updates: &[BnUpdate<T>], momentum: f64) {
    let m: T = lit(momentum);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in buffers.get_mut(u.mean_buf).data_mut().iter_mut().zip(&u.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in buffers.get_mut(u.var_buf).data_mut().iter_mut().zip(&u.var_unbiased) {
            *r = keep * *r + m * b;
        }
    }
}

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Self {
        LayerNorm {
            gamma: b.param("gamma", Tensor::ones(&[dim])),
            beta: b.param("beta", Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}
