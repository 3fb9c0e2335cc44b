//! Layer descriptors. A layer only records the [`ParamId`]s it registered in a
//! [`ParamStore`] plus its hyper-parameters; the forward pass reads the values
//! through a [`Graph`].

pub mod store;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use store::{BufferId, BufferUpdate, ParamId, ParamStore, Parameter, Slot};

use crate::autograd::{Activation, Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Registers named, initialized parameters in a store.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, name: &str, t: Tensor<T>) -> Result<ParamId> {
        self.store.add_param(name, t)
    }

    pub fn buffer(&mut self, name: &str, t: Tensor<T>) -> Result<BufferId> {
        self.store.add_buffer(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)));
        self.param(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<ParamId> {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..=bound)));
        self.param(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.param(name, Tensor::full(shape, T::from_f64(v)))
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.into()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Fan-out scaled normal init, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_out = (c_out / groups) * k * k;
        Self::with_std(b, name, [c_in, c_out, k, stride, groups], bias, libm::sqrt(2.0 / fan_out as f64))
    }

    /// Normal init with an explicit standard deviation; `dims` is
    /// `[c_in, c_out, k, stride, groups]`.
    pub fn with_std<T: Scalar>(b: &mut Builder<T>, name: &str, dims: [usize; 5], bias: bool, std: f64) -> Result<Self> {
        let [c_in, c_out, k, stride, groups] = dims;
        crate::error::ensure!(groups >= 1 && c_in % groups == 0 && c_out % groups == 0, "{name}: channels not divisible by groups");
        let weight = b.normal(&join(name, "weight"), &[c_out, c_in / groups, k, k], std)?;
        let bias = if bias { Some(b.constant(&join(name, "bias"), &[c_out], 0.0)?) } else { None };
        Ok(Self { weight, bias, c_in, c_out, k, stride, pad: k / 2, groups })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }

    pub fn out_hw(&self, (h, w): (usize, usize)) -> (usize, usize) {
        let e = |s| crate::kernels::conv::out_extent(s, self.k, self.stride, self.pad);
        (e(h), e(w))
    }

    pub fn macs(&self, (h, w): (usize, usize)) -> u64 {
        let (ho, wo) = self.out_hw((h, w));
        (self.c_out * ho * wo * (self.c_in / self.groups) * self.k * self.k) as u64
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant(&join(name, "weight"), &[c], 1.0)?,
            beta: b.constant(&join(name, "bias"), &[c], 0.0)?,
            running_mean: b.buffer(&join(name, "running_mean"), Tensor::zeros(&[c]))?,
            running_var: b.buffer(&join(name, "running_var"), Tensor::ones(&[c]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.batch_norm(x, gamma, beta, self.running_mean, self.running_var)
    }
}

/// Convolution (no bias) → batch norm → optional activation. The conv weight is
/// registered as `<name>.weight`, the norm under `<name>.bn`.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Option<Activation>,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        b: &mut Builder<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        act: Option<Activation>,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(b, name, c_in, c_out, k, stride, groups, false)?,
            bn: BatchNorm2d::new(b, &join(name, "bn"), c_out)?,
            act,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        match self.act {
            Some(a) => g.activation(y, a),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub f_in: usize,
    pub f_out: usize,
}

impl Linear {
    /// Uniform ±1/sqrt(fan-in) for weight and bias. Weight is stored `[f_in, f_out]`.
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, f_in: usize, f_out: usize) -> Result<Self> {
        let bound = 1.0 / libm::sqrt(f_in as f64);
        Ok(Self {
            weight: b.uniform(&join(name, "weight"), &[f_in, f_out], bound)?,
            bias: b.uniform(&join(name, "bias"), &[f_out], bound)?,
            f_in,
            f_out,
        })
    }

    /// Normal weights with the given std and a zero bias.
    pub fn with_std<T: Scalar>(b: &mut Builder<T>, name: &str, f_in: usize, f_out: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: b.normal(&join(name, "weight"), &[f_in, f_out], std)?,
            bias: b.constant(&join(name, "bias"), &[f_out], 0.0)?,
            f_in,
            f_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, Some(b))
    }

    pub fn macs(&self, rows: usize) -> u64 {
        (rows * self.f_in * self.f_out) as u64
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let std = libm::sqrt(2.0 / (c_out * k * k) as f64);
        Ok(Self {
            weight: b.normal(&join(name, "weight"), &[c_in, c_out, k, k], std)?,
            bias: b.constant(&join(name, "bias"), &[c_out], 0.0)?,
            c_in,
            c_out,
            k,
            stride,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv_transpose2d(x, w, Some(b), self.stride, 0)
    }

    pub fn macs(&self, (h, w): (usize, usize)) -> u64 {
        (self.c_in * h * w * self.c_out * self.k * self.k) as u64
    }
}

/// Every parameter id registered under `prefix` (a dotted path component).
pub fn params_under<T: Scalar>(store: &ParamStore<T>, prefix: &str) -> Vec<ParamId> {
    let dotted = format!("{prefix}.");
    store.param_ids().filter(|&id| store.param_name(id).starts_with(&dotted)).collect()
}
