//! Parameter storage and the handful of layer types the codec is built from.
//!
//! Parameters live in a flat [`Params`] store addressed by [`ParamId`]; layer
//! structs only hold ids and hyperparameters. Each parameter is initialized
//! from its own RNG stream keyed by `(seed, full name)`, so enabling or
//! disabling a sub-network never perturbs the initialization of the others.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::{conv2d, Conv2dSpec, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Replaces the values of a parameter (shape must match).
    pub fn set(&mut self, id: ParamId, values: Vec<f64>) {
        let shape = self.tensors[id.0].shape().to_vec();
        assert_eq!(values.len(), self.tensors[id.0].numel(), "set: size mismatch for {}", self.names[id.0]);
        self.tensors[id.0] = Tensor::param(values, &shape);
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Store with the given names and values, in order.
    pub fn from_named(entries: Vec<(String, Tensor)>) -> Self {
        let mut p = Self::default();
        for (name, t) in entries {
            p.push(name, t.to_param());
        }
        p
    }

    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(t);
        ParamId(id)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `+-sqrt(3 / fan_in)` (unit output variance for unit inputs).
    Fan(usize),
    Normal(f64),
    Uniform(f64, f64),
}

/// Allocates named parameters into a [`Params`] store.
pub struct ParamBuilder<'a> {
    params: &'a mut Params,
    seed: u64,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(params: &'a mut Params, seed: u64) -> Self {
        Self {
            params,
            seed,
            prefix: String::new(),
        }
    }

    /// A builder whose names are nested under `name`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            params: self.params,
            seed: self.seed,
            prefix,
        }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let n: usize = shape.iter().product();
        let mut rng = stream_rng(self.seed, &full);
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(v) => vec![v; n],
            Init::Fan(fan_in) => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Uniform(lo, hi) => (0..n).map(|_| rng.random_range(lo..hi)).collect(),
        };
        self.params.push(full, Tensor::param(data, shape))
    }

    pub fn with_values(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> ParamId {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.params.push(full, Tensor::param(data, shape))
    }
}

/// Deterministic RNG stream for `(seed, label)`.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// `y = x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        let mut s = pb.scope(name);
        let w = s.tensor("weight", &[fan_in, fan_out], init);
        let b = s.tensor("bias", &[fan_out], Init::Zeros);
        Self {
            w,
            b: Some(b),
            fan_in,
            fan_out,
        }
    }

    pub fn no_bias(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Self {
        let mut s = pb.scope(name);
        let w = s.tensor("weight", &[fan_in, fan_out], init);
        Self {
            w,
            b: None,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Tensor {
        x.linear(p.get(self.w), self.b.map(|b| p.get(b)))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize, kernel: usize, spec: Conv2dSpec) -> Self {
        let fan_in = in_ch / spec.groups * kernel * kernel;
        Self::with_init(pb, name, in_ch, out_ch, kernel, spec, Init::Fan(fan_in))
    }

    /// Same-padded `k x k` convolution with stride 1.
    pub fn same(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        let spec = Conv2dSpec {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        };
        Self::new(pb, name, in_ch, out_ch, kernel, spec)
    }

    pub fn with_init(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: Conv2dSpec,
        init: Init,
    ) -> Self {
        let mut s = pb.scope(name);
        let w = s.tensor("weight", &[out_ch, in_ch / spec.groups, kernel, kernel], init);
        let b = s.tensor("bias", &[out_ch], Init::Zeros);
        Self {
            w,
            b: Some(b),
            spec,
            in_ch,
            out_ch,
            kernel,
        }
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Tensor {
        conv2d(x, p.get(self.w), self.b.map(|b| p.get(b)), self.spec)
    }
}

/// Layer normalization over the last axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            gamma: s.tensor("gamma", &[dim], Init::Const(1.0)),
            beta: s.tensor("beta", &[dim], Init::Zeros),
        }
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Tensor {
        x.layer_norm(p.get(self.gamma), p.get(self.beta), Self::EPS)
    }
}

/// Two 3x3 convolutions with a ReLU between them and an identity skip.
#[derive(Clone, Debug)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, ch: usize) -> Self {
        let mut s = pb.scope(name);
        Self {
            conv1: Conv2d::same(&mut s, "conv1", ch, ch, 3),
            conv2: Conv2d::same(&mut s, "conv2", ch, ch, 3),
        }
    }

    pub fn forward(&self, p: &Params, x: &Tensor) -> Tensor {
        let h = self.conv1.forward(p, x).relu();
        self.conv2.forward(p, &h).add(x)
    }
}

/// Rescales a parameter in place (used to shrink residual-branch outputs at init).
pub fn scale_param(p: &mut Params, id: ParamId, factor: f64) {
    let v: Vec<f64> = p.get(id).data().iter().map(|x| x * factor).collect();
    p.set(id, v);
}
