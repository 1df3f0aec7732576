//! Parameterised layers and the [`Module`] trait tying them to checkpoints
//! and optimizers.

use rand::Rng;

use super::checkpoint::Checkpoint;
use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A bag of named parameter tensors.
///
/// `forward` implementations push one [`Var`] per parameter, in the same
/// order as [`Module::params`], so gradients can be routed back by position.
pub trait Module {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn set_requires_grad(&mut self, on: bool) {
        for (_, t) in self.params_mut() {
            t.requires_grad = on;
            if !on {
                t.grad = None;
            }
        }
    }

    fn save_into(&self, prefix: &str, ckpt: &mut Checkpoint) {
        for (name, t) in self.params() {
            ckpt.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    fn load_from(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        for (name, t) in self.params_mut() {
            let full = format!("{prefix}{name}");
            let src = ckpt
                .get(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {full}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{full}: shape {:?} does not match {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    /// Copies every parameter value from `other`, which must share layout.
    fn copy_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for ((_, dst), (_, src)) in self.params_mut().into_iter().zip(other.params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}

/// Kaiming-uniform tensor: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("shape product matches data")
        .into_param()
}

fn zeros_param(n: usize) -> Tensor {
    Tensor::zeros([n]).into_param()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: kaiming_uniform(&[out, inp], inp, rng),
            bias: zeros_param(out),
        }
    }

    pub fn zeros(inp: usize, out: usize) -> Self {
        Linear {
            weight: Tensor::zeros([out, inp]).into_param(),
            bias: zeros_param(out),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, binds: &mut Vec<Var>) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        binds.extend([w, b]);
        g.linear(x, w, b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.weight), ("b".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w".into(), &mut self.weight), ("b".into(), &mut self.bias)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(inp: usize, out: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Conv2d {
            weight: kaiming_uniform(&[out, inp, kernel, kernel], inp * kernel * kernel, rng),
            bias: zeros_param(out),
            stride,
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, binds: &mut Vec<Var>) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        binds.extend([w, b]);
        g.conv2d(x, w, b, self.stride)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.weight), ("b".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w".into(), &mut self.weight), ("b".into(), &mut self.bias)]
    }
}

/// Transposed convolution; weight layout `[C_in, C_out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(inp: usize, out: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        ConvTranspose2d {
            weight: kaiming_uniform(&[inp, out, kernel, kernel], inp * kernel * kernel, rng),
            bias: zeros_param(out),
            stride,
        }
    }

    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, binds: &mut Vec<Var>) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        binds.extend([w, b]);
        g.conv_transpose2d(x, w, b, self.stride)
    }
}

impl Module for ConvTranspose2d {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("w".into(), &self.weight), ("b".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("w".into(), &mut self.weight), ("b".into(), &mut self.bias)]
    }
}

/// Prefixes each name of `inner` with `prefix`.
pub fn prefixed<T>(prefix: &str, inner: Vec<(String, T)>) -> Vec<(String, T)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}{n}"), t))
        .collect()
}
