//! Dense f64 tensors, trainable parameters and a tape-based reverse-mode
//! differentiation engine.
//!
//! Values live in plain row-major [`Tensor`]s. A [`Tape`] records every
//! operation of one forward pass; [`Tape::backward`] replays it in reverse and
//! hands back a [`Gradients`] table which trainable [`Param`]s pull from.

mod gradcheck;
mod optim;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerKind};
pub use tape::{Gradients, Segment, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row-wise softmax over the trailing dimension, max-subtracted.
    pub fn softmax_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = self.data.clone();
        for row in out.chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }
}

/// Process-unique identity of a trainable parameter within a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        ParamId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named tensor that may receive gradients.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
}

impl Clone for Param {
    /// Clones get a fresh identity so the copy and the original never alias
    /// on a shared tape.
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds this parameter's slice of `grads` into its gradient buffer.
    /// Parameters that do not require grad are left untouched.
    pub fn accumulate(&mut self, grads: &Gradients) {
        if !self.requires_grad {
            return;
        }
        let Some(g) = grads.param(self.id) else {
            return;
        };
        match &mut self.grad {
            Some(buf) => {
                for (b, v) in buf.data.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => {
                self.grad = Some(Tensor {
                    shape: self.value.shape.clone(),
                    data: g.to_vec(),
                });
            }
        }
    }
}

/// Anything that owns trainable parameters.
pub trait Module {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn set_requires_grad(&mut self, on: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(on);
        }
    }

    fn accumulate(&mut self, grads: &Gradients) {
        for p in self.params_mut() {
            p.accumulate(grads);
        }
    }

    /// Parameters currently holding a gradient, ready for an optimizer step.
    fn params_with_grad(&mut self) -> Vec<&mut Param> {
        self.params_mut()
            .into_iter()
            .filter(|p| p.grad().is_some())
            .collect()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value().numel()).sum()
    }
}

/// Fully connected layer `x W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::randn(&[d_in, d_out], std, rng),
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out])),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_bias(xw, b)
    }

    /// Forward pass without a tape.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = tape::matmul_values(x, self.weight.value())?;
        let b = self.bias.value().data();
        for row in out.data_mut().chunks_mut(b.len()) {
            for (o, bi) in row.iter_mut().zip(b) {
                *o += bi;
            }
        }
        Ok(out)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Affine layer normalisation over the trailing dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gain: Param::new(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

impl Module for LayerNorm {
    fn params(&self) -> Vec<&Param> {
        vec![&self.gain, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Standard normal CDF via erf.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// L2-normalises a vector; the zero vector maps to itself.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / norm).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -50.0, 0.0, 50.0]).unwrap();
        let s = t.softmax_rows();
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(s.row(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn cloned_params_get_new_ids() {
        let p = Param::new("w", Tensor::scalar(1.0));
        let q = p.clone();
        assert_ne!(p.id(), q.id());
        assert_eq!(p.value(), q.value());
    }

    #[test]
    fn zero_vector_normalizes_to_zero() {
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }
}
