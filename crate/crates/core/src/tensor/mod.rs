//! Dense rank-4 tensors and a small reverse-mode differentiation engine.
//!
//! Every value is a `(batch, channels, height, width)` array of `f32` stored
//! row-major. Kernels use the `(out, in, kh, kw)` layout. There is no
//! broadcasting: any extent disagreement is a hard [`Error::Shape`].

mod gradcheck;
pub mod kernels;
mod tape;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

/// Negative slope used by every leaky-relu in the model family.
pub const LEAKY_SLOPE: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn n(&self) -> usize {
        self.0[0]
    }
    pub fn c(&self) -> usize {
        self.0[1]
    }
    pub fn h(&self) -> usize {
        self.0[2]
    }
    pub fn w(&self) -> usize {
        self.0[3]
    }

    /// Elements in one `(h, w)` plane.
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

/// A rank-4 array of `f32`. Feature maps, frames, hidden states and
/// kernel weights all share this representation.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

/// Feature maps, frames and hidden states.
pub type ValueTensor = Tensor;

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "Tensor::new",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    /// A `(1, len, 1, 1)` tensor, the layout used for per-channel vectors.
    pub fn vector(values: Vec<f32>) -> Self {
        Tensor {
            shape: Shape::new(1, values.len(), 1, 1),
            data: values,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f32, hi: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn normal<R: Rng + ?Sized>(shape: Shape, std: f32, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f32) {
        let i = self.offset(n, c, y, x);
        self.data[i] = v;
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape.0;
        ((n * cs + c) * hs + y) * ws + x
    }

    /// Slice of one `(h, w)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64).abs()).sum()
    }

    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.abs_sum() / self.data.len() as f64
        }
    }

    /// Largest absolute elementwise difference. Shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_shape(other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    pub fn expect_shape(&self, shape: Shape, context: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::shape(
                context,
                format!("expected {shape}, found {}", self.shape),
            ));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Selects batch entry `n` as a `(1, c, h, w)` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = self.shape.c() * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c(), self.shape.h(), self.shape.w()),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Config("stack_batch of zero tensors".into()))?;
        let [_, c, h, w] = first.shape.0;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape.0[1..] != first.shape.0[1..] {
                return Err(Error::shape(
                    "stack_batch",
                    format!("{} vs {}", first.shape, t.shape),
                ));
            }
            n += t.shape.n();
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape::new(n, c, h, w), data)
    }
}

/// Convolution weights `(C_out, C_in, K_h, K_w)` with an optional bias of length `C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTensor {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl KernelTensor {
    pub fn new(weight: Tensor, bias: Option<Vec<f32>>) -> Result<Self> {
        let k = KernelTensor { weight, bias };
        k.check()?;
        Ok(k)
    }

    pub fn zeros(c_out: usize, c_in: usize, kh: usize, kw: usize, bias: bool) -> Self {
        KernelTensor {
            weight: Tensor::zeros(Shape::new(c_out, c_in, kh, kw)),
            bias: bias.then(|| vec![0.0; c_out]),
        }
    }

    fn check(&self) -> Result<()> {
        let s = self.weight.shape();
        if s.0.iter().any(|&e| e == 0) {
            return Err(Error::shape("KernelTensor", format!("zero extent in {s}")));
        }
        if let Some(b) = &self.bias {
            if b.len() != s.n() {
                return Err(Error::shape(
                    "KernelTensor",
                    format!("bias length {} for {} filters", b.len(), s.n()),
                ));
            }
        }
        Ok(())
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n()
    }
    pub fn c_in(&self) -> usize {
        self.weight.shape().c()
    }
    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.weight.shape().h(), self.weight.shape().w())
    }

    /// Weights of output filter `k`, a `C_in * K_h * K_w` slice.
    pub fn filter(&self, k: usize) -> &[f32] {
        let per = self.c_in() * self.weight.shape().plane();
        &self.weight.data()[k * per..(k + 1) * per]
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn bias_tensor(&self) -> Option<Tensor> {
        self.bias.clone().map(Tensor::vector)
    }

    /// Keeps only the listed output filters and input channels, in the given order.
    pub fn select(&self, outputs: &[usize], inputs: &[usize]) -> Result<KernelTensor> {
        let (kh, kw) = self.kernel_hw();
        if outputs.is_empty() || inputs.is_empty() {
            return Err(Error::Rewrite("kernel selection would be empty".into()));
        }
        if let Some(&o) = outputs.iter().find(|&&o| o >= self.c_out()) {
            return Err(Error::Index(format!("output filter {o} >= {}", self.c_out())));
        }
        if let Some(&i) = inputs.iter().find(|&&i| i >= self.c_in()) {
            return Err(Error::Index(format!("input channel {i} >= {}", self.c_in())));
        }
        let mut data = Vec::with_capacity(outputs.len() * inputs.len() * kh * kw);
        for &o in outputs {
            for &i in inputs {
                data.extend_from_slice(self.weight.plane(o, i));
            }
        }
        let weight = Tensor::new(Shape::new(outputs.len(), inputs.len(), kh, kw), data)?;
        let bias = self
            .bias
            .as_ref()
            .map(|b| outputs.iter().map(|&o| b[o]).collect());
        Ok(KernelTensor { weight, bias })
    }
}
