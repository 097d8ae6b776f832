//! Wengert-list reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so every node's inputs have smaller
//! indices than the node itself. `backward` walks the list in reverse, which
//! visits each node only after all of its consumers.

use super::kernels::{self, ConvGeometry};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    PixelShuffle {
        input: Var,
        r: usize,
    },
    ChannelScale {
        input: Var,
        gamma: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    LeakyRelu {
        input: Var,
        slope: f32,
    },
    Concat {
        inputs: Vec<Var>,
    },
    ResizeBilinear {
        input: Var,
        factor: usize,
    },
    Shift {
        input: Var,
        dy: i32,
        dx: i32,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    ScatterAdd {
        base: Var,
        src: Var,
        index: Vec<usize>,
    },
    Charbonnier {
        pred: Var,
        target: Var,
        eps: f32,
    },
    SquaredPenalty {
        gamma: Var,
        index: Vec<usize>,
        weight: f32,
    },
    MeanAbsError {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    Reshape {
        input: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations and replays them backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry { stride, padding };
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geo,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let needs = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            },
            needs,
        ))
    }

    pub fn pixel_shuffle(&mut self, input: Var, r: usize) -> Result<Var> {
        let out = kernels::pixel_shuffle(self.value(input), r)?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::PixelShuffle { input, r }, needs))
    }

    pub fn channel_scale(&mut self, input: Var, gamma: Var) -> Result<Var> {
        let out = kernels::channel_scale(self.value(input), self.value(gamma))?;
        let needs = self.needs(&[input, gamma]);
        Ok(self.push(out, Op::ChannelScale { input, gamma }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        y.expect_shape(x.shape(), "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        y.expect_shape(x.shape(), "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape(), data)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let needs = self.needs(&[input]);
        self.push(out, Op::Scale { input, factor }, needs)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f32) -> Var {
        let out = kernels::leaky_relu(self.value(input), slope);
        let needs = self.needs(&[input]);
        self.push(out, Op::LeakyRelu { input, slope }, needs)
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat_channels(&values)?;
        let needs = self.needs(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    pub fn resize_bilinear(&mut self, input: Var, factor: usize) -> Result<Var> {
        let out = kernels::resize_bilinear(self.value(input), factor)?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::ResizeBilinear { input, factor }, needs))
    }

    pub fn shift(&mut self, input: Var, dy: i32, dx: i32) -> Var {
        let out = kernels::shift(self.value(input), dy, dx);
        let needs = self.needs(&[input]);
        self.push(out, Op::Shift { input, dy, dx }, needs)
    }

    pub fn gather(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let out = kernels::gather_channels(self.value(input), index)?;
        let needs = self.needs(&[input]);
        Ok(self.push(
            out,
            Op::Gather {
                input,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    pub fn scatter_add(&mut self, base: Var, src: Var, index: &[usize]) -> Result<Var> {
        let out = kernels::scatter_add_channels(self.value(base), self.value(src), index)?;
        let needs = self.needs(&[base, src]);
        Ok(self.push(
            out,
            Op::ScatterAdd {
                base,
                src,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    pub fn charbonnier(&mut self, pred: Var, target: Var, eps: f32) -> Result<Var> {
        let loss = kernels::charbonnier(self.value(pred), self.value(target), eps)?;
        let needs = self.needs(&[pred, target]);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::Charbonnier { pred, target, eps },
            needs,
        ))
    }

    /// `weight * sum_{i in index} gamma[i]^2`.
    pub fn squared_penalty(&mut self, gamma: Var, index: &[usize], weight: f32) -> Result<Var> {
        let g = self.value(gamma);
        kernels::check_distinct(index, g.numel())?;
        let s: f64 = index.iter().map(|&i| (g.data()[i] as f64).powi(2)).sum();
        let needs = self.needs(&[gamma]);
        Ok(self.push(
            Tensor::scalar((weight as f64 * s) as f32),
            Op::SquaredPenalty {
                gamma,
                index: index.to_vec(),
                weight,
            },
            needs,
        ))
    }

    pub fn mean_abs_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        y.expect_shape(x.shape(), "mean_abs_error")?;
        let s: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| (p as f64 - q as f64).abs())
            .sum();
        let out = Tensor::scalar((s / x.numel() as f64) as f32);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::MeanAbsError { a, b }, needs))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum() as f32);
        let needs = self.needs(&[input]);
        self.push(out, Op::Sum { input }, needs)
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, input: Var, shape: Shape) -> Result<Var> {
        let out = self.value(input).clone().reshape(shape)?;
        let needs = self.needs(&[input]);
        Ok(self.push(out, Op::Reshape { input }, needs))
    }

    /// Sums a list of scalars; an empty list yields a constant zero.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Reverse pass seeded with `d(root)/d(root) = 1`. `root` must be a single element.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, found {}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let mut send = |v: Var, contrib: Tensor| accumulate(grads, v, contrib);
        match *op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geo,
            } => {
                let need = (
                    self.requires_grad(input),
                    self.requires_grad(weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                );
                let cg =
                    kernels::conv2d_backward(self.value(input), self.value(weight), g, geo, need)?;
                if let Some(gi) = cg.input {
                    send(input, gi);
                }
                if let Some(gw) = cg.weight {
                    send(weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    send(b, gb.reshape(self.value(b).shape())?);
                }
            }
            Op::PixelShuffle { input, r } => {
                if self.requires_grad(input) {
                    send(input, kernels::pixel_unshuffle(g, r)?);
                }
            }
            Op::ChannelScale { input, gamma } => {
                let x = self.value(input);
                let gm = self.value(gamma);
                if self.requires_grad(input) {
                    send(input, kernels::channel_scale(g, gm)?);
                }
                if self.requires_grad(gamma) {
                    let [n, c, _, _] = x.shape().0;
                    let mut acc = vec![0.0f64; c];
                    for b in 0..n {
                        for (ch, a) in acc.iter_mut().enumerate() {
                            *a += x
                                .plane(b, ch)
                                .iter()
                                .zip(g.plane(b, ch))
                                .map(|(&p, &q)| p as f64 * q as f64)
                                .sum::<f64>();
                        }
                    }
                    let t = Tensor::vector(acc.iter().map(|&v| v as f32).collect());
                    send(gamma, t.reshape(gm.shape())?);
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(a) {
                    send(a, g.clone());
                }
                if self.requires_grad(b) {
                    send(b, g.clone());
                }
            }
            Op::Mul { a, b } => {
                let (x, y) = (self.value(a), self.value(b));
                if self.requires_grad(a) {
                    let d = g.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
                    send(a, Tensor::new(g.shape(), d)?);
                }
                if self.requires_grad(b) {
                    let d = g.data().iter().zip(x.data()).map(|(p, q)| p * q).collect();
                    send(b, Tensor::new(g.shape(), d)?);
                }
            }
            Op::Scale { input, factor } => {
                if self.requires_grad(input) {
                    send(input, g.map(|v| v * factor));
                }
            }
            Op::LeakyRelu { input, slope } => {
                if self.requires_grad(input) {
                    let x = self.value(input);
                    let d = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { gv * slope })
                        .collect();
                    send(input, Tensor::new(x.shape(), d)?);
                }
            }
            Op::Concat { ref inputs } => {
                let widths: Vec<usize> = inputs.iter().map(|&v| self.value(v).shape().c()).collect();
                let parts = kernels::split_channels(g, &widths)?;
                for (&v, part) in inputs.iter().zip(parts) {
                    if self.requires_grad(v) {
                        send(v, part);
                    }
                }
            }
            Op::ResizeBilinear { input, factor } => {
                if self.requires_grad(input) {
                    let shape = self.value(input).shape();
                    send(input, kernels::resize_bilinear_backward(g, shape, factor)?);
                }
            }
            Op::Shift { input, dy, dx } => {
                if self.requires_grad(input) {
                    send(input, kernels::shift(g, -dy, -dx));
                }
            }
            Op::Gather { input, ref index } => {
                if self.requires_grad(input) {
                    let zeros = Tensor::zeros(self.value(input).shape());
                    send(input, kernels::scatter_add_channels(&zeros, g, index)?);
                }
            }
            Op::ScatterAdd {
                base,
                src,
                ref index,
            } => {
                if self.requires_grad(base) {
                    send(base, g.clone());
                }
                if self.requires_grad(src) {
                    send(src, kernels::gather_channels(g, index)?);
                }
            }
            Op::Charbonnier { pred, target, eps } => {
                let (p, t) = (self.value(pred), self.value(target));
                let frames = p.shape().n();
                let per = p.numel() / frames;
                let eps2 = (eps as f64).powi(2);
                let upstream = g.item() as f64;
                let mut dp = vec![0.0f32; p.numel()];
                for f in 0..frames {
                    let r = f * per..(f + 1) * per;
                    let sse: f64 = p.data()[r.clone()]
                        .iter()
                        .zip(&t.data()[r.clone()])
                        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
                        .sum();
                    let k = upstream / ((sse + eps2).sqrt() * frames as f64);
                    for i in r {
                        dp[i] = ((p.data()[i] as f64 - t.data()[i] as f64) * k) as f32;
                    }
                }
                if self.requires_grad(target) {
                    send(target, Tensor::new(p.shape(), dp.iter().map(|v| -v).collect())?);
                }
                if self.requires_grad(pred) {
                    send(pred, Tensor::new(p.shape(), dp)?);
                }
            }
            Op::SquaredPenalty {
                gamma,
                ref index,
                weight,
            } => {
                if self.requires_grad(gamma) {
                    let gm = self.value(gamma);
                    let k = 2.0 * weight as f64 * g.item() as f64;
                    let mut d = Tensor::zeros(gm.shape());
                    for &i in index {
                        d.data_mut()[i] = (k * gm.data()[i] as f64) as f32;
                    }
                    send(gamma, d);
                }
            }
            Op::MeanAbsError { a, b } => {
                let (x, y) = (self.value(a), self.value(b));
                let k = g.item() / x.numel() as f32;
                let signs: Vec<f32> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| match p.partial_cmp(&q) {
                        Some(std::cmp::Ordering::Greater) => k,
                        Some(std::cmp::Ordering::Less) => -k,
                        _ => 0.0,
                    })
                    .collect();
                if self.requires_grad(b) {
                    send(b, Tensor::new(x.shape(), signs.iter().map(|v| -v).collect())?);
                }
                if self.requires_grad(a) {
                    send(a, Tensor::new(x.shape(), signs)?);
                }
            }
            Op::Sum { input } => {
                if self.requires_grad(input) {
                    send(input, Tensor::full(self.value(input).shape(), g.item()));
                }
            }
            Op::Reshape { input } => {
                if self.requires_grad(input) {
                    send(input, g.clone().reshape(self.value(input).shape())?);
                }
            }
        }
        debug_assert!(out.numel() == g.numel());
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            debug_assert_eq!(existing.shape(), contrib.shape());
            existing
                .data_mut()
                .iter_mut()
                .zip(contrib.data())
                .for_each(|(e, c)| *e += c);
        }
        slot @ None => *slot = Some(contrib),
    }
}
