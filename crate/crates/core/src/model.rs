//! Executable recurrent VSR network: oracle-aligned bidirectional propagation,
//! hidden-state tracking and the x4 upsampling head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{
    Alignment, LayerKind, LayerSpec, NetworkSpec, RecurrentCellSpec, ResidualBlockSpec, Weights,
};
use crate::regularizer::ScalingState;
use crate::tensor::{Shape, Tape, Tensor, Var};

/// A low-resolution clip with optional targets and known per-step motion.
///
/// `motion[t]` is the integer translation `(dy, dx)` taking frame `t` to frame
/// `t + 1`: `frame[t + 1][y, x] = frame[t][y - dy, x - dx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<Tensor>,
    pub hr: Option<Vec<Tensor>>,
    pub motion: Vec<(i32, i32)>,
}

impl Sequence {
    pub fn new(frames: Vec<Tensor>, hr: Option<Vec<Tensor>>, motion: Vec<(i32, i32)>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Config("sequence has no frames".into()))?
            .shape();
        if first.n() != 1 {
            return Err(Error::shape("Sequence", format!("frames must have batch 1, found {first}")));
        }
        for f in &frames {
            f.expect_shape(first, "Sequence frames")?;
        }
        if motion.len() + 1 != frames.len() {
            return Err(Error::Config(format!(
                "{} frames need {} motion entries, found {}",
                frames.len(),
                frames.len() - 1,
                motion.len()
            )));
        }
        if let Some(hr) = &hr {
            if hr.len() != frames.len() {
                return Err(Error::Config(format!("{} HR frames for {} LR frames", hr.len(), frames.len())));
            }
            let hs = hr[0].shape();
            for f in hr {
                f.expect_shape(hs, "Sequence HR frames")?;
            }
        }
        Ok(Sequence { frames, hr, motion })
    }

    /// Uniform-noise frames in `[0, 1)` with random motion in `[-max_motion, max_motion]`.
    pub fn random(seed: u64, t: usize, h: usize, w: usize, max_motion: i32) -> Sequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t)
            .map(|_| Tensor::uniform(Shape::new(1, 3, h, w), 0.0, 1.0, &mut rng))
            .collect();
        let motion = (1..t)
            .map(|_| {
                (
                    rng.random_range(-max_motion..=max_motion),
                    rng.random_range(-max_motion..=max_motion),
                )
            })
            .collect();
        Sequence {
            frames,
            hr: None,
            motion,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn lr_shape(&self) -> Shape {
        self.frames[0].shape()
    }

    /// The first `t` frames.
    pub fn prefix(&self, t: usize) -> Sequence {
        Sequence {
            frames: self.frames[..t].to_vec(),
            hr: self.hr.as_ref().map(|h| h[..t].to_vec()),
            motion: self.motion[..t - 1].to_vec(),
        }
    }
}

/// Hidden states per timestep, both lists in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrace {
    pub forward: Vec<Tensor>,
    pub backward: Vec<Tensor>,
}

impl HiddenTrace {
    /// `H_F` after the last frame.
    pub fn forward_final(&self) -> &Tensor {
        self.forward.last().expect("non-empty trace")
    }

    /// `H_B` after the first frame, the last backward step.
    pub fn backward_final(&self) -> Option<&Tensor> {
        self.backward.first()
    }
}

/// Tape leaves for one network's parameters.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub convs: BTreeMap<String, (Var, Option<Var>)>,
    pub gammas: BTreeMap<String, Var>,
}

impl Bound {
    fn conv(&self, id: &str) -> Result<(Var, Option<Var>)> {
        self.convs.get(id).copied().ok_or_else(|| Error::Checkpoint {
            tensor: format!("{id}.weight"),
            detail: "not bound".into(),
        })
    }

    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.convs.values() {
            out.push(*w);
            out.extend(*b);
        }
        out.extend(self.gammas.values().copied());
        out
    }
}

/// Which parameter groups become trainable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub weights: bool,
    pub gammas: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        weights: false,
        gammas: false,
    };
    pub const ALL: Trainable = Trainable {
        weights: true,
        gammas: true,
    };
}

pub fn bind(tape: &mut Tape, weights: &Weights, scaling: Option<&ScalingState>, train: Trainable) -> Bound {
    let leaf = |tape: &mut Tape, t: Tensor, trainable: bool| {
        if trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        }
    };
    let mut bound = Bound::default();
    for (id, k) in weights.iter() {
        let w = leaf(tape, k.weight.clone(), train.weights);
        let b = k.bias_tensor().map(|b| leaf(tape, b, train.weights));
        bound.convs.insert(id.clone(), (w, b));
    }
    if let Some(s) = scaling {
        for (site, g) in &s.gammas {
            let v = leaf(tape, Tensor::vector(g.clone()), train.gammas);
            bound.gammas.insert(site.clone(), v);
        }
    }
    bound
}

/// Symbolic outputs of one clip on a tape.
#[derive(Clone, Debug)]
pub struct TapeOutputs {
    pub sr: Vec<Var>,
    pub forward: Vec<Var>,
    pub backward: Vec<Var>,
}

struct Runner<'a> {
    spec: &'a NetworkSpec,
    bound: &'a Bound,
}

impl Runner<'_> {
    fn conv(&self, tape: &mut Tape, layer: &LayerSpec, x: Var) -> Result<Var> {
        let e = layer.extents();
        let (w, b) = self.bound.conv(&layer.id)?;
        tape.conv2d(x, w, b, e.stride, e.padding)
            .map_err(|err| err.in_layer(&layer.id))
    }

    fn gamma(&self, tape: &mut Tape, site: &str, x: Var) -> Result<Var> {
        match self.bound.gammas.get(site) {
            Some(&g) => tape.channel_scale(x, g),
            None => Ok(x),
        }
    }

    /// Scales groups of four consecutive channels by one factor each.
    fn group_gamma(&self, tape: &mut Tape, site: &str, x: Var) -> Result<Var> {
        let Some(&g) = self.bound.gammas.get(site) else {
            return Ok(x);
        };
        let s = tape.value(x).shape();
        let [n, c, h, w] = s.0;
        if c % 4 != 0 {
            return Err(Error::shape(site, format!("{c} channels are not groups of 4")));
        }
        let grouped = tape.reshape(x, Shape::new(n, c / 4, 4 * h, w))?;
        let scaled = tape.channel_scale(grouped, g)?;
        tape.reshape(scaled, s)
    }

    fn block(&self, tape: &mut Tape, b: &ResidualBlockSpec, trunk: Var) -> Result<Var> {
        let slope = self.spec.activation_slope;
        let read = if b.reads_all() {
            trunk
        } else {
            tape.gather(trunk, &b.read_index)?
        };
        let read = self.gamma(tape, &b.read_gamma_site, read)?;
        let mid = self.conv(tape, &b.first_conv, read)?;
        let mid = self.gamma(tape, &b.mid_gamma_site, mid)?;
        let mid = tape.leaky_relu(mid, slope);
        let out = self.conv(tape, &b.second_conv, mid)?;
        let out = self.gamma(tape, &b.write_gamma_site, out)?;
        if b.writes_all() {
            tape.add(trunk, out)
        } else {
            tape.scatter_add(trunk, out, &b.write_index)
        }
    }

    fn cell_step(&self, tape: &mut Tape, cell: &RecurrentCellSpec, frame: Var, prev: Var) -> Result<Var> {
        let x = tape.concat(&[frame, prev])?;
        let e = self.conv(tape, &cell.entry_conv, x)?;
        let e = self.gamma(tape, &cell.entry_conv.output_site(), e)?;
        let e = tape.leaky_relu(e, self.spec.activation_slope);
        let mut trunk = if crate::graph::is_identity(&cell.entry_write, self.spec.trunk_width) {
            e
        } else {
            let s = tape.value(e).shape();
            let zeros = tape.constant(Tensor::zeros(Shape::new(s.n(), self.spec.trunk_width, s.h(), s.w())));
            tape.scatter_add(zeros, e, &cell.entry_write)?
        };
        for b in &cell.blocks {
            trunk = self.block(tape, b, trunk)?;
        }
        Ok(trunk)
    }

    fn align(&self, tape: &mut Tape, state: Var, dy: i32, dx: i32) -> Var {
        match self.spec.alignment {
            Alignment::OracleShift if (dy, dx) != (0, 0) => tape.shift(state, dy, dx),
            _ => state,
        }
    }

    fn head(&self, tape: &mut Tape, features: Var, frame: Var) -> Result<Var> {
        let mut x = features;
        for layer in &self.spec.upsampler {
            x = match layer.kind {
                LayerKind::Conv | LayerKind::FusionConv1x1 | LayerKind::UpsampleConv => {
                    let y = self.conv(tape, layer, x)?;
                    let y = if layer.prunable.shuffle_groups {
                        self.group_gamma(tape, &layer.group_site(), y)?
                    } else {
                        y
                    };
                    if layer.prunable.output_filters {
                        self.gamma(tape, &layer.output_site(), y)?
                    } else {
                        y
                    }
                }
                LayerKind::PixelShuffle => tape.pixel_shuffle(x, layer.factor.unwrap_or(2))?,
                LayerKind::Activation => tape.leaky_relu(x, self.spec.activation_slope),
                LayerKind::BilinearSkip => {
                    let up = tape.resize_bilinear(frame, layer.factor.unwrap_or(self.spec.scale))?;
                    tape.add(x, up)?
                }
                LayerKind::Concat | LayerKind::ScatterResidual => {
                    return Err(Error::Config(format!("layer kind {:?} in upsampler", layer.kind)))
                }
            };
        }
        Ok(x)
    }

    fn run(&self, tape: &mut Tape, seq: &Sequence) -> Result<TapeOutputs> {
        let t_len = seq.len();
        let s = seq.lr_shape();
        let c = self.spec.trunk_width;
        let frames: Vec<Var> = seq.frames.iter().map(|f| tape.constant(f.clone())).collect();
        let zero_state = Tensor::zeros(Shape::new(1, c, s.h(), s.w()));

        let mut backward = Vec::new();
        if let Some(cell) = &self.spec.backward_cell {
            let mut state = tape.constant(zero_state.clone());
            let mut rev = Vec::with_capacity(t_len);
            for t in (0..t_len).rev() {
                if t + 1 < t_len {
                    let (dy, dx) = seq.motion[t];
                    state = self.align(tape, state, -dy, -dx);
                }
                state = self.cell_step(tape, cell, frames[t], state)?;
                rev.push(state);
            }
            rev.reverse();
            backward = rev;
        }

        let mut forward = Vec::with_capacity(t_len);
        let mut state = tape.constant(zero_state);
        for t in 0..t_len {
            if t > 0 {
                let (dy, dx) = seq.motion[t - 1];
                state = self.align(tape, state, dy, dx);
            }
            state = self.cell_step(tape, &self.spec.forward_cell, frames[t], state)?;
            forward.push(state);
        }

        let mut sr = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let feats = if backward.is_empty() {
                forward[t]
            } else {
                tape.concat(&[forward[t], backward[t]])?
            };
            sr.push(self.head(tape, feats, frames[t])?);
        }
        Ok(TapeOutputs { sr, forward, backward })
    }
}

/// Records the full network on `tape` for one clip.
pub fn forward_on_tape(tape: &mut Tape, spec: &NetworkSpec, bound: &Bound, seq: &Sequence) -> Result<TapeOutputs> {
    let s = seq.lr_shape();
    if s.c() != spec.image_channels {
        return Err(Error::shape(
            "run_bidirectional",
            format!("frames have {} channels, network expects {}", s.c(), spec.image_channels),
        ));
    }
    Runner { spec, bound }.run(tape, seq)
}

/// Evaluates the network without gradients. `scaling` instruments the network.
pub fn run_bidirectional(
    spec: &NetworkSpec,
    weights: &Weights,
    scaling: Option<&ScalingState>,
    seq: &Sequence,
) -> Result<(Vec<Tensor>, HiddenTrace)> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, weights, scaling, Trainable::NONE);
    let out = forward_on_tape(&mut tape, spec, &bound, seq)?;
    let take = |vars: &[Var]| vars.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
    Ok((
        take(&out.sr),
        HiddenTrace {
            forward: take(&out.forward),
            backward: take(&out.backward),
        },
    ))
}

/// One forward-cell step outside a full sequence: aligns `prev` by `motion`,
/// concatenates it with `frame` and runs the entry conv and residual chain.
pub fn run_forward_cell(
    spec: &NetworkSpec,
    weights: &Weights,
    frame: &Tensor,
    prev: &Tensor,
    motion: (i32, i32),
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, weights, None, Trainable::NONE);
    let runner = Runner { spec, bound: &bound };
    let f = tape.constant(frame.clone());
    let p = tape.constant(prev.clone());
    let p = runner.align(&mut tape, p, motion.0, motion.1);
    let h = runner.cell_step(&mut tape, &spec.forward_cell, f, p)?;
    Ok(tape.value(h).clone())
}

/// Per-step mean |H - H'| for the forward states and, when present, the backward states.
pub fn hidden_error_profile(full: &HiddenTrace, pruned: &HiddenTrace) -> Result<(Vec<f64>, Vec<f64>)> {
    let err = |a: &[Tensor], b: &[Tensor]| -> Result<Vec<f64>> {
        if a.len() != b.len() {
            return Err(Error::shape(
                "hidden_error_profile",
                format!("{} vs {} timesteps", a.len(), b.len()),
            ));
        }
        a.iter()
            .zip(b)
            .map(|(x, y)| {
                y.expect_shape(x.shape(), "hidden_error_profile")?;
                Ok(x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| (p as f64 - q as f64).abs())
                    .sum::<f64>()
                    / x.numel() as f64)
            })
            .collect()
    };
    Ok((err(&full.forward, &pruned.forward)?, err(&full.backward, &pruned.backward)?))
}

/// Spearman rank correlation, average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests;
