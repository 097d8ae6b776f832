//! Forward kernels and their adjoints, free of any tape bookkeeping.
//!
//! Convolutions lower to `im2col` followed by a double-precision GEMM, so dot
//! products accumulate in 64 bits and are rounded to `f32` once on store.

use super::{Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::Config("conv stride must be positive".into()));
        }
        let padded = input + 2 * self.padding;
        if padded < kernel {
            return Err(Error::Config(format!(
                "conv output extent is not positive: input {input} + 2*{} < kernel {kernel}",
                self.padding
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geo: ConvGeometry,
}

impl ConvDims {
    fn new(input: Shape, weight: Shape, geo: ConvGeometry) -> Result<Self> {
        let [n, ci, h, w] = input.0;
        let [co, wci, kh, kw] = weight.0;
        if ci != wci {
            return Err(Error::shape(
                "conv2d",
                format!("input {input} has {ci} channels but kernel {weight} expects {wci}"),
            ));
        }
        let ho = geo.output_extent(h, kh)?;
        let wo = geo.output_extent(w, kw)?;
        Ok(ConvDims {
            n,
            ci,
            h,
            w,
            co,
            kh,
            kw,
            ho,
            wo,
            geo,
        })
    }

    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.geo.stride == 1 && self.geo.padding == 0
    }
}

/// Unfolds batch item `n` into a `(ci*kh*kw) x (ho*wo)` matrix.
fn im2col(input: &Tensor, d: &ConvDims, n: usize, col: &mut [f64]) {
    let cols = d.cols();
    let (s, p) = (d.geo.stride as isize, d.geo.padding as isize);
    for c in 0..d.ci {
        let plane = input.plane(n, c);
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..d.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *o = if ix < 0 || ix >= d.w as isize {
                            0.0
                        } else {
                            src[ix as usize] as f64
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input plane grid.
fn col2im(col: &[f64], d: &ConvDims, grad: &mut [f64]) {
    let cols = d.cols();
    let (s, p) = (d.geo.stride as isize, d.geo.padding as isize);
    for c in 0..d.ci {
        let plane = &mut grad[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..d.ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c (m x n) = alpha * a (m x k) * b (k x n) + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index reachable through the given strides lies inside the
    // slices; callers pass dense row- or column-major views of exact size.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geo: ConvGeometry,
) -> Result<Tensor> {
    let d = ConvDims::new(input.shape(), weight.shape(), geo)?;
    if let Some(b) = bias {
        if b.numel() != d.co {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {} filters", b.numel(), d.co),
            ));
        }
    }
    let wmat = to_f64(weight.data());
    let (rows, cols) = (d.rows(), d.cols());
    let mut out = Tensor::zeros(Shape::new(d.n, d.co, d.ho, d.wo));
    let mut col = vec![0.0f64; rows * cols];
    let mut acc = vec![0.0f64; d.co * cols];
    for n in 0..d.n {
        if d.is_pointwise() {
            for c in 0..d.ci {
                for (dst, &src) in col[c * cols..(c + 1) * cols].iter_mut().zip(input.plane(n, c)) {
                    *dst = src as f64;
                }
            }
        } else {
            im2col(input, &d, n, &mut col);
        }
        match bias {
            Some(b) => {
                for (o, chunk) in acc.chunks_mut(cols).enumerate() {
                    chunk.fill(b.data()[o] as f64);
                }
            }
            None => acc.fill(0.0),
        }
        gemm(
            d.co,
            rows,
            cols,
            &wmat,
            (rows as isize, 1),
            &col,
            (cols as isize, 1),
            1.0,
            &mut acc,
        );
        let start = n * d.co * cols;
        for (dst, &src) in out.data_mut()[start..start + d.co * cols].iter_mut().zip(&acc) {
            *dst = src as f32;
        }
    }
    Ok(out)
}

/// Gradients of a convolution with respect to input, weight and bias.
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geo: ConvGeometry,
    need: (bool, bool, bool),
) -> Result<ConvGrads> {
    let d = ConvDims::new(input.shape(), weight.shape(), geo)?;
    grad_out.expect_shape(Shape::new(d.n, d.co, d.ho, d.wo), "conv2d backward")?;
    let (need_in, need_w, need_b) = need;
    let (rows, cols) = (d.rows(), d.cols());
    let wmat = to_f64(weight.data());
    let mut col = vec![0.0f64; rows * cols];
    let mut dcol = vec![0.0f64; if need_in { rows * cols } else { 0 }];
    let mut gin = need_in.then(|| Tensor::zeros(input.shape()));
    let mut gw = vec![0.0f64; if need_w { d.co * rows } else { 0 }];
    let mut gb = vec![0.0f64; if need_b { d.co } else { 0 }];
    let mut plane_acc = vec![0.0f64; d.ci * d.h * d.w];
    for n in 0..d.n {
        let start = n * d.co * cols;
        let gout = to_f64(&grad_out.data()[start..start + d.co * cols]);
        if need_b {
            for (o, chunk) in gout.chunks(cols).enumerate() {
                gb[o] += chunk.iter().sum::<f64>();
            }
        }
        if need_w {
            if d.is_pointwise() {
                for c in 0..d.ci {
                    for (dst, &src) in col[c * cols..(c + 1) * cols].iter_mut().zip(input.plane(n, c))
                    {
                        *dst = src as f64;
                    }
                }
            } else {
                im2col(input, &d, n, &mut col);
            }
            // gw (co x rows) += gout (co x cols) * col^T (cols x rows)
            gemm(
                d.co,
                cols,
                rows,
                &gout,
                (cols as isize, 1),
                &col,
                (1, cols as isize),
                1.0,
                &mut gw,
            );
        }
        if let Some(gin) = gin.as_mut() {
            // dcol (rows x cols) = W^T (rows x co) * gout (co x cols)
            gemm(
                rows,
                d.co,
                cols,
                &wmat,
                (1, rows as isize),
                &gout,
                (cols as isize, 1),
                0.0,
                &mut dcol,
            );
            if d.is_pointwise() {
                plane_acc.copy_from_slice(&dcol);
            } else {
                plane_acc.fill(0.0);
                col2im(&dcol, &d, &mut plane_acc);
            }
            let per = d.ci * d.h * d.w;
            for (dst, &src) in gin.data_mut()[n * per..(n + 1) * per].iter_mut().zip(&plane_acc) {
                *dst = src as f32;
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        weight: need_w.then(|| Tensor {
            shape: weight.shape(),
            data: gw.iter().map(|&v| v as f32).collect(),
        }),
        bias: need_b.then(|| Tensor::vector(gb.iter().map(|&v| v as f32).collect())),
    })
}

/// Periodic shuffle: `out[c, y, x] = in[c*r*r + (y % r)*r + (x % r), y / r, x / r]`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape().0;
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{c} channels not divisible by r^2 = {}", r * r),
        ));
    }
    let oc = c / (r * r);
    let mut out = Tensor::zeros(Shape::new(n, oc, h * r, w * r));
    for b in 0..n {
        for o in 0..oc {
            let dst = out.plane_mut(b, o);
            for dy in 0..r {
                for dx in 0..r {
                    let src = input.plane(b, o * r * r + dy * r + dx);
                    for y in 0..h {
                        for x in 0..w {
                            dst[(y * r + dy) * w * r + x * r + dx] = src[y * w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape().0;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("spatial extent {h}x{w} not divisible by {r}"),
        ));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Tensor::zeros(Shape::new(n, c * r * r, oh, ow));
    for b in 0..n {
        for o in 0..c {
            let src = input.plane(b, o);
            for dy in 0..r {
                for dx in 0..r {
                    let dst = out.plane_mut(b, o * r * r + dy * r + dx);
                    for y in 0..oh {
                        for x in 0..ow {
                            dst[y * ow + x] = src[(y * r + dy) * w + x * r + dx];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn channel_scale(input: &Tensor, gamma: &Tensor) -> Result<Tensor> {
    let [n, c, _, _] = input.shape().0;
    if gamma.numel() != c {
        return Err(Error::shape(
            "channel_scale",
            format!("gamma has {} entries for {c} channels", gamma.numel()),
        ));
    }
    let mut out = input.clone();
    for b in 0..n {
        for (ch, &g) in gamma.data().iter().enumerate() {
            out.plane_mut(b, ch).iter_mut().for_each(|v| *v *= g);
        }
    }
    Ok(out)
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    input.map(|v| if v > 0.0 { v } else { v * slope })
}

/// Integer translation with zero fill: `out[y, x] = in[y - dy, x - dx]`.
pub fn shift(input: &Tensor, dy: i32, dx: i32) -> Tensor {
    let [n, c, h, w] = input.shape().0;
    let mut out = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..h as i64 {
                let sy = y - dy as i64;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w as i64 {
                    let sx = x - dx as i64;
                    if sx >= 0 && sx < w as i64 {
                        dst[(y as usize) * w + x as usize] = src[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.shape().0;
    for t in inputs {
        let [tn, _, th, tw] = t.shape().0;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape(
                "concat",
                format!("{} vs {}", first.shape(), t.shape()),
            ));
        }
    }
    let c: usize = inputs.iter().map(|t| t.shape().c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for t in inputs {
            let per = t.shape().c() * h * w;
            data.extend_from_slice(&t.data()[b * per..(b + 1) * per]);
        }
    }
    Tensor::new(Shape::new(n, c, h, w), data)
}

/// Splits a channel concat back into pieces of the given widths.
pub fn split_channels(input: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let [n, c, h, w] = input.shape().0;
    if widths.iter().sum::<usize>() != c {
        return Err(Error::shape(
            "split",
            format!("widths {widths:?} do not sum to {c}"),
        ));
    }
    let mut parts: Vec<Tensor> = widths
        .iter()
        .map(|&wc| Tensor::zeros(Shape::new(n, wc, h, w)))
        .collect();
    for b in 0..n {
        let mut c0 = 0;
        for (part, &wc) in parts.iter_mut().zip(widths) {
            for ch in 0..wc {
                part.plane_mut(b, ch).copy_from_slice(input.plane(b, c0 + ch));
            }
            c0 += wc;
        }
    }
    Ok(parts)
}

pub fn gather_channels(input: &Tensor, index: &[usize]) -> Result<Tensor> {
    let [n, c, h, w] = input.shape().0;
    if let Some(&bad) = index.iter().find(|&&i| i >= c) {
        return Err(Error::Index(format!("gather channel {bad} of {c}")));
    }
    let mut out = Tensor::zeros(Shape::new(n, index.len(), h, w));
    for b in 0..n {
        for (j, &i) in index.iter().enumerate() {
            out.plane_mut(b, j).copy_from_slice(input.plane(b, i));
        }
    }
    Ok(out)
}

/// `out = base; out[:, index[j]] += src[:, j]`. Indices must be distinct.
pub fn scatter_add_channels(base: &Tensor, src: &Tensor, index: &[usize]) -> Result<Tensor> {
    let [n, c, h, w] = base.shape().0;
    let [sn, sc, shh, sw] = src.shape().0;
    if (sn, shh, sw) != (n, h, w) || sc != index.len() {
        return Err(Error::shape(
            "scatter_add",
            format!(
                "base {} src {} with {} indices",
                base.shape(),
                src.shape(),
                index.len()
            ),
        ));
    }
    check_distinct(index, c)?;
    let mut out = base.clone();
    for b in 0..n {
        for (j, &i) in index.iter().enumerate() {
            let s = src.plane(b, j);
            out.plane_mut(b, i)
                .iter_mut()
                .zip(s)
                .for_each(|(o, &v)| *o += v);
        }
    }
    Ok(out)
}

pub(crate) fn check_distinct(index: &[usize], bound: usize) -> Result<()> {
    let mut seen = vec![false; bound];
    for &i in index {
        if i >= bound {
            return Err(Error::Index(format!("channel {i} of {bound}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Index(format!("channel {i} listed twice")));
        }
    }
    Ok(())
}

/// One output sample's two bilinear taps along an axis.
#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Half-pixel-centre bilinear taps for integer upscaling, clamped at the border.
fn bilinear_taps(input: usize, factor: usize) -> Vec<Tap> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l = src - i0 as f64;
            Tap {
                i0,
                i1,
                w0: 1.0 - l,
                w1: l,
            }
        })
        .collect()
}

pub fn resize_bilinear(input: &Tensor, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape().0;
    if factor == 0 {
        return Err(Error::Config("resize factor must be positive".into()));
    }
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for (oy, t) in ty.iter().enumerate() {
                let r0 = &src[t.i0 * w..(t.i0 + 1) * w];
                let r1 = &src[t.i1 * w..(t.i1 + 1) * w];
                for (ox, s) in tx.iter().enumerate() {
                    let top = s.w0 * r0[s.i0] as f64 + s.w1 * r0[s.i1] as f64;
                    let bot = s.w0 * r1[s.i0] as f64 + s.w1 * r1[s.i1] as f64;
                    dst[oy * ow + ox] = (t.w0 * top + t.w1 * bot) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_bilinear`] for a given input shape.
pub fn resize_bilinear_backward(grad_out: &Tensor, input: Shape, factor: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.0;
    grad_out.expect_shape(Shape::new(n, c, h * factor, w * factor), "resize backward")?;
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let ow = w * factor;
    let mut out = Tensor::zeros(input);
    let mut acc = vec![0.0f64; h * w];
    for b in 0..n {
        for ch in 0..c {
            acc.fill(0.0);
            let g = grad_out.plane(b, ch);
            for (oy, t) in ty.iter().enumerate() {
                for (ox, s) in tx.iter().enumerate() {
                    let v = g[oy * ow + ox] as f64;
                    acc[t.i0 * w + s.i0] += t.w0 * s.w0 * v;
                    acc[t.i0 * w + s.i1] += t.w0 * s.w1 * v;
                    acc[t.i1 * w + s.i0] += t.w1 * s.w0 * v;
                    acc[t.i1 * w + s.i1] += t.w1 * s.w1 * v;
                }
            }
            for (d, &a) in out.plane_mut(b, ch).iter_mut().zip(&acc) {
                *d = a as f32;
            }
        }
    }
    Ok(out)
}

/// Mean over frames (batch entries) of `sqrt(||pred - target||^2 + eps^2)`.
pub fn charbonnier(pred: &Tensor, target: &Tensor, eps: f32) -> Result<f64> {
    target.expect_shape(pred.shape(), "charbonnier")?;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("charbonnier eps must be positive, got {eps}")));
    }
    let frames = pred.shape().n();
    let per = pred.numel() / frames.max(1);
    let eps2 = (eps as f64).powi(2);
    let total: f64 = (0..frames)
        .map(|t| {
            let sse: f64 = pred.data()[t * per..(t + 1) * per]
                .iter()
                .zip(&target.data()[t * per..(t + 1) * per])
                .map(|(&p, &q)| (p as f64 - q as f64).powi(2))
                .sum();
            (sse + eps2).sqrt()
        })
        .sum();
    Ok(total / frames as f64)
}
