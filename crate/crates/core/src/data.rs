//! Synthetic clips with known motion, BI/BD degradation, PSNR/SSIM and PNG
//! sequence directories.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sequence;
use crate::tensor::{Shape, Tensor};

pub const SCALE: usize = 4;
pub const BD_SIGMA: f64 = 1.6;
pub const BD_TAPS: usize = 13;
pub const CUBIC_A: f64 = -0.5;
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Degradation {
    /// Antialiased cubic resampling.
    Bi {
        #[serde(default = "cubic_a")]
        a: f64,
    },
    /// Gaussian blur then every fourth pixel from index 0.
    Bd {
        #[serde(default = "bd_sigma")]
        sigma: f64,
        #[serde(default = "bd_taps")]
        taps: usize,
    },
}

fn cubic_a() -> f64 {
    CUBIC_A
}
fn bd_sigma() -> f64 {
    BD_SIGMA
}
fn bd_taps() -> usize {
    BD_TAPS
}

impl Default for Degradation {
    fn default() -> Self {
        Degradation::Bd {
            sigma: BD_SIGMA,
            taps: BD_TAPS,
        }
    }
}

impl Degradation {
    pub fn bi() -> Self {
        Degradation::Bi { a: CUBIC_A }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::Bd { sigma, taps } if !(sigma > 0.0) || taps % 2 == 0 => Err(Error::Config(format!(
                "BD degradation needs sigma > 0 and an odd tap count (got {sigma}, {taps})"
            ))),
            _ => Ok(()),
        }
    }
}

/// Normalized Gaussian taps centred on the middle entry.
pub fn gaussian_taps(sigma: f64, taps: usize) -> Vec<f64> {
    let r = (taps / 2) as f64;
    let raw: Vec<f64> = (0..taps)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Mirror index repeating the edge sample.
fn symmetric(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Keys cubic kernel.
pub fn cubic(x: f64, a: f64) -> f64 {
    let t = x.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// One output sample as a list of `(input index, weight)`.
type Taps = Vec<(usize, f64)>;

fn bd_taps_1d(n_in: usize, sigma: f64, taps: usize) -> Vec<Taps> {
    let g = gaussian_taps(sigma, taps);
    let r = (taps / 2) as isize;
    (0..n_in / SCALE)
        .map(|o| {
            let c = (o * SCALE) as isize;
            g.iter()
                .enumerate()
                .map(|(k, &w)| (reflect(c + k as isize - r, n_in), w))
                .collect()
        })
        .collect()
}

fn bi_taps_1d(n_in: usize, a: f64) -> Vec<Taps> {
    let s = SCALE as f64;
    let half = 2.0 * s;
    (0..n_in / SCALE)
        .map(|o| {
            let c = (o as f64 + 0.5) * s - 0.5;
            let lo = (c - half).floor() as isize;
            let hi = (c + half).ceil() as isize;
            let mut taps: Taps = (lo..=hi)
                .map(|j| (symmetric(j, n_in), cubic((c - j as f64) / s, a) / s))
                .filter(|&(_, w)| w != 0.0)
                .collect();
            let sum: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= sum);
            taps
        })
        .collect()
}

fn separable(img: &Tensor, rows: &[Taps], cols: &[Taps]) -> Tensor {
    let [n, c, h, w] = img.shape().0;
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Tensor::zeros(Shape::new(n, c, oh, ow));
    let mut tmp = vec![0.0f64; h * ow];
    for b in 0..n {
        for ch in 0..c {
            let p = img.plane(b, ch);
            for y in 0..h {
                for (x, taps) in cols.iter().enumerate() {
                    tmp[y * ow + x] = taps.iter().map(|&(i, wt)| p[y * w + i] as f64 * wt).sum();
                }
            }
            let q = out.plane_mut(b, ch);
            for (y, taps) in rows.iter().enumerate() {
                for x in 0..ow {
                    q[y * ow + x] = taps.iter().map(|&(i, wt)| tmp[i * ow + x] * wt).sum::<f64>() as f32;
                }
            }
        }
    }
    out
}

/// x4 downscaling of an HR frame.
pub fn degrade(hr: &Tensor, spec: Degradation) -> Result<Tensor> {
    spec.validate()?;
    let s = hr.shape();
    if s.h() % SCALE != 0 || s.w() % SCALE != 0 || s.h() == 0 || s.w() == 0 {
        return Err(Error::shape(
            "degrade",
            format!("spatial size {}x{} not divisible by {SCALE}", s.h(), s.w()),
        ));
    }
    let (rows, cols) = match spec {
        Degradation::Bd { sigma, taps } => (bd_taps_1d(s.h(), sigma, taps), bd_taps_1d(s.w(), sigma, taps)),
        Degradation::Bi { a } => (bi_taps_1d(s.h(), a), bi_taps_1d(s.w(), a)),
    };
    Ok(separable(hr, &rows, &cols))
}

fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    b.expect_shape(a.shape(), "psnr")?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64)
}

/// `10 log10(peak^2 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::Config(format!("psnr peak {peak} must be positive")));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// PSNR after clamping the prediction to `[0, 1]`, peak 1.
pub fn psnr_clamped(pred: &Tensor, target: &Tensor) -> Result<f64> {
    psnr(&pred.map(|v| v.clamp(0.0, 1.0)), target, 1.0)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Mean SSIM over valid 11x11 Gaussian windows and channels, dynamic range 1.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    b.expect_shape(a.shape(), "ssim")?;
    let [n, c, h, w] = a.shape().0;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("images {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let g = gaussian_taps(SSIM_SIGMA, SSIM_WINDOW);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..n {
        for ch in 0..c {
            let (pa, pb) = (a.plane(bi, ch), b.plane(bi, ch));
            for y in 0..oh {
                for x in 0..ow {
                    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for (dy, gy) in g.iter().enumerate() {
                        for (dx, gx) in g.iter().enumerate() {
                            let wt = gy * gx;
                            let i = (y + dy) * w + x + dx;
                            let (va, vb) = (pa[i] as f64, pb[i] as f64);
                            ma += wt * va;
                            mb += wt * vb;
                            saa += wt * va * va;
                            sbb += wt * vb * vb;
                            sab += wt * va * vb;
                        }
                    }
                    let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Settings for procedurally generated clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    /// HR height and width, both divisible by 4.
    pub hr_size: (usize, usize),
    /// Largest per-step LR motion in each axis.
    pub max_motion: i32,
    #[serde(default)]
    pub degradation: Degradation,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frames: 6,
            hr_size: (128, 128),
            max_motion: 1,
            degradation: Degradation::default(),
        }
    }
}

/// Band-limited noise plus random rectangles and discs on an RGB canvas.
fn canvas(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<[f32; 3]> {
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            let fy = rng.random_range(-0.12..0.12);
            let fx = rng.random_range(-0.12..0.12);
            let phase = rng.random_range(0.0..2.0 * PI);
            let amp = [
                rng.random_range(0.0..0.12),
                rng.random_range(0.0..0.12),
                rng.random_range(0.0..0.12),
            ];
            (fy, fx, phase, amp)
        })
        .collect();
    let base = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    let mut px = vec![[0.0f32; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = base;
            for (fy, fx, ph, amp) in &waves {
                let s = (2.0 * PI * (fy * y as f64 + fx * x as f64) + ph).sin();
                for k in 0..3 {
                    v[k] += amp[k] * s;
                }
            }
            px[y * w + x] = v.map(|c| c as f32);
        }
    }
    let shapes = (h * w / 400).clamp(4, 200);
    for _ in 0..shapes {
        let color = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let cy = rng.random_range(0..h) as f64;
        let cx = rng.random_range(0..w) as f64;
        let ry = rng.random_range(2.0..(h as f64 / 6.0).max(3.0));
        let rx = rng.random_range(2.0..(w as f64 / 6.0).max(3.0));
        let disc = rng.random_bool(0.5);
        let y0 = (cy - ry).max(0.0) as usize;
        let y1 = ((cy + ry).ceil() as usize).min(h);
        let x0 = (cx - rx).max(0.0) as usize;
        let x1 = ((cx + rx).ceil() as usize).min(w);
        for y in y0..y1 {
            for x in x0..x1 {
                let inside = !disc || ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0;
                if inside {
                    px[y * w + x] = color;
                }
            }
        }
    }
    px.iter_mut().for_each(|p| *p = p.map(|c| c.clamp(0.0, 1.0)));
    px
}

/// HR frames of a translating scene and its per-step LR motion.
///
/// Motion is an integer number of LR pixels per step, so HR content moves by
/// multiples of 4 and the BD-degraded LR frames are exact translations of
/// each other away from the borders.
pub fn synth_sequence(seed: u64, cfg: &SynthConfig) -> Result<Sequence> {
    let (h, w) = cfg.hr_size;
    if h % SCALE != 0 || w % SCALE != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("HR size {h}x{w} not divisible by {SCALE}")));
    }
    if cfg.frames == 0 {
        return Err(Error::Config("a clip needs at least one frame".into()));
    }
    if cfg.max_motion < 0 {
        return Err(Error::Config(format!("max_motion {} is negative", cfg.max_motion)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cfg.max_motion;
    let motion: Vec<(i32, i32)> = (1..cfg.frames)
        .map(|_| (rng.random_range(-m..=m), rng.random_range(-m..=m)))
        .collect();
    let margin = SCALE * m as usize * (cfg.frames - 1);
    let (ch, cw) = (h + 2 * margin, w + 2 * margin);
    let px = canvas(&mut rng, ch, cw);
    let mut origin = (margin as isize, margin as isize);
    let mut hr = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        if t > 0 {
            let (dy, dx) = motion[t - 1];
            origin.0 -= SCALE as isize * dy as isize;
            origin.1 -= SCALE as isize * dx as isize;
        }
        let mut f = Tensor::zeros(Shape::new(1, 3, h, w));
        for k in 0..3 {
            let plane = f.plane_mut(0, k);
            for y in 0..h {
                for x in 0..w {
                    let sy = (origin.0 + y as isize) as usize;
                    let sx = (origin.1 + x as isize) as usize;
                    plane[y * w + x] = px[sy * cw + sx][k];
                }
            }
        }
        hr.push(f);
    }
    let lr = hr
        .iter()
        .map(|f| degrade(f, cfg.degradation))
        .collect::<Result<Vec<_>>>()?;
    Sequence::new(lr, Some(hr), motion)
}

/// Deterministic pool of clips; clip `i` uses seed `seed * 1_000_003 + i`.
pub fn synth_pool(seed: u64, count: usize, cfg: &SynthConfig) -> Result<Vec<Sequence>> {
    (0..count)
        .map(|i| synth_sequence(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), cfg))
        .collect()
}

fn to_rgb8(t: &Tensor) -> image::RgbImage {
    let (h, w) = (t.shape().h(), t.shape().w());
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (t.at(0, c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

fn from_rgb8(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p.0[c] as f32 / 255.0);
        }
    }
    t
}

pub fn save_png(t: &Tensor, path: &Path) -> Result<()> {
    if t.shape().c() != 3 || t.shape().n() != 1 {
        return Err(Error::shape("save_png", format!("expected 1x3xHxW, found {}", t.shape())));
    }
    to_rgb8(t).save(path)?;
    Ok(())
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    Ok(from_rgb8(&image::open(path)?.to_rgb8()))
}

const MOTION_FILE: &str = "motion.txt";

fn write_frames(frames: &[Tensor], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        save_png(f, &dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}

fn read_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_png(p)).collect()
}

/// Writes `lr/NNNNN.png`, `hr/NNNNN.png` when targets exist, and `motion.txt`
/// with one `dy dx` line per step.
pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    write_frames(&seq.frames, &dir.join("lr"))?;
    if let Some(hr) = &seq.hr {
        write_frames(hr, &dir.join("hr"))?;
    }
    let text: String = seq.motion.iter().map(|(dy, dx)| format!("{dy} {dx}\n")).collect();
    let p = dir.join(MOTION_FILE);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// Reads a sequence directory. A directory of bare PNGs is read as LR frames.
/// Without `motion.txt` the motion is zero.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let lr_dir = dir.join("lr");
    let frames = if lr_dir.is_dir() { read_frames(&lr_dir)? } else { read_frames(dir)? };
    if frames.is_empty() {
        return Err(Error::Config(format!("no PNG frames in {}", dir.display())));
    }
    let hr_dir = dir.join("hr");
    let hr = if hr_dir.is_dir() { Some(read_frames(&hr_dir)?) } else { None };
    let mpath = dir.join(MOTION_FILE);
    let motion = if mpath.exists() {
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                let v: Vec<i32> = l
                    .split_whitespace()
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Parse {
                        path: mpath.clone(),
                        detail: format!("line {}: {e}", i + 1),
                    })?;
                match v[..] {
                    [dy, dx] => Ok((dy, dx)),
                    _ => Err(Error::Parse {
                        path: mpath.clone(),
                        detail: format!("line {}: expected `dy dx`", i + 1),
                    }),
                }
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![(0, 0); frames.len() - 1]
    };
    Sequence::new(frames, hr, motion)
}

#[cfg(test)]
mod tests;
