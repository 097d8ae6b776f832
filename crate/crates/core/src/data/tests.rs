use super::*;
use crate::tensor::kernels;

fn plane_tensor(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
    let mut t = Tensor::zeros(Shape::new(1, 1, h, w));
    for y in 0..h {
        for x in 0..w {
            t.set(0, 0, y, x, f(y, x));
        }
    }
    t
}

#[test]
fn gaussian_taps_are_normalized_and_symmetric() {
    let g = gaussian_taps(BD_SIGMA, BD_TAPS);
    assert_eq!(g.len(), 13);
    assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for i in 0..13 {
        assert_eq!(g[i], g[12 - i]);
    }
    // The unnormalized truncated mass covers nearly all of the continuous Gaussian.
    let raw: f64 = (-6..=6).map(|i: i32| (-(i * i) as f64 / (2.0 * 1.6 * 1.6)).exp()).sum();
    assert!((raw / (1.6 * (2.0 * PI).sqrt()) - 1.0).abs() < 1e-4);
}

#[test]
fn bd_impulse_gives_sampled_taps() {
    let g = gaussian_taps(BD_SIGMA, BD_TAPS);
    let (h, w) = (32, 32);
    let mut phase_sum = 0.0;
    for py in 0..4 {
        for px in 0..4 {
            let (y0, x0) = (14 + py, 14 + px);
            let img = plane_tensor(h, w, |y, x| if (y, x) == (y0, x0) { 1.0 } else { 0.0 });
            let lr = degrade(&img, Degradation::default()).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    let dy = 4 * i as isize - y0 as isize + 6;
                    let dx = 4 * j as isize - x0 as isize + 6;
                    let expect = if (0..13).contains(&dy) && (0..13).contains(&dx) {
                        g[dy as usize] * g[dx as usize]
                    } else {
                        0.0
                    };
                    assert!((lr.at(0, 0, i, j) as f64 - expect).abs() < 1e-7);
                }
            }
            phase_sum += lr.sum();
        }
    }
    // Each LR pixel sees one sampling phase, so the taps add to 1 across the 16 phases.
    assert!((phase_sum - 1.0).abs() < 1e-6, "{phase_sum}");
}

#[test]
fn bd_constant_is_preserved_with_reflection() {
    let img = Tensor::full(Shape::new(1, 3, 16, 20), 0.37);
    let lr = degrade(&img, Degradation::default()).unwrap();
    assert_eq!(lr.shape(), Shape::new(1, 3, 4, 5));
    assert!(lr.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
}

#[test]
fn bi_reproduces_linear_ramp_in_interior() {
    let (h, w) = (48, 48);
    let img = plane_tensor(h, w, |y, x| 0.01 * x as f32 - 0.02 * y as f32 + 0.3);
    let lr = degrade(&img, Degradation::bi()).unwrap();
    for i in 3..9 {
        for j in 3..9 {
            let (cy, cx) = (4.0 * i as f64 + 1.5, 4.0 * j as f64 + 1.5);
            let expect = 0.01 * cx - 0.02 * cy + 0.3;
            assert!((lr.at(0, 0, i, j) as f64 - expect).abs() < 1e-5);
        }
    }
}

#[test]
fn cubic_kernel_values() {
    assert_eq!(cubic(0.0, -0.5), 1.0);
    assert_eq!(cubic(1.0, -0.5), 0.0);
    assert_eq!(cubic(2.0, -0.5), 0.0);
    assert!((cubic(0.5, -0.5) - 0.5625).abs() < 1e-12);
    assert!((cubic(1.5, -0.5) + 0.0625).abs() < 1e-12);
}

#[test]
fn bd_is_translation_consistent() {
    let seq = synth_sequence(7, &SynthConfig { frames: 1, hr_size: (64, 64), max_motion: 0, ..Default::default() }).unwrap();
    let hr = &seq.hr.as_ref().unwrap()[0];
    let shifted_hr = kernels::shift(hr, 4, -8);
    let a = degrade(&shifted_hr, Degradation::default()).unwrap();
    let b = kernels::shift(&degrade(hr, Degradation::default()).unwrap(), 1, -2);
    let m = 3;
    for c in 0..3 {
        for y in m..16 - m {
            for x in m..16 - m - 2 {
                assert!((a.at(0, c, y, x) - b.at(0, c, y, x)).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn degrade_rejects_bad_sizes() {
    assert!(degrade(&Tensor::zeros(Shape::new(1, 3, 10, 12)), Degradation::default()).is_err());
    let bad = Degradation::Bd { sigma: 1.6, taps: 12 };
    assert!(degrade(&Tensor::zeros(Shape::new(1, 3, 8, 8)), bad).is_err());
}

#[test]
fn psnr_formula_and_symmetry() {
    let a = Tensor::zeros(Shape::new(1, 3, 4, 4));
    let b = Tensor::full(Shape::new(1, 3, 4, 4), 0.1);
    let p = psnr(&a, &b, 1.0).unwrap();
    assert!((p - 20.0).abs() < 1e-4);
    assert_eq!(p, psnr(&b, &a, 1.0).unwrap());
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
    assert!(psnr(&a, &b, 0.0).is_err());
    assert!(psnr(&a, &Tensor::zeros(Shape::new(1, 3, 4, 5)), 1.0).is_err());
}

#[test]
fn ssim_identity_and_degradation() {
    let seq = synth_sequence(3, &SynthConfig { frames: 1, hr_size: (32, 32), max_motion: 0, ..Default::default() }).unwrap();
    let a = &seq.hr.as_ref().unwrap()[0];
    assert!((ssim(a, a).unwrap() - 1.0).abs() < 1e-12);
    let noisy = a.map(|v| v * 0.5 + 0.25);
    let s = ssim(a, &noisy).unwrap();
    assert!(s < 1.0 && s > 0.0);
    assert!((s - ssim(&noisy, a).unwrap()).abs() < 1e-12);
    assert!(ssim(&Tensor::zeros(Shape::new(1, 1, 8, 8)), &Tensor::zeros(Shape::new(1, 1, 8, 8))).is_err());
}

#[test]
fn ssim_matches_direct_formula_on_constant_images() {
    // Constant images: variances vanish, SSIM reduces to the luminance term.
    let a = Tensor::full(Shape::new(1, 1, 11, 11), 0.2);
    let b = Tensor::full(Shape::new(1, 1, 11, 11), 0.6);
    let c1 = 1e-4;
    let expect = (2.0 * 0.2 * 0.6 + c1) / (0.04 + 0.36 + c1);
    assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-6);
}

fn best_shift(a: &Tensor, b: &Tensor, range: isize) -> (isize, isize) {
    // Normalized cross-correlation over the central crop.
    let (h, w) = (a.shape().h() as isize, a.shape().w() as isize);
    let m = range + 1;
    let mut best = (f64::MIN, (0, 0));
    for dy in -range..=range {
        for dx in -range..=range {
            let mut s = 0.0;
            for c in 0..3 {
                for y in m..h - m {
                    for x in m..w - m {
                        let va = a.at(0, c, (y - dy) as usize, (x - dx) as usize) as f64;
                        let vb = b.at(0, c, y as usize, x as usize) as f64;
                        s -= (va - vb).powi(2);
                    }
                }
            }
            if s > best.0 {
                best = (s, (dy, dx));
            }
        }
    }
    best.1
}

#[test]
fn synthetic_motion_matches_declared() {
    let cfg = SynthConfig { frames: 4, hr_size: (48, 48), max_motion: 1, ..Default::default() };
    let seq = synth_sequence(11, &cfg).unwrap();
    let hr = seq.hr.as_ref().unwrap();
    for t in 0..3 {
        let (dy, dx) = seq.motion[t];
        assert_eq!(best_shift(&hr[t], &hr[t + 1], 4), (4 * dy as isize, 4 * dx as isize));
        // Exact: HR content is a pure translation.
        let expect = kernels::shift(&hr[t], 4 * dy, 4 * dx);
        for y in 4..44 {
            for x in 4..44 {
                assert_eq!(expect.at(0, 0, y, x), hr[t + 1].at(0, 0, y, x));
            }
        }
    }
}

#[test]
fn synth_is_deterministic_and_static_without_motion() {
    let cfg = SynthConfig { frames: 3, hr_size: (32, 32), max_motion: 0, ..Default::default() };
    let a = synth_sequence(5, &cfg).unwrap();
    let b = synth_sequence(5, &cfg).unwrap();
    assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.bitwise_eq(y)));
    assert!(a.frames.iter().all(|f| f.bitwise_eq(&a.frames[0])));
    assert_eq!(a.lr_shape(), Shape::new(1, 3, 8, 8));
    let c = synth_sequence(6, &cfg).unwrap();
    assert!(!c.frames[0].bitwise_eq(&a.frames[0]));
    assert!(synth_sequence(0, &SynthConfig { hr_size: (30, 32), ..cfg.clone() }).is_err());
    assert!(synth_sequence(0, &SynthConfig { frames: 0, ..cfg }).is_err());
}

#[test]
fn sequence_directory_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { frames: 3, hr_size: (16, 16), max_motion: 1, ..Default::default() };
    let seq = synth_sequence(2, &cfg).unwrap();
    write_sequence(&seq, dir.path()).unwrap();
    let back = read_sequence(dir.path()).unwrap();
    assert_eq!(back.motion, seq.motion);
    assert_eq!(back.len(), 3);
    for (a, b) in seq.frames.iter().zip(&back.frames) {
        assert!(a.map(|v| v.clamp(0.0, 1.0)).max_abs_diff(b).unwrap() <= 0.5 / 255.0 + 1e-6);
    }
    assert!(back.hr.is_some());

    let bare = tempfile::tempdir().unwrap();
    for (i, f) in seq.frames.iter().enumerate() {
        save_png(f, &bare.path().join(format!("{i:03}.png"))).unwrap();
    }
    let b = read_sequence(bare.path()).unwrap();
    assert_eq!(b.motion, vec![(0, 0); 2]);
    assert!(b.hr.is_none());

    std::fs::write(dir.path().join("motion.txt"), "1 x\n0 0\n").unwrap();
    let err = read_sequence(dir.path()).unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");
    assert!(read_sequence(tempfile::tempdir().unwrap().path()).is_err());
}
