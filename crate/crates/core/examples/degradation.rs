//! Synthesize a clip, degrade it both ways and score plain pixel replication
//! against the ground truth.

use vsrprune::data::{degrade, psnr, ssim, synth_sequence, Degradation, SynthConfig, SCALE};
use vsrprune::tensor::{Shape, Tensor};

fn replicate(lr: &Tensor) -> Tensor {
    let s = lr.shape();
    let mut hr = Tensor::zeros(Shape::new(s.n(), s.c(), s.h() * SCALE, s.w() * SCALE));
    for c in 0..s.c() {
        for y in 0..s.h() * SCALE {
            for x in 0..s.w() * SCALE {
                hr.set(0, c, y, x, lr.at(0, c, y / SCALE, x / SCALE));
            }
        }
    }
    hr
}

fn main() -> vsrprune::Result<()> {
    let clip = synth_sequence(0, &SynthConfig::default())?;
    let hr = &clip.hr.as_ref().expect("synthetic clips carry ground truth")[0];
    for (name, d) in [("BI", Degradation::bi()), ("BD", Degradation::default())] {
        let up = replicate(&degrade(hr, d)?);
        println!("{name}: replication PSNR {:.2} dB, SSIM {:.3}", psnr(&up, hr, 1.0)?, ssim(&up, hr)?);
    }
    Ok(())
}
