//! Check reverse-mode gradients of a conv + shuffle + Charbonnier graph
//! against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vsrprune::tensor::{grad_check, Shape, Tensor};

fn main() -> vsrprune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
    let w = Tensor::uniform(Shape::new(4, 2, 3, 3), -0.5, 0.5, &mut rng);
    let target = Tensor::uniform(Shape::new(1, 1, 8, 8), 0.0, 1.0, &mut rng);

    let report = grad_check(
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], None, 1, 1)?;
            let up = tape.pixel_shuffle(y, 2)?;
            let t = tape.constant(target.clone());
            tape.charbonnier(up, t, 1e-6)
        },
        &[x, w],
        1e-2,
        1e-3,
    )?;
    println!("passed {} with max relative error {:.2e}", report.passed, report.max_rel_error);
    Ok(())
}
