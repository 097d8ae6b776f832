//! Removing whole groups of four filters before a 2x pixel shuffle is the same
//! as dropping the matching output channels after it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vsrprune::rewrite::apply_shuffle_rewrite;
use vsrprune::tensor::kernels::{conv2d, pixel_shuffle, ConvGeometry};
use vsrprune::tensor::{KernelTensor, Shape, Tensor};

fn main() -> vsrprune::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let kernel = KernelTensor::new(Tensor::uniform(Shape::new(16, 3, 3, 3), -1.0, 1.0, &mut rng), None)?;
    let x = Tensor::uniform(Shape::new(1, 3, 5, 5), -1.0, 1.0, &mut rng);
    let geo = ConvGeometry { stride: 1, padding: 1 };

    let kept = [0, 2];
    let small = apply_shuffle_rewrite(&kernel, None, &kept)?;
    let a = pixel_shuffle(&conv2d(&x, &small.weight, None, geo)?, 2)?;
    let full = pixel_shuffle(&conv2d(&x, &kernel.weight, None, geo)?, 2)?;

    for (i, &g) in kept.iter().enumerate() {
        let same = a.plane(0, i) == full.plane(0, g);
        println!("output channel {i} equals original channel {g}: {same}");
    }
    Ok(())
}
