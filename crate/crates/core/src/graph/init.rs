use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LayerSpec, NetworkSpec, Weights};
use crate::tensor::{KernelTensor, Shape, Tensor};

/// Down-scaling applied to both convs of every residual block and to the
/// output conv, so a freshly initialized network is close to its skip paths.
const RESIDUAL_INIT_SCALE: f32 = 0.1;

/// Kaiming fan-in initialization, zero biases. Deterministic in `seed`.
pub fn instantiate(spec: &NetworkSpec, seed: u64) -> Weights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Weights::default();
    let mut add = |layer: &LayerSpec, scale: f32, rng: &mut ChaCha8Rng| {
        let e = layer.extents();
        let std = (2.0 / e.fan_in() as f32).sqrt() * scale;
        let w = Tensor::normal(Shape::new(e.c_out, e.c_in, e.k_h, e.k_w), std, rng);
        weights.insert(
            layer.id.clone(),
            KernelTensor {
                weight: w,
                bias: e.bias.then(|| vec![0.0; e.c_out]),
            },
        );
    };
    for cell in spec.cells() {
        add(&cell.entry_conv, 1.0, &mut rng);
        for b in &cell.blocks {
            add(&b.first_conv, RESIDUAL_INIT_SCALE, &mut rng);
            add(&b.second_conv, RESIDUAL_INIT_SCALE, &mut rng);
        }
    }
    let last_conv = spec.upsampler.iter().rev().find(|l| l.kind.is_conv()).map(|l| l.id.clone());
    for layer in spec.upsampler.iter().filter(|l| l.kind.is_conv()) {
        let scale = if Some(&layer.id) == last_conv.as_ref() {
            RESIDUAL_INIT_SCALE
        } else {
            1.0
        };
        add(layer, scale, &mut rng);
    }
    weights
}
