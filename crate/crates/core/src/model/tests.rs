use super::*;
use crate::graph::{instantiate, NetworkConfig};
use crate::regularizer::inject_scaling;
use crate::tensor::kernels;

fn small() -> NetworkSpec {
    NetworkConfig {
        trunk_width: 8,
        blocks: 2,
        ..NetworkConfig::toy()
    }
    .build()
}

fn zeroed(w: &Weights, keep: impl Fn(&str) -> bool) -> Weights {
    let mut out = w.clone();
    for (id, k) in out.0.iter_mut() {
        if !keep(id) {
            k.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            if let Some(b) = &mut k.bias {
                b.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    out
}

#[test]
fn zero_weights_give_zero_states() {
    let spec = small();
    let w = zeroed(&instantiate(&spec, 0), |_| false);
    let seq = Sequence::random(1, 4, 5, 6, 1);
    let (_, trace) = run_bidirectional(&spec, &w, None, &seq).unwrap();
    for h in trace.forward.iter().chain(&trace.backward) {
        assert_eq!(h.abs_sum(), 0.0);
    }
}

#[test]
fn single_frame_matches_feed_forward_trunk() {
    let spec = small();
    let w = instantiate(&spec, 3);
    let seq = Sequence::random(2, 1, 6, 6, 0);
    let (sr, trace) = run_bidirectional(&spec, &w, None, &seq).unwrap();
    assert_eq!(sr[0].shape(), Shape::new(1, 3, 24, 24));
    let zero = Tensor::zeros(Shape::new(1, 8, 6, 6));
    let h = run_forward_cell(&spec, &w, &seq.frames[0], &zero, (0, 0)).unwrap();
    assert!(h.bitwise_eq(&trace.forward[0]));
    assert_eq!(trace.backward.len(), 1);
}

#[test]
fn forward_cell_is_shift_equivariant_in_interior() {
    let spec = small();
    let w = instantiate(&spec, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let frame = Tensor::uniform(Shape::new(1, 3, 12, 12), 0.0, 1.0, &mut rng);
    let prev = Tensor::uniform(Shape::new(1, 8, 12, 12), -1.0, 1.0, &mut rng);
    let h = run_forward_cell(&spec, &w, &frame, &prev, (0, 0)).unwrap();
    let fs = kernels::shift(&frame, 1, 0);
    let ps = kernels::shift(&prev, 1, 0);
    let hs = run_forward_cell(&spec, &w, &fs, &ps, (0, 0)).unwrap();
    let expect = kernels::shift(&h, 1, 0);
    // Receptive field: entry conv + 2 blocks of two 3x3 convs = radius 5.
    let margin = 6;
    for c in 0..8 {
        for y in margin..12 - margin {
            for x in margin..12 - margin {
                assert!((hs.at(0, c, y, x) - expect.at(0, c, y, x)).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn skip_path_isolation() {
    let spec = small();
    let w = zeroed(&instantiate(&spec, 0), |_| false);
    let seq = Sequence::random(3, 2, 5, 5, 1);
    let (sr, _) = run_bidirectional(&spec, &w, None, &seq).unwrap();
    for (s, f) in sr.iter().zip(&seq.frames) {
        let oracle = kernels::resize_bilinear(f, 4).unwrap();
        assert!(s.bitwise_eq(&oracle));
    }
}

#[test]
fn unidirectional_is_causal() {
    let spec = NetworkConfig {
        bidirectional: false,
        ..NetworkConfig::toy()
    }
    .build();
    let w = instantiate(&spec, 5);
    let seq = Sequence::random(4, 4, 6, 6, 1);
    let (sr_a, _) = run_bidirectional(&spec, &w, None, &seq).unwrap();
    let mut perturbed = seq.clone();
    perturbed.frames[2] = perturbed.frames[2].map(|v| v + 0.5);
    let (sr_b, _) = run_bidirectional(&spec, &w, None, &perturbed).unwrap();
    assert!(sr_a[0].bitwise_eq(&sr_b[0]));
    assert!(sr_a[1].bitwise_eq(&sr_b[1]));
    assert!(!sr_a[2].bitwise_eq(&sr_b[2]));
}

#[test]
fn all_ones_gamma_preserves_output() {
    let spec = small();
    let w = instantiate(&spec, 6);
    let s = inject_scaling(&spec).unwrap();
    let seq = Sequence::random(5, 3, 5, 6, 1);
    let (a, ta) = run_bidirectional(&spec, &w, None, &seq).unwrap();
    let (b, tb) = run_bidirectional(&spec, &w, Some(&s), &seq).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)));
    assert_eq!(ta, tb);
}

fn record_head(spec: &NetworkSpec, w: &Weights, s: &ScalingState, upto: &str) -> Tensor {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, w, Some(s), Trainable::NONE);
    let runner = Runner { spec, bound: &bound };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.constant(Tensor::uniform(Shape::new(1, 16, 4, 4), -1.0, 1.0, &mut rng));
    let layer = spec.upsampler.iter().find(|l| l.id == upto).unwrap();
    let y = runner.conv(&mut tape, &spec.upsampler[0], x).unwrap();
    let y = tape.leaky_relu(y, 0.1);
    let y = runner.conv(&mut tape, layer, y).unwrap();
    let y = runner.group_gamma(&mut tape, &layer.group_site(), y).unwrap();
    tape.value(y).clone()
}

#[test]
fn zero_shuffle_gamma_silences_four_channels() {
    let spec = small();
    let w = instantiate(&spec, 7);
    let mut s = inject_scaling(&spec).unwrap();
    s.gammas.get_mut("up.upconv1.groups").unwrap()[2] = 0.0;
    let y = record_head(&spec, &w, &s, "up.upconv1");
    for c in 0..y.shape().c() {
        let zero = y.plane(0, c).iter().all(|&v| v == 0.0);
        assert_eq!(zero, (8..12).contains(&c), "channel {c}");
    }
}

#[test]
fn zero_write_gamma_silences_channel_including_bias() {
    let spec = small();
    let mut w = instantiate(&spec, 8);
    w.0.get_mut("fwd.b0.conv2").unwrap().bias.as_mut().unwrap()[3] = 0.7;
    let mut s = inject_scaling(&spec).unwrap();
    s.gammas.get_mut("fwd.b0.conv2.out").unwrap()[3] = 0.0;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &w, Some(&s), Trainable::NONE);
    let runner = Runner { spec: &spec, bound: &bound };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trunk = tape.constant(Tensor::uniform(Shape::new(1, 8, 5, 5), -1.0, 1.0, &mut rng));
    let out = runner.block(&mut tape, &spec.forward_cell.blocks[0], trunk).unwrap();
    assert_eq!(tape.value(out).plane(0, 3), tape.value(trunk).plane(0, 3));
}

#[test]
fn hidden_error_profile_behaviour() {
    let spec = small();
    let w = instantiate(&spec, 9);
    let seq = Sequence::random(6, 5, 6, 6, 1);
    let (_, full) = run_bidirectional(&spec, &w, None, &seq).unwrap();
    let (f, b) = hidden_error_profile(&full, &full).unwrap();
    assert!(f.iter().chain(&b).all(|&e| e == 0.0));
    let mut w2 = w.clone();
    w2.0.get_mut("fwd.b1.conv1").unwrap().weight.data_mut()[0] += 1e-2;
    let (_, pert) = run_bidirectional(&spec, &w2, None, &seq).unwrap();
    let (f, _) = hidden_error_profile(&full, &pert).unwrap();
    assert!(f.iter().all(|&e| e > 0.0));
    let short = HiddenTrace {
        forward: full.forward[..2].to_vec(),
        backward: vec![],
    };
    assert!(hidden_error_profile(&full, &short).is_err());
}

#[test]
fn sequence_validation() {
    let f = Tensor::zeros(Shape::new(1, 3, 4, 4));
    assert!(Sequence::new(vec![f.clone(), f.clone()], None, vec![]).is_err());
    assert!(Sequence::new(vec![], None, vec![]).is_err());
    assert!(Sequence::new(vec![f.clone(), Tensor::zeros(Shape::new(1, 3, 4, 5))], None, vec![(0, 0)]).is_err());
    assert!(Sequence::new(vec![f.clone(), f], None, vec![(1, 0)]).is_ok());
}

#[test]
fn spearman_oracle() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    // Ties: ranks (1.5, 1.5, 3) vs (1, 2, 3) => rho = 0.866...
    let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
    assert!((r - 0.8660254037844386).abs() < 1e-12);
}

#[test]
fn frame_channel_mismatch_is_error() {
    let spec = small();
    let w = instantiate(&spec, 0);
    let seq = Sequence::new(vec![Tensor::zeros(Shape::new(1, 1, 4, 4))], None, vec![]).unwrap();
    assert!(run_bidirectional(&spec, &w, None, &seq).is_err());
}
