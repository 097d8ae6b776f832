use super::*;
use crate::regularizer::inject_scaling;

fn toy() -> NetworkSpec {
    NetworkConfig::toy().build()
}

#[test]
fn toy_spec_is_valid() {
    let spec = toy();
    assert_eq!(spec.validate(), Vec::<String>::new());
    assert_eq!(spec.forward_cell.blocks.len(), 3);
    assert_eq!(spec.trunk_width, 16);
    assert!(spec.is_bidirectional());
}

#[test]
fn unidirectional_and_paper_scale_are_valid() {
    let uni = NetworkConfig {
        bidirectional: false,
        ..NetworkConfig::toy()
    }
    .build();
    assert!(uni.validate().is_empty());
    assert_eq!(uni.upsampler[0].extents().c_in, 16);
    assert!(NetworkConfig::paper_scale().build().validate().is_empty());
}

#[test]
fn upsample_conv_must_divide_by_four() {
    let mut spec = toy();
    let up = spec.upsampler.iter_mut().find(|l| l.id == "up.upconv1").unwrap();
    up.conv.as_mut().unwrap().c_out = 10;
    let v = spec.validate();
    assert!(v.iter().any(|m| m.contains("up.upconv1") && m.contains("not divisible by 4")), "{v:?}");
}

#[test]
fn fusion_width_violation_names_layer() {
    let mut spec = toy();
    spec.upsampler[0].conv.as_mut().unwrap().c_in = 16;
    let v = spec.validate();
    assert!(v.iter().any(|m| m.contains("up.fusion")), "{v:?}");
}

#[test]
fn fusion_never_prunable_and_output_conv_fixed() {
    let mut spec = toy();
    spec.upsampler[0].prunable.output_filters = true;
    let last = spec.upsampler.iter_mut().find(|l| l.id == "up.conv_last").unwrap();
    last.prunable.output_filters = true;
    let v = spec.validate();
    assert!(v.iter().any(|m| m.contains("fusion layer `up.fusion` is never prunable")));
    assert!(v.iter().any(|m| m.contains("up.conv_last")));
}

#[test]
fn index_sets_checked() {
    let mut spec = toy();
    spec.forward_cell.blocks[1].read_index = vec![0, 0, 17];
    let v = spec.validate();
    assert!(v.iter().any(|m| m.contains("repeated")));
    assert!(v.iter().any(|m| m.contains("outside")));
    assert!(v.iter().any(|m| m.contains("first conv C_in")));
}

#[test]
fn duplicate_ids_rejected() {
    let mut spec = toy();
    spec.upsampler[1].id = "up.fusion".into();
    assert!(spec.validate().iter().any(|m| m.contains("duplicate layer id")));
}

#[test]
fn spec_json_roundtrip() {
    let spec = toy();
    assert_eq!(NetworkSpec::from_json(&spec.to_json()).unwrap(), spec);
}

#[test]
fn subnet_classification() {
    let spec = toy();
    assert_eq!(spec.subnet_of("fwd.b0.conv1"), Subnet::Forward);
    assert_eq!(spec.subnet_of("bwd.entry"), Subnet::Backward);
    assert_eq!(spec.subnet_of("up.conv_hr"), Subnet::Upsampler);
}

#[test]
fn instantiate_is_deterministic_and_seeded() {
    let spec = toy();
    let a = instantiate(&spec, 7);
    let b = instantiate(&spec, 7);
    let c = instantiate(&spec, 8);
    assert_eq!(a, b);
    assert_ne!(a.checksum(), c.checksum());
    a.check_against(&spec).unwrap();
}

fn weight_std(w: &Weights, id: &str) -> f64 {
    let k = w.get(id).unwrap();
    let n = k.weight.numel();
    assert!(n >= 10_000);
    let mean = k.weight.sum() / n as f64;
    (k.weight.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
}

#[test]
fn kaiming_std_within_tolerance() {
    let spec = NetworkConfig::paper_scale().build();
    let w = instantiate(&spec, 3);
    let entry = (2.0 / (67.0 * 9.0f64)).sqrt();
    let std = weight_std(&w, "fwd.entry");
    assert!((std / entry - 1.0).abs() < 0.2, "std {std} vs {entry}");
    let block = 0.1 * (2.0 / (64.0 * 9.0f64)).sqrt();
    for id in ["fwd.b4.conv1", "bwd.b9.conv2"] {
        let std = weight_std(&w, id);
        assert!((std / block - 1.0).abs() < 0.2, "{id}: std {std} vs {block}");
    }
}

#[test]
fn checkpoint_roundtrip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy();
    let w = instantiate(&spec, 1);
    save_checkpoint(&spec, &w, None, dir.path()).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.spec, spec);
    assert!(ck.scaling.is_none());
    for (id, k) in w.iter() {
        let l = ck.weights.get(id).unwrap();
        assert!(l.weight.bitwise_eq(&k.weight));
        assert_eq!(
            l.bias.as_ref().map(|b| b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()),
            k.bias.as_ref().map(|b| b.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        );
    }
    let first = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    save_checkpoint(&ck.spec, &ck.weights, None, dir.path()).unwrap();
    let second = std::fs::read_to_string(dir.path().join("manifest.txt")).unwrap();
    assert_eq!(first, second);
    let names: Vec<&str> = first.lines().map(|l| l.split(' ').next().unwrap()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn checkpoint_with_scaling_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy();
    let w = instantiate(&spec, 1);
    let mut s = inject_scaling(&spec).unwrap();
    s.gammas.get_mut("up.upconv2.groups").unwrap()[3] = -0.25;
    s.unimportant.insert("up.upconv2.groups".into(), vec![3, 5]);
    save_checkpoint(&spec, &w, Some(&s), dir.path()).unwrap();
    let ck = load_checkpoint(dir.path()).unwrap();
    assert_eq!(ck.scaling.as_ref(), Some(&s));
    // Saving again without scaling drops it.
    save_checkpoint(&spec, &w, None, dir.path()).unwrap();
    assert!(load_checkpoint(dir.path()).unwrap().scaling.is_none());
}

#[test]
fn truncated_blob_names_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy();
    save_checkpoint(&spec, &instantiate(&spec, 1), None, dir.path()).unwrap();
    let blob = dir.path().join("weights.bin");
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() - 1]).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    match err {
        Error::Checkpoint { tensor, detail } => {
            assert!(!tensor.is_empty());
            assert!(detail.contains("truncated"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_tensor_names_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy();
    save_checkpoint(&spec, &instantiate(&spec, 1), None, dir.path()).unwrap();
    let mpath = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("up.conv_hr.weight ")).collect();
    std::fs::write(&mpath, kept.join("\n")).unwrap();
    match load_checkpoint(dir.path()).unwrap_err() {
        Error::Checkpoint { tensor, .. } => assert_eq!(tensor, "up.conv_hr.weight"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn shape_mismatch_names_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let spec = toy();
    save_checkpoint(&spec, &instantiate(&spec, 1), None, dir.path()).unwrap();
    let mpath = dir.path().join("manifest.txt");
    let text = std::fs::read_to_string(&mpath).unwrap();
    let edited = text.replace("up.conv_last.weight f32 3x16x3x3", "up.conv_last.weight f32 3x16x9x1");
    assert_ne!(edited, text);
    std::fs::write(&mpath, edited).unwrap();
    match load_checkpoint(dir.path()).unwrap_err() {
        Error::Checkpoint { tensor, .. } => assert_eq!(tensor, "up.conv_last.weight"),
        other => panic!("unexpected {other:?}"),
    }
}
