//! Directory checkpoints: `manifest.txt`, `weights.bin`, `network.json` and,
//! when present, `scaling.json`.
//!
//! Manifest records are `name dtype shape offset length` with `shape` written
//! as `AxBxCxD`, offsets and lengths in bytes, sorted by name.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{NetworkSpec, Weights};
use crate::error::{Error, Result};
use crate::regularizer::ScalingState;
use crate::tensor::{KernelTensor, Shape, Tensor};

const MANIFEST: &str = "manifest.txt";
const BLOB: &str = "weights.bin";
const NETWORK: &str = "network.json";
const SCALING: &str = "scaling.json";
const GAMMA_PREFIX: &str = "gamma/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub weights: Weights,
    pub scaling: Option<ScalingState>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

impl ManifestEntry {
    fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

fn collect_tensors(weights: &Weights, scaling: Option<&ScalingState>) -> BTreeMap<String, (Vec<usize>, Vec<f32>)> {
    let mut out = BTreeMap::new();
    for (id, k) in weights.iter() {
        out.insert(
            format!("{id}.weight"),
            (k.weight.shape().0.to_vec(), k.weight.data().to_vec()),
        );
        if let Some(b) = &k.bias {
            out.insert(format!("{id}.bias"), (vec![b.len()], b.clone()));
        }
    }
    if let Some(s) = scaling {
        for (site, g) in &s.gammas {
            out.insert(format!("{GAMMA_PREFIX}{site}"), (vec![g.len()], g.clone()));
        }
    }
    out
}

pub fn save_checkpoint(
    spec: &NetworkSpec,
    weights: &Weights,
    scaling: Option<&ScalingState>,
    dir: &Path,
) -> Result<()> {
    spec.ensure_valid()?;
    weights.check_against(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = collect_tensors(weights, scaling);
    let mut manifest = String::new();
    let mut blob = Vec::new();
    for (name, (dims, data)) in &tensors {
        let shape = dims
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let length = data.len() * 4;
        writeln!(manifest, "{name} f32 {shape} {} {length}", blob.len()).unwrap();
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write(MANIFEST, manifest.as_bytes())?;
    write(BLOB, &blob)?;
    write(NETWORK, spec.to_json().as_bytes())?;
    let scaling_path = dir.join(SCALING);
    match scaling {
        Some(s) => write(SCALING, s.metadata_json().as_bytes())?,
        None if scaling_path.exists() => {
            fs::remove_file(&scaling_path).map_err(|e| Error::io(&scaling_path, e))?
        }
        None => {}
    }
    Ok(())
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse {
            path: path.to_path_buf(),
            detail: format!("line {}: {detail}", lineno + 1),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, shape, offset, length] = fields[..] else {
            return Err(bad(format!("expected 5 fields, found {}", fields.len())));
        };
        if dtype != "f32" {
            return Err(bad(format!("tensor {name}: unsupported dtype {dtype}")));
        }
        let dims = shape
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<Vec<usize>, _>>()
            .map_err(|_| bad(format!("tensor {name}: bad shape {shape}")))?;
        let offset = offset
            .parse()
            .map_err(|_| bad(format!("tensor {name}: bad offset {offset}")))?;
        let length = length
            .parse()
            .map_err(|_| bad(format!("tensor {name}: bad length {length}")))?;
        let entry = ManifestEntry {
            name: name.to_string(),
            dims,
            offset,
            length,
        };
        if entry.numel() * 4 != entry.length {
            return Err(Error::Checkpoint {
                tensor: entry.name,
                detail: format!("length {length} does not match shape {shape}"),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let network_path = dir.join(NETWORK);
    let spec_text = String::from_utf8(read(NETWORK)?).map_err(|e| Error::Parse {
        path: network_path.clone(),
        detail: e.to_string(),
    })?;
    let spec = NetworkSpec::from_json(&spec_text).map_err(|e| Error::Parse {
        path: network_path,
        detail: e.to_string(),
    })?;
    spec.ensure_valid()?;

    let manifest_path = dir.join(MANIFEST);
    let manifest_text = String::from_utf8(read(MANIFEST)?).map_err(|e| Error::Parse {
        path: manifest_path.clone(),
        detail: e.to_string(),
    })?;
    let entries = parse_manifest(&manifest_text, &manifest_path)?;
    let blob = read(BLOB)?;

    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for e in entries {
        let end = e.offset.checked_add(e.length).filter(|&end| end <= blob.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint {
                tensor: e.name,
                detail: format!(
                    "blob truncated: needs bytes {}..{} but weights.bin has {}",
                    e.offset,
                    e.offset + e.length,
                    blob.len()
                ),
            });
        };
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if tensors.insert(e.name.clone(), (e.dims, data)).is_some() {
            return Err(Error::Checkpoint {
                tensor: e.name,
                detail: "duplicate manifest entry".into(),
            });
        }
    }

    let mut weights = Weights::default();
    for layer in spec.conv_layers() {
        let x = layer.extents();
        let wname = format!("{}.weight", layer.id);
        let (dims, data) = tensors.remove(&wname).ok_or_else(|| Error::Checkpoint {
            tensor: wname.clone(),
            detail: "missing from manifest".into(),
        })?;
        let expect = vec![x.c_out, x.c_in, x.k_h, x.k_w];
        if dims != expect {
            return Err(Error::Checkpoint {
                tensor: wname,
                detail: format!("manifest shape {dims:?} but network expects {expect:?}"),
            });
        }
        let weight = Tensor::new(Shape::new(x.c_out, x.c_in, x.k_h, x.k_w), data)?;
        let bname = format!("{}.bias", layer.id);
        let bias = match (x.bias, tensors.remove(&bname)) {
            (true, Some((dims, data))) if dims == [x.c_out] => Some(data),
            (true, Some((dims, _))) => {
                return Err(Error::Checkpoint {
                    tensor: bname,
                    detail: format!("manifest shape {dims:?} but network expects [{}]", x.c_out),
                })
            }
            (true, None) => {
                return Err(Error::Checkpoint {
                    tensor: bname,
                    detail: "missing from manifest".into(),
                })
            }
            (false, Some(_)) => {
                return Err(Error::Checkpoint {
                    tensor: bname,
                    detail: "network declares no bias".into(),
                })
            }
            (false, None) => None,
        };
        weights.insert(layer.id.clone(), KernelTensor::new(weight, bias)?);
    }

    let scaling_path = dir.join(SCALING);
    let scaling = if scaling_path.exists() {
        let text = fs::read_to_string(&scaling_path).map_err(|e| Error::io(&scaling_path, e))?;
        let mut state = ScalingState::from_metadata_json(&text).map_err(|e| Error::Parse {
            path: scaling_path.clone(),
            detail: e.to_string(),
        })?;
        let sites: Vec<String> = state.unimportant.keys().cloned().collect();
        let gamma_names: Vec<String> = tensors
            .keys()
            .filter(|k| k.starts_with(GAMMA_PREFIX))
            .cloned()
            .collect();
        for name in gamma_names {
            let (dims, data) = tensors.remove(&name).expect("key listed above");
            if dims.len() != 1 {
                return Err(Error::Checkpoint {
                    tensor: name,
                    detail: "scaling factors must be 1-D".into(),
                });
            }
            state.gammas.insert(name[GAMMA_PREFIX.len()..].to_string(), data);
        }
        if let Some(site) = sites.iter().find(|s| !state.gammas.contains_key(*s)) {
            return Err(Error::Checkpoint {
                tensor: format!("{GAMMA_PREFIX}{site}"),
                detail: "missing from manifest".into(),
            });
        }
        state.check()?;
        Some(state)
    } else {
        None
    };

    if let Some(name) = tensors.keys().next() {
        return Err(Error::Checkpoint {
            tensor: name.clone(),
            detail: "manifest entry not described by the network".into(),
        });
    }
    Ok(Checkpoint {
        spec,
        weights,
        scaling,
    })
}
