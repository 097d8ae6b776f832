use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NetworkSpec;

/// Sample mean and standard deviation (n - 1 denominator; 0 for one sample).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub key: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

/// Groups `rows` by `key` and reports mean and std of `value`, keys in sorted order.
pub fn summarize<T>(rows: &[T], key: impl Fn(&T) -> String, value: impl Fn(&T) -> f64) -> Vec<Summary> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(value(r));
    }
    groups
        .into_iter()
        .map(|(key, xs)| {
            let (mean, std) = mean_std(&xs);
            Summary { key, n: xs.len(), mean, std }
        })
        .collect()
}

pub fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvRatio {
    pub layer: String,
    pub filters_before: usize,
    pub filters_after: usize,
    pub ratio: f64,
}

/// Fraction of output filters removed from each conv layer.
pub fn conv_ratios(before: &NetworkSpec, after: &NetworkSpec) -> Vec<ConvRatio> {
    before
        .conv_layers()
        .into_iter()
        .filter_map(|l| {
            let a = after.layer(&l.id)?.conv.as_ref()?.c_out;
            let b = l.extents().c_out;
            Some(ConvRatio {
                layer: l.id.clone(),
                filters_before: b,
                filters_after: a,
                ratio: 1.0 - a as f64 / b as f64,
            })
        })
        .collect()
}

/// Text bar chart of per-layer pruning ratios.
pub fn histogram(ratios: &[ConvRatio]) -> String {
    let width = ratios.iter().map(|r| r.layer.len()).max().unwrap_or(0);
    ratios
        .iter()
        .map(|r| {
            let bar = "#".repeat((r.ratio * 40.0).round() as usize);
            format!("{:<width$} {:>5.1}% {bar}\n", r.layer, 100.0 * r.ratio)
        })
        .collect()
}
