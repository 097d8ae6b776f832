use crate::error::{Error, Result};
use crate::graph::{NetworkConfig, NetworkSpec, Weights};
use crate::rewrite::{compile, RewriteResult};
use crate::scoring::{score_network, select, Policy, PruningPlan, ScoreOptions};

/// Smallest-L1 first-conv filters of every block, ratio `p` per layer. Second
/// convs lose the matching input channels; nothing else is touched.
pub fn l1norm_plan(spec: &NetworkSpec, weights: &Weights, p: f64) -> Result<PruningPlan> {
    let mids: Vec<String> = spec
        .cells()
        .flat_map(|c| c.blocks.iter().map(|b| b.mid_gamma_site.clone()))
        .collect();
    let scores: Vec<_> = score_network(spec, weights, ScoreOptions::default())?
        .into_iter()
        .filter(|s| mids.contains(&s.unit.site()))
        .collect();
    select(&scores, p, Policy::MIN_LOCAL, 0)
}

/// The L1-norm scheme: prune by [`l1norm_plan`] and compile, no sparsity stage.
pub fn baseline_l1norm(spec: &NetworkSpec, weights: &Weights, p: f64) -> Result<RewriteResult> {
    compile(spec, weights, None, &l1norm_plan(spec, weights, p)?)
}

/// Network config with trunk and head widths scaled by `factor`, for
/// training from scratch.
pub fn baseline_lite(cfg: &NetworkConfig, factor: f64) -> Result<NetworkSpec> {
    let scale = |w: usize, what: &str| -> Result<usize> {
        let v = w as f64 * factor;
        let r = v.round();
        if !(factor > 0.0) || (v - r).abs() > 1e-9 || r < 1.0 {
            return Err(Error::Config(format!(
                "width factor {factor} turns {what} width {w} into {v}, not a positive integer"
            )));
        }
        Ok(r as usize)
    };
    let trunk = scale(cfg.trunk_width, "trunk")?;
    let head = scale(cfg.head_width.unwrap_or(cfg.trunk_width), "head")?;
    let lite = NetworkConfig {
        trunk_width: trunk,
        head_width: cfg.head_width.map(|_| head),
        ..cfg.clone()
    };
    let spec = lite.build();
    spec.ensure_valid()?;
    Ok(spec)
}
