//! Prune a toy network with residual skip connections, then check that the
//! compiled network reproduces the masked one.

use vsrprune::graph::{instantiate, NetworkConfig};
use vsrprune::model::{run_bidirectional, Sequence};
use vsrprune::regularizer::inject_scaling;
use vsrprune::rewrite::compile;
use vsrprune::scoring::{score_network, select, Policy, ScoreOptions};

fn main() -> vsrprune::Result<()> {
    let spec = NetworkConfig::toy().build();
    let weights = instantiate(&spec, 0);
    let scores = score_network(&spec, &weights, ScoreOptions::default())?;
    let plan = select(&scores, 0.5, Policy::MIN_GLOBAL, 0)?;

    let mut scaling = inject_scaling(&spec)?;
    scaling.apply_plan(&plan)?;
    let compiled = compile(&spec, &weights, Some(&scaling), &plan)?;

    let clip = Sequence::random(1, 5, 8, 8, 1);
    let (masked, _) = run_bidirectional(&spec, &weights, Some(&scaling.masked()), &clip)?;
    let (small, _) = run_bidirectional(&compiled.spec, &compiled.weights, None, &clip)?;
    let diff = masked.iter().zip(&small).map(|(a, b)| a.max_abs_diff(b)).collect::<vsrprune::Result<Vec<_>>>()?;

    println!("pruned {} units", plan.pruned.len());
    println!("FLOPs {} -> {}", compiled.before.macs(), compiled.after.macs());
    println!("max |masked - compiled| = {:.2e}", diff.into_iter().fold(0.0f32, f32::max));
    Ok(())
}
