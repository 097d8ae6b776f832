//! Pretrain, sparsify, prune and fine-tune on the smoke profile.

use vsrprune::experiments::Profile;
use vsrprune::graph::instantiate;
use vsrprune::pipeline::{evaluate, run_stage, Dataset, Model};
use vsrprune::regularizer::inject_scaling;
use vsrprune::scoring::{score_network, select, ScoreOptions};

fn main() -> vsrprune::Result<()> {
    let p = Profile::smoke();
    let data = Dataset::synthetic(&p.data)?;
    let spec = p.network.build();

    let pre = run_stage(&p.pretrain, Model::new(spec.clone(), instantiate(&spec, 0)), &data, None)?.model;
    println!("pretrained: {:.2} dB", evaluate(&pre, &data.val, false)?.psnr);

    let scores = score_network(&pre.spec, &pre.weights, ScoreOptions::default())?;
    let mut model = pre.clone();
    model.scaling = Some(inject_scaling(&model.spec)?);
    model.plan = Some(select(&scores, p.prune.ratio, p.prune.policy, 0)?);
    let sparse = run_stage(&p.sparsify, model, &data, None)?;
    if let Some(g) = sparse.gamma_trajectory.last() {
        println!("selected gamma {:.3}, kept gamma {:.3}", g.mean_gamma_pruned, g.mean_gamma_kept);
    }

    let tuned = run_stage(&p.finetune, sparse.model, &data, Some(&pre))?;
    if let Some(r) = &tuned.rewrite {
        println!("FLOPs {} -> {}", r.before.macs(), r.after.macs());
    }
    println!("fine-tuned: {:.2} dB", evaluate(&tuned.model, &data.val, false)?.psnr);
    Ok(())
}
