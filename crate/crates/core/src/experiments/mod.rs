//! Multi-seed desk-scale studies: pruning criteria, component ablation,
//! FLOPs sweeps against the baselines and hidden-state error growth.

pub mod plot;
mod profile;
mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::synth_pool;
use crate::error::{Error, Result};
use crate::graph::{instantiate, NetworkSpec, Subnet};
use crate::model::spearman;
use crate::pipeline::{
    baseline_lite, evaluate, final_state_error, l1norm_plan, run_stage, Dataset, MetricRow, Model,
};
use crate::regularizer::{gamma_sites, inject_scaling, SiteRole};
use crate::rewrite::{compile, cost};
use crate::scoring::{score_network, select, Policy, PruningPlan, Score, ScoreOptions, SitePlan};

pub use profile::{ExperimentConfig, Profile, PruneConfig};
pub use report::{conv_ratios, histogram, mean_std, summarize, write_rows, ConvRatio, Summary};

/// One seed's data and pretrained network, shared by every run of that seed.
#[derive(Clone, Debug)]
pub struct Trial {
    pub seed: u64,
    pub profile: Profile,
    pub data: Dataset,
    pub pretrained: Model,
    pub pretrain_log: Vec<MetricRow>,
}

/// Generates the seed's data and runs the pretrain stage.
pub fn prepare(profile: &Profile, seed: u64) -> Result<Trial> {
    let profile = profile.for_seed(seed);
    profile.validate()?;
    let data = Dataset::synthetic(&profile.data)?;
    let spec = profile.network.build();
    spec.ensure_valid()?;
    let init = Model::new(spec.clone(), instantiate(&spec, profile.network.seed));
    let out = run_stage(&profile.pretrain, init, &data, None)?;
    Ok(Trial {
        seed,
        profile,
        data,
        pretrained: out.model,
        pretrain_log: out.log,
    })
}

/// Measured outcome of one pruned and finetuned network.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub psnr: f64,
    /// Mean final hidden-state distance from the pretrained network; none
    /// when the hidden widths differ.
    pub e_t: Option<f64>,
    pub macs: u64,
    pub params: u64,
    pub model: Model,
    pub plan: Option<PruningPlan>,
}

impl Trial {
    /// LR resolution used for cost reports: the validation clip size.
    pub fn resolution(&self) -> (usize, usize) {
        let s = self.data.val[0].lr_shape();
        (s.h(), s.w())
    }

    pub fn scores(&self) -> Result<Vec<Score>> {
        score_network(
            &self.pretrained.spec,
            &self.pretrained.weights,
            ScoreOptions {
                normalize_groups: self.profile.prune.normalize_groups,
            },
        )
    }

    pub fn plan(&self, ratio: f64, policy: Policy) -> Result<PruningPlan> {
        select(&self.scores()?, ratio, policy, self.seed)
    }

    /// MACs of the pretrained network compiled with `plan`, no training.
    pub fn plan_macs(&self, plan: &PruningPlan) -> Result<u64> {
        let r = compile(&self.pretrained.spec, &self.pretrained.weights, None, plan)?;
        Ok(cost(&r.spec, self.resolution()).macs())
    }

    fn measure(&self, model: Model, plan: Option<PruningPlan>) -> Result<RunResult> {
        let psnr = evaluate(&model, &self.data.val, false)?.psnr;
        let width = |m: &Model| m.spec.trunk_width;
        let e_t = if width(&model) == width(&self.pretrained) {
            Some(final_state_error(&model, &self.pretrained, &self.data.val)?)
        } else {
            None
        };
        let c = cost(&model.spec, self.resolution());
        Ok(RunResult {
            psnr,
            e_t,
            macs: c.macs(),
            params: c.params(),
            model,
            plan,
        })
    }

    /// Sparsify toward `plan`, compile, finetune. `tf` switches the temporal loss.
    pub fn run_ssl(&self, plan: &PruningPlan, tf: bool) -> Result<RunResult> {
        let spec = &self.pretrained.spec;
        let model = Model {
            spec: spec.clone(),
            weights: self.pretrained.weights.clone(),
            scaling: Some(inject_scaling(spec)?),
            plan: Some(plan.clone()),
        };
        let sparse = run_stage(&self.profile.sparsify, model, &self.data, None)?;
        let mut ft = self.profile.finetune.clone();
        ft.loss.tf = tf;
        let tuned = run_stage(&ft, sparse.model, &self.data, Some(&self.pretrained))?;
        self.measure(tuned.model, Some(plan.clone()))
    }

    /// L1-norm baseline at ratio `p`: prune first-conv filters and finetune on reconstruction only.
    pub fn run_l1(&self, p: f64) -> Result<RunResult> {
        let plan = l1norm_plan(&self.pretrained.spec, &self.pretrained.weights, p)?;
        let model = Model {
            plan: Some(plan.clone()),
            ..self.pretrained.clone()
        };
        let mut ft = self.profile.finetune.clone();
        ft.loss.tf = false;
        let tuned = run_stage(&ft, model, &self.data, None)?;
        self.measure(tuned.model, Some(plan))
    }

    /// Narrow network trained from scratch for as many iterations as all SSL stages together.
    pub fn run_lite(&self, factor: f64) -> Result<RunResult> {
        let spec = baseline_lite(&self.profile.network, factor)?;
        let mut cfg = self.profile.pretrain.clone();
        cfg.iterations = self.profile.total_iterations()?;
        let init = Model::new(spec.clone(), instantiate(&spec, self.profile.network.seed));
        let out = run_stage(&cfg, init, &self.data, None)?;
        self.measure(out.model, None)
    }

    /// Among plans taking the first `k` candidates of `scores` in policy
    /// order, the one with the fewest removals whose MACs do not exceed `target`.
    pub fn match_macs(&self, scores: &[Score], policy: Policy, target: u64) -> Result<PruningPlan> {
        let n = scores.len();
        let plan_k = |k: usize| select(scores, k as f64 / n as f64, policy, self.seed);
        let (mut lo, mut hi) = (0usize, n.saturating_sub(1));
        if self.plan_macs(&plan_k(hi)?)? > target {
            return Err(Error::Config(format!(
                "no plan over these {n} units reaches {target} MACs"
            )));
        }
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.plan_macs(&plan_k(mid)?)? <= target {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        plan_k(lo)
    }
}

fn role_of(spec: &NetworkSpec) -> impl Fn(&str) -> Option<SiteRole> {
    let roles: Vec<(String, SiteRole)> = gamma_sites(spec).into_iter().map(|s| (s.id, s.role)).collect();
    move |site: &str| roles.iter().find(|(id, _)| id == site).map(|(_, r)| *r)
}

fn is_upsampler_site(spec: &NetworkSpec, sp: &SitePlan) -> bool {
    spec.subnet_of(&sp.layer_id) == Subnet::Upsampler
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriteriaRow {
    pub policy: String,
    pub ratio: f64,
    pub seed: u64,
    pub psnr: f64,
    pub macs: u64,
    pub params: u64,
}

/// Every (policy, ratio) cell on every trial. `cells` lists the pairs to run.
pub fn run_criteria(trials: &[Trial], cells: &[(Policy, f64)]) -> Result<Vec<CriteriaRow>> {
    let jobs: Vec<(&Trial, Policy, f64)> = trials
        .iter()
        .flat_map(|t| cells.iter().map(move |&(p, r)| (t, p, r)))
        .collect();
    jobs.par_iter()
        .map(|&(t, policy, ratio)| {
            let r = t.run_ssl(&t.plan(ratio, policy)?, true)?;
            log::info!("criteria seed {} {policy} p={ratio}: {:.3} dB", t.seed, r.psnr);
            Ok(CriteriaRow {
                policy: policy.to_string(),
                ratio,
                seed: t.seed,
                psnr: r.psnr,
                macs: r.macs,
                params: r.params,
            })
        })
        .collect()
}

/// Full grid: {min, max} x {global, local} plus random, at each ratio.
pub fn criteria_grid(ratios: &[f64]) -> Vec<(Policy, f64)> {
    let policies = ["min-global", "min-local", "max-global", "max-local", "rand-global"];
    ratios
        .iter()
        .flat_map(|&r| policies.iter().map(move |p| (p.parse().expect("known policy"), r)))
        .collect()
}

/// Components of the SSL ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Skip-last-conv residual pruning, shuffle pruning, temporal loss.
    Ssl1,
    /// RSC with a fixed half-width upsampler, no temporal loss.
    Ssl2,
    /// RSC with shuffle pruning, no temporal loss.
    Ssl3,
    /// RSC with shuffle pruning and the temporal loss.
    Ssl4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ssl1, Variant::Ssl2, Variant::Ssl3, Variant::Ssl4];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ssl1 => "ssl1",
            Variant::Ssl2 => "ssl2",
            Variant::Ssl3 => "ssl3",
            Variant::Ssl4 => "ssl4",
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Variant::Ssl1 => "skip-last-conv + shuffle pruning + TF",
            Variant::Ssl2 => "RSC + halved upsampler",
            Variant::Ssl3 => "RSC + shuffle pruning",
            Variant::Ssl4 => "RSC + shuffle pruning + TF",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub psnr: f64,
    pub e_t: f64,
    pub macs: u64,
    pub params: u64,
}

/// Plan pruning only first-conv filters inside blocks plus upsampler units,
/// sized to match `target` MACs.
pub fn skip_last_plan(trial: &Trial, target: u64) -> Result<PruningPlan> {
    let spec = &trial.pretrained.spec;
    let role = role_of(spec);
    let scores: Vec<Score> = trial
        .scores()?
        .into_iter()
        .filter(|s| {
            let site = s.unit.site();
            role(&site) == Some(SiteRole::Mid) || spec.subnet_of(&s.unit.layer_id) == Subnet::Upsampler
        })
        .collect();
    trial.match_macs(&scores, Policy::MIN_GLOBAL, target)
}

/// RSC plan on the recurrent cells with the first half of every upsampler
/// site kept regardless of importance.
pub fn halved_upsampler_plan(trial: &Trial, ratio: f64) -> Result<PruningPlan> {
    let spec = &trial.pretrained.spec;
    let mut plan = trial.plan(ratio, Policy::MIN_GLOBAL)?;
    let mut sites = plan.sites.clone();
    for sp in sites.values_mut().filter(|sp| is_upsampler_site(spec, sp)) {
        let keep = sp.total.div_ceil(2);
        sp.kept = (0..keep).collect();
        sp.pruned = (keep..sp.total).collect();
    }
    let scores = trial.scores()?;
    plan.pruned = scores
        .iter()
        .filter(|s| sites[&s.unit.site()].pruned.contains(&s.unit.index))
        .map(|s| s.unit.clone())
        .collect();
    plan.sites = sites;
    Ok(plan)
}

pub fn run_ablation(trials: &[Trial], ratio: f64, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let per_trial: Vec<Result<Vec<AblationRow>>> = trials
        .par_iter()
        .map(|t| {
            let rsc = t.plan(ratio, Policy::MIN_GLOBAL)?;
            let target = t.plan_macs(&rsc)?;
            let mut rows = Vec::new();
            for &v in variants {
                let r = match v {
                    Variant::Ssl1 => t.run_ssl(&skip_last_plan(t, target)?, true)?,
                    Variant::Ssl2 => t.run_ssl(&halved_upsampler_plan(t, ratio)?, false)?,
                    Variant::Ssl3 => t.run_ssl(&rsc, false)?,
                    Variant::Ssl4 => t.run_ssl(&rsc, true)?,
                };
                let e_t = r.e_t.ok_or_else(|| Error::Config(format!("{} changed the hidden width", v.as_str())))?;
                log::info!("ablation seed {} {}: {:.3} dB, e_T {e_t:.5}", t.seed, v.as_str(), r.psnr);
                rows.push(AblationRow {
                    variant: v,
                    seed: t.seed,
                    psnr: r.psnr,
                    e_t,
                    macs: r.macs,
                    params: r.params,
                });
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_trial {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Ssl,
    L1,
    Lite,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Ssl => "ssl",
            Scheme::L1 => "l1",
            Scheme::Lite => "lite",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scheme: Scheme,
    /// Index of the FLOPs target, increasing as FLOPs decrease.
    pub point: usize,
    pub seed: u64,
    pub target_macs: u64,
    /// Pruning ratio, or width factor for the lite scheme.
    pub setting: f64,
    pub macs: u64,
    pub params: u64,
    pub psnr: f64,
}

/// Largest lite width factor whose MACs do not exceed `target`.
fn lite_factor_for(trial: &Trial, target: u64) -> Result<f64> {
    let cfg = &trial.profile.network;
    (1..=cfg.trunk_width)
        .rev()
        .map(|w| w as f64 / cfg.trunk_width as f64)
        .find(|&f| {
            baseline_lite(cfg, f).is_ok_and(|s| cost(&s, trial.resolution()).macs() <= target)
        })
        .ok_or_else(|| Error::Config(format!("no lite width reaches {target} MACs")))
}

/// FLOPs targets come from the L1 baseline at each of `l1_ratios`; SSL and
/// lite are matched to each target from below.
pub fn run_sweep(trials: &[Trial], l1_ratios: &[f64], schemes: &[Scheme]) -> Result<Vec<SweepRow>> {
    let per_trial: Vec<Result<Vec<SweepRow>>> = trials
        .par_iter()
        .map(|t| {
            let mut rows = Vec::new();
            let ssl_scores = t.scores()?;
            for (point, &p) in l1_ratios.iter().enumerate() {
                let l1 = t.run_l1(p)?;
                let target = l1.macs;
                let row = |scheme, setting, r: &RunResult| SweepRow {
                    scheme,
                    point,
                    seed: t.seed,
                    target_macs: target,
                    setting,
                    macs: r.macs,
                    params: r.params,
                    psnr: r.psnr,
                };
                if schemes.contains(&Scheme::L1) {
                    rows.push(row(Scheme::L1, p, &l1));
                }
                if schemes.contains(&Scheme::Ssl) {
                    let plan = t.match_macs(&ssl_scores, Policy::MIN_GLOBAL, target)?;
                    let r = t.run_ssl(&plan, true)?;
                    rows.push(row(Scheme::Ssl, plan.pruned.len() as f64 / ssl_scores.len() as f64, &r));
                }
                if schemes.contains(&Scheme::Lite) {
                    let f = lite_factor_for(t, target)?;
                    rows.push(row(Scheme::Lite, f, &t.run_lite(f)?));
                }
                log::info!("sweep seed {} point {point}: target {target} MACs", t.seed);
            }
            Ok(rows)
        })
        .collect();
    let mut out = Vec::new();
    for r in per_trial {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorGrowth {
    pub seed: u64,
    /// Mean forward-state error per timestep.
    pub forward: Vec<f64>,
    /// Mean backward-state error per timestep, in time order.
    pub backward: Vec<f64>,
    /// Rank correlation of the forward error with t.
    pub rho_forward: f64,
    /// Rank correlation of the backward error with reversed t.
    pub rho_backward: f64,
}

/// Hidden-state error of the pretrained network pruned at `ratio` without
/// sparsity training or finetuning, over `frames`-long clips.
pub fn error_growth(trial: &Trial, ratio: f64, frames: usize, clips: usize) -> Result<ErrorGrowth> {
    let plan = trial.plan(ratio, trial.profile.prune.policy)?;
    let r = compile(&trial.pretrained.spec, &trial.pretrained.weights, None, &plan)?;
    let pruned = Model::new(r.spec, r.weights);
    let mut clip_cfg = trial.profile.data.clip.clone();
    clip_cfg.frames = frames;
    let seqs = synth_pool(trial.profile.data.seed.wrapping_mul(2) + 7, clips, &clip_cfg)?;
    let mut fwd = vec![0.0; frames];
    let mut bwd = vec![0.0; frames];
    for seq in &seqs {
        let (_, a) = trial.pretrained.infer(seq)?;
        let (_, b) = pruned.infer(seq)?;
        let (f, bk) = crate::model::hidden_error_profile(&a, &b)?;
        fwd.iter_mut().zip(&f).for_each(|(x, y)| *x += y / clips as f64);
        bwd.iter_mut().zip(&bk).for_each(|(x, y)| *x += y / clips as f64);
    }
    let t: Vec<f64> = (0..frames).map(|i| i as f64).collect();
    let rev: Vec<f64> = t.iter().rev().copied().collect();
    let rho_backward = if trial.pretrained.spec.is_bidirectional() {
        spearman(&rev, &bwd)
    } else {
        0.0
    };
    Ok(ErrorGrowth {
        seed: trial.seed,
        rho_forward: spearman(&t, &fwd),
        rho_backward,
        forward: fwd,
        backward: bwd,
    })
}
