//! Command-line front end. Every command writes its resolved config, a CSV
//! report and `summary.txt` into the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::data::{read_sequence, write_sequence};
use crate::experiments::plot::{bar_chart, line_chart, Series};
use crate::experiments::{
    conv_ratios, criteria_grid, error_growth, histogram, prepare, run_ablation, run_criteria, run_sweep, summarize,
    write_rows, Profile, Scheme, Trial, Variant,
};
use crate::graph::{instantiate, load_checkpoint, save_checkpoint};
use crate::model::Sequence;
use crate::pipeline::{evaluate, run_stage, write_metrics, Dataset, Model, StageOutcome};
use crate::regularizer::{inject_scaling, write_gamma_trajectory};
use crate::rewrite::{compile, cost};
use crate::scoring::{score_network, select, Policy, PruningPlan, ScoreOptions};

const PLAN_FILE: &str = "plan.json";

#[derive(Debug, Parser)]
#[command(name = "vsrprune", version, about = "Structured pruning for recurrent video super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Profile file (TOML). Defaults to the built-in toy profile.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; VSRPRUNE_OUT overrides the default `runs/<command>`.
    #[arg(long, env = "VSRPRUNE_OUT")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArg {
    /// Directory written by `synth` (train/ and val/ clip folders). Defaults to
    /// generating the profile's synthetic data in memory.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub ratio: Option<f64>,
    /// min-global, min-local, max-global, max-local or rand-global.
    #[arg(long)]
    pub policy: Option<Policy>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train and validation clips as PNG folders.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the unpruned network from scratch.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Select unimportant units and drive their scaling factors toward zero.
    Sparsify {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Physically remove pruned units and fold scaling factors into the weights.
    Prune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Plan file; defaults to the checkpoint's own plan.json when no ratio is given.
        #[arg(long = "plan")]
        plan_file: Option<PathBuf>,
    },
    /// Train a pruned network, optionally aligning its final hidden states with a teacher.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Unpruned network for the temporal loss.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Turn the temporal loss off regardless of the profile.
        #[arg(long)]
        no_tf: bool,
    },
    /// PSNR (and optionally SSIM) of a checkpoint on the validation clips.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ssim: bool,
    },
    /// Parameter and FLOPs counts per layer and subnetwork.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to measure instead of the profile's network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// LR input size as HxW.
        #[arg(long, default_value = "180x320", value_parser = parse_resolution)]
        resolution: (usize, usize),
    },
    /// PSNR versus FLOPs for SSL, the L1-norm baseline and narrow networks.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// L1-baseline ratios that set the FLOPs targets.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "ssl,l1,lite", value_parser = parse_scheme)]
        schemes: Vec<Scheme>,
    },
    /// Compare pruning criteria across ratios.
    Criteria {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
    /// Component ablation plus hidden-state error growth.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        ratio: Option<f64>,
    },
}

fn parse_resolution(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((n(h)?, n(w)?))
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    match s {
        "ssl" => Ok(Scheme::Ssl),
        "l1" => Ok(Scheme::L1),
        "lite" => Ok(Scheme::Lite),
        _ => Err(format!("unknown scheme `{s}` (ssl, l1, lite)")),
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Sparsify { .. } => "sparsify",
            Command::Prune { .. } => "prune",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Cost { .. } => "cost",
            Command::Sweep { .. } => "sweep",
            Command::Criteria { .. } => "criteria",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Pretrain { common, .. }
            | Command::Sparsify { common, .. }
            | Command::Prune { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Cost { common, .. }
            | Command::Sweep { common, .. }
            | Command::Criteria { common, .. }
            | Command::Ablate { common, .. } => common,
        }
    }
}

/// Output directory plus the accumulated human summary.
struct Run {
    out: PathBuf,
    summary: String,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn say(&mut self, line: impl AsRef<str>) {
        self.summary.push_str(line.as_ref());
        if !line.as_ref().ends_with('\n') {
            self.summary.push('\n');
        }
    }

    fn write(&self, name: &str, text: &str) -> anyhow::Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }
}

fn load_profile(common: &Common) -> anyhow::Result<Profile> {
    let base = match &common.config {
        Some(p) => Profile::load(p).with_context(|| format!("--config {}", p.display()))?,
        None => Profile::toy(),
    };
    Ok(match common.seed {
        Some(s) => base.for_seed(s),
        None => base,
    })
}

fn load_model(path: &Path, flag: &str) -> anyhow::Result<Model> {
    let c = load_checkpoint(path).with_context(|| format!("--{flag} {}", path.display()))?;
    Ok(Model {
        spec: c.spec,
        weights: c.weights,
        scaling: c.scaling,
        plan: None,
    })
}

fn save_model(model: &Model, dir: &Path) -> anyhow::Result<()> {
    save_checkpoint(&model.spec, &model.weights, model.scaling.as_ref(), dir)
        .with_context(|| format!("saving checkpoint to {}", dir.display()))
}

fn clip_dirs(dir: &Path) -> anyhow::Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("--data {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.iter()
        .map(|d| read_sequence(d).with_context(|| format!("reading clip {}", d.display())))
        .collect()
}

fn load_data(profile: &Profile, arg: &DataArg) -> anyhow::Result<Dataset> {
    match &arg.data {
        None => Ok(Dataset::synthetic(&profile.data)?),
        Some(dir) => {
            let data = Dataset {
                train: clip_dirs(&dir.join("train"))?,
                val: clip_dirs(&dir.join("val"))?,
            };
            if data.train.is_empty() || data.val.is_empty() {
                bail!("--data {}: needs clips under train/ and val/", dir.display());
            }
            Ok(data)
        }
    }
}

fn resolve_plan(profile: &Profile, args: &PlanArgs) -> (f64, Policy) {
    (
        args.ratio.unwrap_or(profile.prune.ratio),
        args.policy.unwrap_or(profile.prune.policy),
    )
}

fn make_plan(profile: &Profile, model: &Model, args: &PlanArgs) -> anyhow::Result<PruningPlan> {
    let (ratio, policy) = resolve_plan(profile, args);
    if !(0.0..1.0).contains(&ratio) {
        bail!("--ratio {ratio} outside [0, 1)");
    }
    let opts = ScoreOptions {
        normalize_groups: profile.prune.normalize_groups,
    };
    let scores = score_network(&model.spec, &model.weights, opts)?;
    Ok(select(&scores, ratio, policy, profile.network.seed)?)
}

fn write_plan(plan: &PruningPlan, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(plan)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_plan(path: &Path) -> anyhow::Result<PruningPlan> {
    let text = fs::read_to_string(path).with_context(|| format!("--plan {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("--plan {}: malformed plan", path.display()))
}

fn stage_report(run: &mut Run, out: &StageOutcome) -> anyhow::Result<()> {
    let f = fs::File::create(run.path("metrics.csv"))?;
    write_metrics(&out.log, f)?;
    if let Some(last) = out.log.last() {
        run.say(format!(
            "{} iterations, final loss_rec {:.5}, loss_sir {:.5}, loss_tf {:.5}",
            out.log.len(),
            last.loss_rec,
            last.loss_sir,
            last.loss_tf
        ));
    }
    if let Some(p) = out.log.iter().rev().find_map(|r| r.val_psnr) {
        run.say(format!("validation PSNR {p:.3} dB"));
    }
    Ok(())
}

fn seeds_or(profile: &Profile, seeds: &Option<Vec<u64>>) -> Vec<u64> {
    seeds.clone().unwrap_or_else(|| profile.experiments.seeds.clone())
}

fn prepare_all(profile: &Profile, seeds: &[u64]) -> anyhow::Result<Vec<Trial>> {
    use rayon::prelude::*;
    seeds
        .par_iter()
        .map(|&s| prepare(profile, s).with_context(|| format!("pretraining seed {s}")))
        .collect()
}

fn run_command(cmd: &Command, run: &mut Run, profile: &mut Profile) -> anyhow::Result<()> {
    match cmd {
        Command::Synth { .. } => {
            let data = Dataset::synthetic(&profile.data)?;
            for (split, clips) in [("train", &data.train), ("val", &data.val)] {
                for (i, seq) in clips.iter().enumerate() {
                    write_sequence(seq, &run.path(&format!("{split}/{i:04}")))?;
                }
            }
            let mut w = csv::Writer::from_path(run.path("clips.csv"))?;
            w.write_record(["split", "clip", "frames", "lr_h", "lr_w"])?;
            for (split, clips) in [("train", &data.train), ("val", &data.val)] {
                for (i, seq) in clips.iter().enumerate() {
                    let s = seq.lr_shape();
                    w.write_record([split, &format!("{i:04}"), &seq.frames.len().to_string(), &s.h().to_string(), &s.w().to_string()])?;
                }
            }
            w.flush()?;
            run.say(format!(
                "wrote {} training and {} validation clips",
                data.train.len(),
                data.val.len()
            ));
        }
        Command::Pretrain { data, .. } => {
            let data = load_data(profile, data)?;
            let spec = profile.network.build();
            spec.ensure_valid()?;
            let init = Model::new(spec.clone(), instantiate(&spec, profile.network.seed));
            let out = run_stage(&profile.pretrain, init, &data, None)?;
            save_model(&out.model, &run.path("model"))?;
            stage_report(run, &out)?;
        }
        Command::Sparsify {
            data,
            plan,
            checkpoint,
            ..
        } => {
            let data = load_data(profile, data)?;
            let mut model = load_model(checkpoint, "checkpoint")?;
            let (ratio, policy) = resolve_plan(profile, plan);
            (profile.prune.ratio, profile.prune.policy) = (ratio, policy);
            let p = make_plan(profile, &model, plan)?;
            model.scaling = Some(inject_scaling(&model.spec)?);
            model.plan = Some(p.clone());
            let out = run_stage(&profile.sparsify, model, &data, None)?;
            save_model(&out.model, &run.path("model"))?;
            write_plan(&p, &run.path("model").join(PLAN_FILE))?;
            write_gamma_trajectory(&out.gamma_trajectory, fs::File::create(run.path("gamma.csv"))?)?;
            let series = [
                Series {
                    name: "selected".into(),
                    points: out.gamma_trajectory.iter().map(|g| (g.iter as f64, g.mean_gamma_pruned)).collect(),
                },
                Series {
                    name: "kept".into(),
                    points: out.gamma_trajectory.iter().map(|g| (g.iter as f64, g.mean_gamma_kept)).collect(),
                },
            ];
            line_chart(&run.path("gamma.svg"), "mean |gamma|", "iteration", "gamma", &series)?;
            run.say(format!("{} of {} units selected ({policy}, p={ratio})", p.pruned.len(), p.sites.values().map(|s| s.total).sum::<usize>()));
            stage_report(run, &out)?;
            if let Some(g) = out.gamma_trajectory.last() {
                run.say(format!(
                    "mean gamma: selected {:.4}, kept {:.4}",
                    g.mean_gamma_pruned, g.mean_gamma_kept
                ));
            }
        }
        Command::Prune {
            plan,
            checkpoint,
            plan_file,
            ..
        } => {
            let model = load_model(checkpoint, "checkpoint")?;
            let own = checkpoint.join(PLAN_FILE);
            let p = match plan_file {
                Some(f) => read_plan(f)?,
                None if plan.ratio.is_none() && plan.policy.is_none() && own.is_file() => read_plan(&own)?,
                None => make_plan(profile, &model, plan)?,
            };
            (profile.prune.ratio, profile.prune.policy) = (p.ratio, p.policy);
            let r = compile(&model.spec, &model.weights, model.scaling.as_ref(), &p)?;
            let pruned = Model::new(r.spec.clone(), r.weights.clone());
            save_model(&pruned, &run.path("model"))?;
            write_plan(&p, &run.path(PLAN_FILE))?;
            let ratios = conv_ratios(&model.spec, &r.spec);
            write_rows(&ratios, &run.path("ratios.csv"))?;
            let bars: Vec<(String, f64)> = ratios.iter().map(|c| (c.layer.clone(), c.ratio)).collect();
            bar_chart(&run.path("ratios.svg"), "pruned filters per conv", "ratio", &bars)?;
            r.after.write_csv(fs::File::create(run.path("cost.csv"))?)?;
            run.say(format!("policy {}, ratio {}, {} units removed", p.policy, p.ratio, p.pruned.len()));
            run.say(format!("before: {}", r.before.summary()));
            run.say(format!("after: {}", r.after.summary()));
            run.say(histogram(&ratios));
            if !r.folds.is_empty() {
                run.say(r.fold_report());
            }
        }
        Command::Finetune {
            data,
            checkpoint,
            teacher,
            no_tf,
            ..
        } => {
            let data = load_data(profile, data)?;
            let model = load_model(checkpoint, "checkpoint")?;
            if *no_tf {
                profile.finetune.loss.tf = false;
            }
            let teacher = match (profile.finetune.loss.tf, teacher) {
                (true, Some(t)) => Some(load_model(t, "teacher")?),
                (true, None) => bail!("the temporal loss needs --teacher (or pass --no-tf)"),
                (false, _) => None,
            };
            let out = run_stage(&profile.finetune, model, &data, teacher.as_ref())?;
            save_model(&out.model, &run.path("model"))?;
            stage_report(run, &out)?;
        }
        Command::Eval {
            data,
            checkpoint,
            ssim,
            ..
        } => {
            let data = load_data(profile, data)?;
            let model = load_model(checkpoint, "checkpoint")?;
            let mut w = csv::Writer::from_path(run.path("eval.csv"))?;
            w.write_record(["clip", "frames", "psnr", "ssim"])?;
            for (i, clip) in data.val.iter().enumerate() {
                let e = evaluate(&model, std::slice::from_ref(clip), *ssim)?;
                let s = e.ssim.map(|v| format!("{v:.6}")).unwrap_or_default();
                w.write_record([i.to_string(), e.frames.to_string(), format!("{:.6}", e.psnr), s])?;
            }
            w.flush()?;
            let all = evaluate(&model, &data.val, *ssim)?;
            let s = all.ssim.map(|v| format!(", SSIM {v:.4}")).unwrap_or_default();
            run.say(format!("{} clips, {} frames: PSNR {:.3} dB{s}", data.val.len(), all.frames, all.psnr));
        }
        Command::Cost {
            checkpoint,
            resolution,
            ..
        } => {
            let spec = match checkpoint {
                Some(c) => load_model(c, "checkpoint")?.spec,
                None => profile.network.build(),
            };
            spec.ensure_valid()?;
            let report = cost(&spec, *resolution);
            report.write_csv(fs::File::create(run.path("cost.csv"))?)?;
            run.say(report.summary());
        }
        Command::Criteria { seeds, ratios, .. } => {
            let seeds = seeds_or(profile, seeds);
            let ratios = ratios.clone().unwrap_or_else(|| profile.experiments.ratios.clone());
            (profile.experiments.seeds, profile.experiments.ratios) = (seeds.clone(), ratios.clone());
            profile.validate()?;
            let trials = prepare_all(profile, &seeds)?;
            let rows = run_criteria(&trials, &criteria_grid(&ratios))?;
            write_rows(&rows, &run.path("criteria.csv"))?;
            let sum = summarize(&rows, |r| format!("{} p={}", r.policy, r.ratio), |r| r.psnr);
            write_rows(&sum, &run.path("summary.csv"))?;
            run.say(format!("mean PSNR over seeds {seeds:?}"));
            for s in &sum {
                run.say(format!("  {:<22} {:.3} ± {:.3} dB", s.key, s.mean, s.std));
            }
            let mut series = Vec::new();
            for policy in ["min-global", "min-local", "max-global", "max-local", "rand-global"] {
                let points = ratios
                    .iter()
                    .filter_map(|&r| {
                        sum.iter()
                            .find(|s| s.key == format!("{policy} p={r}"))
                            .map(|s| (r, s.mean))
                    })
                    .collect();
                series.push(Series {
                    name: policy.into(),
                    points,
                });
            }
            line_chart(&run.path("criteria.svg"), "pruning criteria", "pruning ratio", "PSNR (dB)", &series)?;
        }
        Command::Ablate { seeds, ratio, .. } => {
            let seeds = seeds_or(profile, seeds);
            let ratio = ratio.unwrap_or(profile.experiments.ablation_ratio);
            (profile.experiments.seeds, profile.experiments.ablation_ratio) = (seeds.clone(), ratio);
            profile.validate()?;
            let trials = prepare_all(profile, &seeds)?;
            let rows = run_ablation(&trials, ratio, &Variant::ALL)?;
            write_rows(&rows, &run.path("ablation.csv"))?;
            let psnr = summarize(&rows, |r| r.variant.as_str().to_string(), |r| r.psnr);
            let e_t = summarize(&rows, |r| r.variant.as_str().to_string(), |r| r.e_t);
            run.say(format!("p={ratio}, seeds {seeds:?}"));
            for (v, (p, e)) in Variant::ALL.iter().zip(psnr.iter().zip(&e_t)) {
                run.say(format!(
                    "  {} {:<36} PSNR {:.3} ± {:.3} dB   e_T {:.5} ± {:.5}",
                    v.as_str(),
                    v.describe(),
                    p.mean,
                    p.std,
                    e.mean,
                    e.std
                ));
            }
            write_rows(&psnr, &run.path("summary.csv"))?;

            let e = &profile.experiments;
            let growth: Vec<_> = trials
                .iter()
                .map(|t| error_growth(t, ratio, e.error_frames, e.error_clips))
                .collect::<Result<_, _>>()?;
            let mut w = csv::Writer::from_path(run.path("error_growth.csv"))?;
            w.write_record(["seed", "t", "forward", "backward"])?;
            for g in &growth {
                for (t, (f, b)) in g.forward.iter().zip(&g.backward).enumerate() {
                    w.write_record([g.seed.to_string(), t.to_string(), format!("{f:.8}"), format!("{b:.8}")])?;
                }
            }
            w.flush()?;
            let series: Vec<Series> = growth
                .iter()
                .map(|g| Series {
                    name: format!("seed {}", g.seed),
                    points: g.forward.iter().enumerate().map(|(t, &v)| (t as f64, v)).collect(),
                })
                .collect();
            line_chart(&run.path("error_growth.svg"), "forward hidden-state error, pruned", "t", "mean |H - H'|", &series)?;
            let rho: Vec<String> = growth.iter().map(|g| format!("{:.2}", g.rho_forward)).collect();
            run.say(format!("error growth rank correlation with t per seed: {}", rho.join(", ")));
        }
        Command::Sweep {
            seeds,
            ratios,
            schemes,
            ..
        } => {
            let seeds = seeds_or(profile, seeds);
            let ratios = ratios.clone().unwrap_or_else(|| profile.experiments.sweep_ratios.clone());
            (profile.experiments.seeds, profile.experiments.sweep_ratios) = (seeds.clone(), ratios.clone());
            profile.validate()?;
            let trials = prepare_all(profile, &seeds)?;
            let rows = run_sweep(&trials, &ratios, schemes)?;
            write_rows(&rows, &run.path("sweep.csv"))?;
            let psnr = summarize(&rows, |r| format!("{} {}", r.scheme.as_str(), r.point), |r| r.psnr);
            let macs = summarize(&rows, |r| format!("{} {}", r.scheme.as_str(), r.point), |r| r.macs as f64);
            write_rows(&psnr, &run.path("summary.csv"))?;
            run.say(format!("targets from the L1 baseline at p in {ratios:?}, seeds {seeds:?}"));
            let mut series = Vec::new();
            for &scheme in schemes {
                let mut points = Vec::new();
                for (p, m) in psnr.iter().zip(&macs) {
                    if p.key.starts_with(&format!("{} ", scheme.as_str())) {
                        run.say(format!(
                            "  {:<8} {:>8.2} MMACs  PSNR {:.3} ± {:.3} dB",
                            p.key,
                            m.mean / 1e6,
                            p.mean,
                            p.std
                        ));
                        points.push((m.mean / 1e6, p.mean));
                    }
                }
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                series.push(Series {
                    name: scheme.as_str().into(),
                    points,
                });
            }
            line_chart(&run.path("sweep.svg"), "PSNR vs FLOPs", "MMACs per LR frame", "PSNR (dB)", &series)?;
        }
    }
    Ok(())
}

/// Runs one parsed command; returns the human summary.
pub fn execute(cli: &Cli) -> anyhow::Result<String> {
    let cmd = &cli.command;
    let common = cmd.common();
    let mut profile = load_profile(common)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cmd.name()));
    fs::create_dir_all(&out).with_context(|| format!("--out {}", out.display()))?;
    let mut run = Run {
        out,
        summary: String::new(),
    };
    run_command(cmd, &mut run, &mut profile)?;
    let mut head = String::new();
    writeln!(head, "vsrprune {} (profile {}, seed {})", cmd.name(), profile.name, profile.network.seed)?;
    run.summary.insert_str(0, &head);
    run.write("config.toml", &profile.to_toml())?;
    run.write("summary.txt", &run.summary)?;
    Ok(run.summary)
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("VSRPRUNE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow!("VSRPRUNE_THREADS={v}: expected a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Entry point of the `vsrprune` binary.
pub fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| execute(&cli)) {
        Ok(summary) => {
            print!("{summary}");
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            let mut line = String::new();
            for c in e.chain().map(|c| c.to_string()) {
                if !line.ends_with(&c) {
                    line = if line.is_empty() { c } else { format!("{line}: {c}") };
                }
            }
            eprintln!("error: {}", line.replace('\n', " "));
            std::process::ExitCode::FAILURE
        }
    }
}
