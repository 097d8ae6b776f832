//! Training stages: pretrain, sparsify and prune-then-finetune, with the
//! temporal finetuning loss and the comparison baselines.

mod baseline;
mod optim;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{psnr_clamped, ssim, synth_pool, SynthConfig, SCALE};
use crate::error::{Error, Result};
use crate::graph::{NetworkSpec, Weights};
use crate::model::{bind, forward_on_tape, run_bidirectional, Bound, HiddenTrace, Sequence, Trainable};
use crate::regularizer::{sir_penalty_on_tape, AlphaSchedule, GammaRecord, Phase, ScalingState};
use crate::rewrite::{compile, RewriteResult};
use crate::scoring::PruningPlan;
use crate::tensor::{Tape, Tensor, Var};

pub use baseline::{baseline_l1norm, baseline_lite, l1norm_plan};
pub use optim::{bias_key, cosine_lr, gamma_key, weight_key, Adam, AdamConfig, Grads};

pub const CHARBONNIER_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Sparsify,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Sparsify => "sparsify",
            Stage::Finetune => "finetune",
        }
    }
}

/// Distance used between final hidden states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfNorm {
    #[default]
    Mae,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default = "yes")]
    pub rec: bool,
    #[serde(default)]
    pub sir: bool,
    #[serde(default)]
    pub tf: bool,
    #[serde(default)]
    pub tf_norm: TfNorm,
    #[serde(default = "charbonnier_eps")]
    pub charbonnier_eps: f64,
}

fn yes() -> bool {
    true
}
fn charbonnier_eps() -> f64 {
    CHARBONNIER_EPS
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            rec: true,
            sir: false,
            tf: false,
            tf_norm: TfNorm::Mae,
            charbonnier_eps: CHARBONNIER_EPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub delta: f64,
    pub tau: f64,
    pub t1: u64,
    pub t2: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            delta: 1e-4,
            tau: 0.1,
            t1: 5,
            t2: 3375,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<AlphaSchedule> {
        AlphaSchedule::new(self.delta, self.tau, self.t1, self.t2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    /// Iteration budget. A sparsify stage runs until its schedule is done instead.
    #[serde(default)]
    pub iterations: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub batch: usize,
    /// Square LR crop side; whole frames when absent.
    #[serde(default)]
    pub patch: Option<usize>,
    /// Consecutive frames per training clip; whole clips when absent.
    #[serde(default)]
    pub clip_frames: Option<usize>,
    #[serde(default = "base_lr")]
    pub lr: f64,
    #[serde(default = "base_lr")]
    pub gamma_lr: f64,
    #[serde(default = "lr_floor")]
    pub lr_floor: f64,
    /// Cosine horizon; the stage length when absent.
    #[serde(default)]
    pub horizon: Option<u64>,
    #[serde(default = "val_every")]
    pub val_every: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
}

fn one() -> usize {
    1
}
fn base_lr() -> f64 {
    2e-4
}
fn lr_floor() -> f64 {
    1e-7
}
fn val_every() -> u64 {
    250
}

impl StageConfig {
    pub fn new(stage: Stage) -> Self {
        StageConfig {
            stage,
            iterations: 0,
            seed: 0,
            batch: 1,
            patch: None,
            clip_frames: None,
            lr: base_lr(),
            gamma_lr: base_lr(),
            lr_floor: lr_floor(),
            horizon: None,
            val_every: val_every(),
            adam: AdamConfig::default(),
            loss: LossConfig {
                sir: stage == Stage::Sparsify,
                ..LossConfig::default()
            },
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{} stage: {msg}", self.stage.as_str())));
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.gamma_lr > 0.0) {
            return bad(format!("step sizes must be positive (lr {}, gamma_lr {})", self.lr, self.gamma_lr));
        }
        if !(0.0..=self.lr.min(self.gamma_lr)).contains(&self.lr_floor) {
            return bad(format!("lr_floor {} outside [0, lr]", self.lr_floor));
        }
        if self.patch == Some(0) || self.clip_frames == Some(0) || self.val_every == 0 {
            return bad("patch, clip_frames and val_every must be positive".into());
        }
        if !(self.loss.charbonnier_eps > 0.0) {
            return bad("charbonnier_eps must be positive".into());
        }
        if !self.loss.rec && !self.loss.sir && !self.loss.tf {
            return bad("every loss term is disabled".into());
        }
        match self.stage {
            Stage::Pretrain if self.loss.sir || self.loss.tf => bad("only the reconstruction loss applies".into()),
            Stage::Sparsify if self.loss.tf => bad("the temporal loss belongs to finetune".into()),
            Stage::Sparsify if !self.loss.sir => bad("the sparsity penalty must be enabled".into()),
            Stage::Finetune if self.loss.sir => bad("the sparsity penalty belongs to sparsify".into()),
            _ => Ok(()),
        }?;
        if self.stage == Stage::Sparsify {
            self.schedule.build()?;
        }
        Ok(())
    }

    /// Iterations the stage will run.
    pub fn length(&self) -> Result<u64> {
        Ok(match self.stage {
            Stage::Sparsify => self.schedule.build()?.total_iterations(),
            _ => self.iterations,
        })
    }
}

/// A network with its weights and, once instrumented, scaling factors and plan.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub weights: Weights,
    pub scaling: Option<ScalingState>,
    pub plan: Option<PruningPlan>,
}

impl Model {
    pub fn new(spec: NetworkSpec, weights: Weights) -> Self {
        Model {
            spec,
            weights,
            scaling: None,
            plan: None,
        }
    }

    pub fn infer(&self, seq: &Sequence) -> Result<(Vec<Tensor>, HiddenTrace)> {
        run_bidirectional(&self.spec, &self.weights, self.scaling.as_ref(), seq)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub seed: u64,
    pub train_clips: usize,
    pub val_clips: usize,
    pub clip: SynthConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 0,
            train_clips: 8,
            val_clips: 3,
            clip: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sequence>,
    pub val: Vec<Sequence>,
}

impl Dataset {
    /// Disjoint synthetic train and validation pools.
    pub fn synthetic(cfg: &DataConfig) -> Result<Dataset> {
        if cfg.train_clips == 0 || cfg.val_clips == 0 {
            return Err(Error::Config("data needs at least one training and one validation clip".into()));
        }
        Ok(Dataset {
            train: synth_pool(cfg.seed.wrapping_mul(2), cfg.train_clips, &cfg.clip)?,
            val: synth_pool(cfg.seed.wrapping_mul(2) + 1, cfg.val_clips, &cfg.clip)?,
        })
    }
}

/// LR window `[y, y + h) x [x, x + w)` over frames `[t0, t0 + len)`, HR cropped to match.
pub fn crop(seq: &Sequence, t0: usize, len: usize, y: usize, x: usize, h: usize, w: usize) -> Result<Sequence> {
    let s = seq.lr_shape();
    if t0 + len > seq.len() || len == 0 || y + h > s.h() || x + w > s.w() || h == 0 || w == 0 {
        return Err(Error::Config(format!(
            "crop t{t0}+{len} y{y}+{h} x{x}+{w} outside a {}-frame {}x{} clip",
            seq.len(),
            s.h(),
            s.w()
        )));
    }
    let cut = |f: &Tensor, y: usize, x: usize, h: usize, w: usize| {
        let mut out = Tensor::zeros(crate::tensor::Shape::new(1, f.shape().c(), h, w));
        for c in 0..f.shape().c() {
            for r in 0..h {
                for q in 0..w {
                    out.set(0, c, r, q, f.at(0, c, y + r, x + q));
                }
            }
        }
        out
    };
    let frames = seq.frames[t0..t0 + len].iter().map(|f| cut(f, y, x, h, w)).collect();
    let hr = seq.hr.as_ref().map(|hr| {
        hr[t0..t0 + len]
            .iter()
            .map(|f| cut(f, SCALE * y, SCALE * x, SCALE * h, SCALE * w))
            .collect()
    });
    Sequence::new(frames, hr, seq.motion[t0..t0 + len - 1].to_vec())
}

fn sample_batch(rng: &mut ChaCha8Rng, data: &Dataset, cfg: &StageConfig) -> Result<Vec<Sequence>> {
    (0..cfg.batch)
        .map(|_| {
            let seq = &data.train[rng.random_range(0..data.train.len())];
            let s = seq.lr_shape();
            let len = cfg.clip_frames.unwrap_or(seq.len()).min(seq.len());
            let (ph, pw) = cfg.patch.map_or((s.h(), s.w()), |p| (p.min(s.h()), p.min(s.w())));
            let t0 = rng.random_range(0..=seq.len() - len);
            let y = rng.random_range(0..=s.h() - ph);
            let x = rng.random_range(0..=s.w() - pw);
            crop(seq, t0, len, y, x, ph, pw)
        })
        .collect()
}

/// Mean over frames of the per-frame Charbonnier loss.
pub fn reconstruction_loss(tape: &mut Tape, sr: &[Var], hr: &[Var], eps: f64) -> Result<Var> {
    if sr.len() != hr.len() || sr.is_empty() {
        return Err(Error::Config(format!("{} outputs for {} targets", sr.len(), hr.len())));
    }
    let terms = sr
        .iter()
        .zip(hr)
        .map(|(&p, &t)| tape.charbonnier(p, t, eps as f32))
        .collect::<Result<Vec<_>>>()?;
    let sum = tape.add_all(&terms)?;
    Ok(tape.scale(sum, 1.0 / sr.len() as f32))
}

fn state_distance(tape: &mut Tape, a: Var, b: Var, norm: TfNorm) -> Result<Var> {
    match norm {
        TfNorm::Mae => tape.mean_abs_error(a, b),
        TfNorm::Mse => {
            let n = tape.value(a).numel() as f32;
            let nb = tape.scale(b, -1.0);
            let d = tape.add(a, nb)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq);
            Ok(tape.scale(s, 1.0 / n))
        }
    }
}

/// Distance of the pruned model's final forward state and first-frame
/// backward state from the teacher's. The teacher enters as constants.
pub fn temporal_finetune_loss(
    tape: &mut Tape,
    forward_final: Var,
    backward_final: Option<Var>,
    teacher: &HiddenTrace,
    norm: TfNorm,
) -> Result<Var> {
    let width = |t: &Tensor| t.shape().c();
    let tf = teacher.forward_final().clone();
    if width(tape.value(forward_final)) != width(&tf) {
        return Err(Error::shape(
            "temporal_finetune_loss",
            format!("trace widths {} and {}", width(tape.value(forward_final)), width(&tf)),
        ));
    }
    let tf = tape.constant(tf);
    let mut terms = vec![state_distance(tape, forward_final, tf, norm)?];
    match (backward_final, teacher.backward_final()) {
        (Some(b), Some(t)) => {
            let t = tape.constant(t.clone());
            terms.push(state_distance(tape, b, t, norm)?);
        }
        (None, None) => {}
        _ => {
            return Err(Error::shape(
                "temporal_finetune_loss",
                "one trace has a backward direction and the other does not",
            ))
        }
    }
    tape.add_all(&terms)
}

/// `L_tf` evaluated on two recorded traces.
pub fn temporal_finetune_value(pruned: &HiddenTrace, teacher: &HiddenTrace, norm: TfNorm) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(pruned.forward_final().clone());
    let b = pruned.backward_final().map(|b| tape.constant(b.clone()));
    let v = temporal_finetune_loss(&mut tape, f, b, teacher, norm)?;
    Ok(tape.value(v).item() as f64)
}

/// Terms of the finetune objective on one clip.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub rec: Option<Var>,
    pub tf: Option<Var>,
}

/// `L_rec + L_tf` with unit weights; either term may be switched off.
pub fn total_finetune_loss(
    tape: &mut Tape,
    sr: &[Var],
    hr: &[Var],
    forward_final: Var,
    backward_final: Option<Var>,
    teacher: Option<&HiddenTrace>,
    loss: &LossConfig,
) -> Result<LossTerms> {
    let rec = if loss.rec {
        Some(reconstruction_loss(tape, sr, hr, loss.charbonnier_eps)?)
    } else {
        None
    };
    let tf = match (loss.tf, teacher) {
        (true, Some(t)) => Some(temporal_finetune_loss(tape, forward_final, backward_final, t, loss.tf_norm)?),
        (true, None) => return Err(Error::Config("temporal loss enabled without a teacher".into())),
        (false, _) => None,
    };
    let parts: Vec<Var> = rec.iter().chain(tf.iter()).copied().collect();
    let total = tape.add_all(&parts)?;
    Ok(LossTerms { total, rec, tf })
}

fn collect_grads(tape: &Tape, bound: &Bound, root: Var) -> Result<Grads> {
    let mut grads = tape.backward(root)?;
    let mut out = Grads::default();
    for (id, (w, b)) in &bound.convs {
        if let Some(g) = grads.take(*w) {
            out.0.insert(weight_key(id), g);
        }
        if let Some(g) = b.and_then(|b| grads.take(b)) {
            out.0.insert(bias_key(id), g);
        }
    }
    for (site, v) in &bound.gammas {
        if let Some(g) = grads.take(*v) {
            out.0.insert(gamma_key(site), g);
        }
    }
    Ok(out)
}

struct ClipResult {
    rec: f64,
    tf: f64,
    grads: Grads,
}

fn clip_step(
    model: &Model,
    clip: &Sequence,
    loss: &LossConfig,
    train: Trainable,
    teacher: Option<&HiddenTrace>,
) -> Result<ClipResult> {
    let hr = clip
        .hr
        .as_ref()
        .ok_or_else(|| Error::Config("training clip has no HR targets".into()))?;
    let mut tape = Tape::new();
    let bound = bind(&mut tape, &model.weights, model.scaling.as_ref(), train);
    let out = forward_on_tape(&mut tape, &model.spec, &bound, clip)?;
    let targets: Vec<Var> = hr.iter().map(|t| tape.constant(t.clone())).collect();
    let terms = total_finetune_loss(
        &mut tape,
        &out.sr,
        &targets,
        *out.forward.last().expect("non-empty clip"),
        out.backward.first().copied(),
        teacher,
        loss,
    )?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item() as f64);
    Ok(ClipResult {
        rec: value(terms.rec),
        tf: value(terms.tf),
        grads: collect_grads(&tape, &bound, terms.total)?,
    })
}

fn sir_step(scaling: &ScalingState) -> Result<(f64, Grads)> {
    let mut tape = Tape::new();
    let mut bound = Bound::default();
    for (site, g) in &scaling.gammas {
        bound.gammas.insert(site.clone(), tape.param(Tensor::vector(g.clone())));
    }
    let pen = sir_penalty_on_tape(&mut tape, &bound.gammas, scaling)?;
    Ok((tape.value(pen).item() as f64, collect_grads(&tape, &bound, pen)?))
}

/// Mean per-frame PSNR (RGB, peak 1, prediction clamped) over the clips.
pub fn mean_psnr(model: &Model, clips: &[Sequence]) -> Result<f64> {
    Ok(evaluate(model, clips, false)?.psnr)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub frames: usize,
}

pub fn evaluate(model: &Model, clips: &[Sequence], with_ssim: bool) -> Result<EvalSummary> {
    let per_clip: Vec<Result<(f64, f64, usize)>> = clips
        .par_iter()
        .map(|clip| {
            let hr = clip
                .hr
                .as_ref()
                .ok_or_else(|| Error::Config("evaluation clip has no HR targets".into()))?;
            let (sr, _) = model.infer(clip)?;
            let (mut p, mut s) = (0.0, 0.0);
            for (a, b) in sr.iter().zip(hr) {
                p += psnr_clamped(a, b)?;
                if with_ssim {
                    s += ssim(&a.map(|v| v.clamp(0.0, 1.0)), b)?;
                }
            }
            Ok((p, s, sr.len()))
        })
        .collect();
    let (mut p, mut s, mut n) = (0.0, 0.0, 0usize);
    for r in per_clip {
        let (a, b, k) = r?;
        p += a;
        s += b;
        n += k;
    }
    if n == 0 {
        return Err(Error::Config("no evaluation frames".into()));
    }
    Ok(EvalSummary {
        psnr: p / n as f64,
        ssim: with_ssim.then(|| s / n as f64),
        frames: n,
    })
}

/// Mean final hidden-state distance from the teacher over the clips.
pub fn final_state_error(model: &Model, teacher: &Model, clips: &[Sequence]) -> Result<f64> {
    let mut total = 0.0;
    for clip in clips {
        let (_, a) = model.infer(clip)?;
        let (_, b) = teacher.infer(clip)?;
        total += temporal_finetune_value(&a, &b, TfNorm::Mae)?;
    }
    Ok(total / clips.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: u64,
    pub loss_rec: f64,
    pub loss_sir: f64,
    pub loss_tf: f64,
    pub alpha: f64,
    pub val_psnr: Option<f64>,
}

pub fn write_metrics<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iter", "loss_rec", "loss_sir", "loss_tf", "alpha", "val_psnr"])?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            format!("{:.9e}", r.loss_rec),
            format!("{:.9e}", r.loss_sir),
            format!("{:.9e}", r.loss_tf),
            format!("{}", r.alpha),
            r.val_psnr.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics csv>", e))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub model: Model,
    pub log: Vec<MetricRow>,
    pub gamma_trajectory: Vec<GammaRecord>,
    /// Present when a finetune stage compiled a plan.
    pub rewrite: Option<RewriteResult>,
}

fn stage_seed(cfg: &StageConfig) -> u64 {
    let tag = match cfg.stage {
        Stage::Pretrain => 0x9e37,
        Stage::Sparsify => 0x79b9,
        Stage::Finetune => 0x7f4a,
    };
    cfg.seed.wrapping_mul(0x100_0000_01b3) ^ tag
}

/// Runs one stage.
///
/// Sparsify needs a model carrying scaling factors and a plan; it installs
/// the schedule and runs until the schedule is done. Finetune compiles the
/// model's plan when one is attached and trains the pruned network; the
/// temporal loss needs `teacher`.
pub fn run_stage(cfg: &StageConfig, model: Model, data: &Dataset, teacher: Option<&Model>) -> Result<StageOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training clips".into()));
    }
    let mut model = model;
    let mut rewrite = None;
    let train = match cfg.stage {
        Stage::Pretrain => {
            model.scaling = None;
            model.plan = None;
            Trainable {
                weights: true,
                gammas: false,
            }
        }
        Stage::Sparsify => {
            let plan = model
                .plan
                .clone()
                .ok_or_else(|| Error::Config("sparsify needs a pruning plan".into()))?;
            let scaling = model
                .scaling
                .as_mut()
                .ok_or_else(|| Error::Config("sparsify needs scaling factors".into()))?;
            scaling.apply_plan(&plan)?;
            scaling.schedule = Some(cfg.schedule.build()?);
            Trainable::ALL
        }
        Stage::Finetune => {
            if let Some(plan) = model.plan.take() {
                let r = compile(&model.spec, &model.weights, model.scaling.as_ref(), &plan)?;
                model = Model::new(r.spec.clone(), r.weights.clone());
                rewrite = Some(r);
            } else if let Some(s) = model.scaling.take() {
                let r = compile(&model.spec, &model.weights, Some(&s), &crate::scoring::empty_plan(&model.spec, &model.weights)?)?;
                model = Model::new(r.spec.clone(), r.weights.clone());
                rewrite = Some(r);
            }
            if cfg.loss.tf && teacher.is_none() {
                return Err(Error::Config("temporal loss enabled without a teacher checkpoint".into()));
            }
            Trainable {
                weights: true,
                gammas: false,
            }
        }
    };
    let teacher = if cfg.loss.tf { teacher } else { None };

    let total = cfg.length()?;
    let horizon = cfg.horizon.unwrap_or(total);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg));
    let mut adam = Adam::new(cfg.adam);
    let mut log = Vec::with_capacity(total as usize);
    let mut trajectory = Vec::new();
    if let Some(s) = &model.scaling {
        trajectory.push(s.trajectory_record());
    }

    for it in 0..total {
        if cfg.stage == Stage::Sparsify
            && model.scaling.as_ref().and_then(|s| s.schedule.as_ref()).map(|s| s.phase()) == Some(Phase::Done)
        {
            break;
        }
        let batch = sample_batch(&mut rng, data, cfg)?;
        let teacher_traces: Vec<Option<HiddenTrace>> = batch
            .iter()
            .map(|c| teacher.map(|t| t.infer(c).map(|r| r.1)).transpose())
            .collect::<Result<_>>()?;
        let results: Vec<Result<ClipResult>> = batch
            .par_iter()
            .zip(teacher_traces.par_iter())
            .map(|(clip, tt)| clip_step(&model, clip, &cfg.loss, train, tt.as_ref()))
            .collect();
        let inv = 1.0 / batch.len() as f32;
        let mut grads = Grads::default();
        let (mut rec, mut tf) = (0.0, 0.0);
        for r in results {
            let r = r?;
            rec += r.rec / batch.len() as f64;
            tf += r.tf / batch.len() as f64;
            grads.accumulate(r.grads, inv)?;
        }
        let alpha = model.scaling.as_ref().map_or(0.0, ScalingState::alpha);
        let mut sir = 0.0;
        if cfg.loss.sir {
            let (v, g) = sir_step(model.scaling.as_ref().expect("sparsify has scaling"))?;
            sir = v;
            grads.accumulate(g, 1.0)?;
        }
        let loss = rec + sir + tf;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} stage diverged at iteration {it}: loss {loss}",
                cfg.stage.as_str()
            )));
        }
        let lr = cosine_lr(cfg.lr, cfg.lr_floor, horizon, it);
        let glr = cosine_lr(cfg.gamma_lr, cfg.lr_floor, horizon, it);
        adam.step(
            &mut model.weights,
            model.scaling.as_mut().map(|s| &mut s.gammas),
            &grads,
            lr,
            glr,
        )?;
        if let Some(s) = model.scaling.as_mut() {
            s.step_schedule();
            trajectory.push(s.trajectory_record());
        }
        let last = it + 1 == total;
        let val_psnr = if (it + 1) % cfg.val_every == 0 || last {
            Some(mean_psnr(&model, &data.val)?)
        } else {
            None
        };
        log.push(MetricRow {
            iter: it + 1,
            loss_rec: rec,
            loss_sir: sir,
            loss_tf: tf,
            alpha,
            val_psnr,
        });
    }
    Ok(StageOutcome {
        model,
        log,
        gamma_trajectory: trajectory,
        rewrite,
    })
}
