use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Degradation, SynthConfig, SCALE};
use crate::error::{Error, Result};
use crate::graph::NetworkConfig;
use crate::pipeline::{DataConfig, ScheduleConfig, Stage, StageConfig};
use crate::scoring::Policy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub ratio: f64,
    pub policy: Policy,
    #[serde(default)]
    pub normalize_groups: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            ratio: 0.5,
            policy: Policy::MIN_GLOBAL,
            normalize_groups: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    /// Ratios of the criteria study.
    pub ratios: Vec<f64>,
    pub ablation_ratio: f64,
    /// L1-baseline ratios that set the sweep's FLOPs targets.
    pub sweep_ratios: Vec<f64>,
    /// Clip length for the hidden-error study.
    pub error_frames: usize,
    pub error_clips: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seeds: vec![0, 1, 2, 3, 4],
            ratios: vec![0.3, 0.5, 0.7],
            ablation_ratio: 0.5,
            sweep_ratios: vec![0.25, 0.5, 0.75],
            error_frames: 10,
            error_clips: 3,
        }
    }
}

/// Everything a command needs: network, data, the three stages, pruning
/// defaults and experiment grids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    pub name: String,
    pub network: NetworkConfig,
    pub data: DataConfig,
    pub pretrain: StageConfig,
    pub sparsify: StageConfig,
    pub finetune: StageConfig,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub experiments: ExperimentConfig,
}

impl Profile {
    /// Desk-scale profile on the toy network.
    pub fn toy() -> Profile {
        let stage = |stage, iterations| StageConfig {
            iterations,
            batch: 1,
            patch: Some(12),
            clip_frames: Some(4),
            lr: 1e-3,
            gamma_lr: 5e-2,
            lr_floor: 1e-7,
            val_every: 250,
            schedule: ScheduleConfig {
                delta: 1e-2,
                tau: 0.1,
                t1: 2,
                t2: 40,
            },
            ..StageConfig::new(stage)
        };
        let mut finetune = stage(Stage::Finetune, 100);
        finetune.loss.tf = true;
        finetune.lr = 5e-4;
        Profile {
            name: "toy".into(),
            network: NetworkConfig::toy(),
            data: DataConfig {
                seed: 0,
                train_clips: 8,
                val_clips: 3,
                clip: SynthConfig {
                    frames: 6,
                    hr_size: (64, 64),
                    max_motion: 1,
                    degradation: Degradation::default(),
                },
            },
            pretrain: stage(Stage::Pretrain, 2000),
            sparsify: stage(Stage::Sparsify, 0),
            finetune,
            prune: PruneConfig::default(),
            experiments: ExperimentConfig::default(),
        }
    }

    /// A few iterations on a tiny network; for smoke tests and demos.
    pub fn smoke() -> Profile {
        let mut p = Profile::toy();
        p.name = "smoke".into();
        p.network.trunk_width = 8;
        p.network.blocks = 2;
        p.data.train_clips = 2;
        p.data.val_clips = 1;
        p.data.clip.frames = 4;
        p.data.clip.hr_size = (32, 32);
        p.pretrain.iterations = 4;
        p.finetune.iterations = 2;
        for s in [&mut p.pretrain, &mut p.sparsify, &mut p.finetune] {
            s.patch = Some(8);
            s.clip_frames = Some(3);
            s.schedule.t1 = 1;
            s.schedule.t2 = 2;
        }
        p.experiments = ExperimentConfig {
            seeds: vec![0, 1],
            ratios: vec![0.5],
            ablation_ratio: 0.5,
            sweep_ratios: vec![0.5],
            error_frames: 4,
            error_clips: 1,
        };
        p
    }

    /// Full-size network with the published schedule; valid but far beyond desk budgets.
    pub fn paper_scale() -> Profile {
        let stage = |stage, iterations| StageConfig {
            iterations,
            batch: 8,
            patch: Some(64),
            clip_frames: Some(15),
            lr: 2e-4,
            gamma_lr: 2e-4,
            lr_floor: 1e-7,
            val_every: 5000,
            schedule: ScheduleConfig::default(),
            ..StageConfig::new(stage)
        };
        let mut finetune = stage(Stage::Finetune, 300_000);
        finetune.loss.tf = true;
        Profile {
            name: "paper-scale".into(),
            network: NetworkConfig::paper_scale(),
            data: DataConfig {
                seed: 0,
                train_clips: 240,
                val_clips: 4,
                clip: SynthConfig {
                    frames: 30,
                    hr_size: (320, 320),
                    max_motion: 2,
                    degradation: Degradation::default(),
                },
            },
            pretrain: stage(Stage::Pretrain, 300_000),
            sparsify: stage(Stage::Sparsify, 0),
            finetune,
            prune: PruneConfig::default(),
            experiments: ExperimentConfig::default(),
        }
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Profile> {
        let p: Profile = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            Error::Parse {
                path: origin.to_path_buf(),
                detail: match line {
                    Some(l) => format!("line {l}: {}", e.message().trim()),
                    None => e.message().trim().to_string(),
                },
            }
        })?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Profile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Profile::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("profile serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for (cfg, stage) in [
            (&self.pretrain, Stage::Pretrain),
            (&self.sparsify, Stage::Sparsify),
            (&self.finetune, Stage::Finetune),
        ] {
            if cfg.stage != stage {
                return Err(Error::Config(format!(
                    "[{}] section declares stage `{}`",
                    stage.as_str(),
                    cfg.stage.as_str()
                )));
            }
            cfg.validate()?;
        }
        self.network.build().ensure_valid()?;
        let (h, w) = self.data.clip.hr_size;
        if h % SCALE != 0 || w % SCALE != 0 {
            return Err(Error::Config(format!("data.clip.hr_size {h}x{w} not divisible by {SCALE}")));
        }
        self.data.clip.degradation.validate()?;
        let ratio_ok = |r: f64| (0.0..1.0).contains(&r);
        if !ratio_ok(self.prune.ratio) {
            return Err(Error::Config(format!("prune.ratio {} outside [0, 1)", self.prune.ratio)));
        }
        let e = &self.experiments;
        if let Some(r) = e
            .ratios
            .iter()
            .chain(&e.sweep_ratios)
            .chain([&e.ablation_ratio])
            .find(|&&r| !ratio_ok(r))
        {
            return Err(Error::Config(format!("experiment ratio {r} outside [0, 1)")));
        }
        if e.seeds.is_empty() || e.error_frames < 2 || e.error_clips == 0 {
            return Err(Error::Config(
                "experiments need seeds, error_frames >= 2 and error_clips >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Copy whose initialization, data and stage sampling all derive from `seed`.
    pub fn for_seed(&self, seed: u64) -> Profile {
        let mut p = self.clone();
        p.network.seed = seed;
        p.data.seed = self.data.seed.wrapping_add(seed);
        for s in [&mut p.pretrain, &mut p.sparsify, &mut p.finetune] {
            s.seed = seed;
        }
        p
    }

    /// Iterations of all three stages together.
    pub fn total_iterations(&self) -> Result<u64> {
        Ok(self.pretrain.length()? + self.sparsify.length()? + self.finetune.length()?)
    }
}
