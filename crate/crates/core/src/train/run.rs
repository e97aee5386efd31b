use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::sample::{build_pool_with, MultimodalSample};
use super::stage::{StageConfig, StageData};
use crate::blank::BlankPolicy;
use crate::error::{contract, Result};
use crate::model::{ModelConfig, ModelParams, Pathways};
use crate::rng;
use crate::scene::{QaKind, Split};

/// Rows of the ablation ladder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Baseline,
    #[serde(rename = "+visualloss")]
    VisualLoss,
    #[serde(rename = "+blanktokens")]
    BlankTokens,
    #[serde(rename = "+synthetic")]
    Synthetic,
    #[serde(rename = "+independent-weights")]
    IndependentWeights,
    Full,
}

/// Which mechanisms a preset switches on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mechanisms {
    pub visual_loss: bool,
    pub blank_tokens: bool,
    pub synthetic: bool,
    pub pathways: Pathways,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Baseline,
        Preset::VisualLoss,
        Preset::BlankTokens,
        Preset::Synthetic,
        Preset::IndependentWeights,
        Preset::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Baseline => "baseline",
            Preset::VisualLoss => "+visualloss",
            Preset::BlankTokens => "+blanktokens",
            Preset::Synthetic => "+synthetic",
            Preset::IndependentWeights => "+independent-weights",
            Preset::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Preset> {
        let s = s.trim_start_matches('+');
        Preset::ALL.into_iter().find(|p| p.name().trim_start_matches('+') == s)
    }

    /// The ladder is cumulative: each row keeps everything above it, except
    /// that `+synthetic` and `+independent-weights` branch from
    /// `+blanktokens` and `full` combines both.
    pub fn mechanisms(self) -> Mechanisms {
        let (visual_loss, blank_tokens, synthetic, disentangled) = match self {
            Preset::Baseline => (false, false, false, false),
            Preset::VisualLoss => (true, false, false, false),
            Preset::BlankTokens => (true, true, false, false),
            Preset::Synthetic => (true, true, true, false),
            Preset::IndependentWeights => (true, true, false, true),
            Preset::Full => (true, true, true, true),
        };
        Mechanisms {
            visual_loss,
            blank_tokens,
            synthetic,
            pathways: if disentangled { Pathways::Disentangled } else { Pathways::Shared },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub grid_n: usize,
    /// Training scenes with describe questions.
    pub describe_pool: usize,
    /// Training scenes with spatial questions, from a separate seed range.
    pub spatial_pool: usize,
    /// Held-out scenes per evaluation set.
    pub held_out: usize,
    /// Seed of the held-out sets; fixed across runs so they stay comparable.
    pub held_out_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            grid_n: 4,
            describe_pool: 2048,
            spatial_pool: 2048,
            held_out: 256,
            held_out_seed: 7919,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub steps: u64,
    pub lr: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub beta: f32,
    pub prefix_n: usize,
    pub random_fraction: f64,
    /// Spatial share of stage-3 batches for presets with synthetic data.
    pub mixture: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: 0.5,
            prefix_n: 5,
            random_fraction: 0.2,
            mixture: 0.25,
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub batch_size: usize,
    pub eval_every: u64,
    pub workers: usize,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub objectives: ObjectiveConfig,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub stage3: StageSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: Preset::Full,
            seed: 0,
            out_dir: None,
            batch_size: 16,
            eval_every: 100,
            workers: 1,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            objectives: ObjectiveConfig::default(),
            stage1: StageSchedule { steps: 500, lr: 3e-4 },
            stage2: StageSchedule { steps: 2000, lr: 3e-4 },
            stage3: StageSchedule { steps: 2000, lr: 1e-4 },
        }
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule { steps: 500, lr: 3e-4 }
    }
}

impl RunConfig {
    pub fn for_preset(preset: Preset, seed: u64) -> RunConfig {
        RunConfig {
            preset,
            seed,
            ..RunConfig::default()
        }
    }

    /// Model configuration with the preset's pathway choice and the run seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            pathways: self.preset.mechanisms().pathways,
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn stage_config(&self, stage: u8) -> Result<StageConfig> {
        let m = self.preset.mechanisms();
        let sched = match stage {
            1 => &self.stage1,
            2 => &self.stage2,
            3 => &self.stage3,
            s => return Err(contract(format!("unknown stage {s}"))),
        };
        let later = stage > 1;
        let cfg = StageConfig {
            use_visual_loss: later && m.visual_loss,
            use_blank_tokens: later && m.blank_tokens,
            beta: self.objectives.beta,
            blank_policy: BlankPolicy {
                prefix_n: self.objectives.prefix_n,
                random_fraction: self.objectives.random_fraction,
                blank_token_id: self.model.blank_token_id,
                seed: rng::derive(self.seed, &[0xb1a4]),
            },
            mixture: if stage == 3 && m.synthetic { self.objectives.mixture } else { 0.0 },
            steps: sched.steps,
            lr: sched.lr,
            batch_size: self.batch_size,
            seed: rng::derive(self.seed, &[0x57a9e, stage as u64]),
            eval_every: self.eval_every,
            ..StageConfig::new(stage, self.seed)
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Training pools and held-out sets for one run.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: StageData,
    /// Held-out describe questions, for the next-token loss.
    pub held_describe: Vec<MultimodalSample>,
    /// Held-out questions of every kind in equal shares, for accuracy.
    pub held_qa: Vec<MultimodalSample>,
}

impl Datasets {
    pub fn build(params: &ModelParams, run: &RunConfig) -> Result<Datasets> {
        let d = &run.data;
        let w = run.workers;
        let describe_seed = rng::derive(run.seed, &[0xde5c]);
        let spatial_seed = rng::derive(run.seed, &[0x5ba7]);
        let describe = build_pool_with(params, &[QaKind::Describe], d.grid_n, d.describe_pool, Split::Train, describe_seed, w)?;
        let spatial = if d.spatial_pool > 0 {
            build_pool_with(params, &QaKind::SPATIAL, d.grid_n, d.spatial_pool, Split::Train, spatial_seed, w)?
        } else {
            Vec::new()
        };
        let held_describe = build_pool_with(params, &[QaKind::Describe], d.grid_n, d.held_out, Split::HeldOut, d.held_out_seed, w)?;
        let held_qa = build_pool_with(params, &QaKind::ALL, d.grid_n, d.held_out, Split::HeldOut, d.held_out_seed ^ 1, w)?;
        Ok(Datasets {
            train: StageData { describe, spatial },
            held_describe,
            held_qa,
        })
    }
}
