use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::adam::{adam_update, AdamConfig, Moments};
use super::eval::eval_ntp;
use super::sample::MultimodalSample;
use crate::autodiff::Tape;
use crate::blank::{blank_inputs_partial, BlankPolicy};
use crate::error::{contract, io_err, Error, Result};
use crate::model::{Group, ModelParams};
use crate::objectives::{ntp_loss, total_loss, visual_loss, LossBreakdown};
use crate::rng;

pub const TRAINABLE_STAGE1: [Group; 1] = [Group::Connector];
pub const TRAINABLE_LATER: [Group; 4] = [Group::Vision, Group::Connector, Group::Backbone, Group::VisualHead];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub trainable: Vec<Group>,
    pub use_visual_loss: bool,
    pub use_blank_tokens: bool,
    pub beta: f32,
    pub blank_policy: BlankPolicy,
    /// Share of each batch drawn from the spatial question pool.
    pub mixture: f64,
    pub steps: u64,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Held-out loss is logged every this many steps; 0 disables it.
    pub eval_every: u64,
    pub adam: AdamConfig,
}

impl StageConfig {
    /// Defaults for one stage. Stage 1 aligns the connector only; stages 2
    /// and 3 train everything except the auxiliary encoder.
    pub fn new(stage: u8, seed: u64) -> StageConfig {
        let later = stage > 1;
        StageConfig {
            stage,
            trainable: if later { TRAINABLE_LATER.to_vec() } else { TRAINABLE_STAGE1.to_vec() },
            use_visual_loss: false,
            use_blank_tokens: false,
            beta: 0.5,
            blank_policy: BlankPolicy {
                seed,
                ..BlankPolicy::default()
            },
            mixture: if stage == 3 { 0.25 } else { 0.0 },
            steps: if later { 2000 } else { 500 },
            lr: if stage == 3 { 1e-4 } else { 3e-4 },
            batch_size: 16,
            seed,
            eval_every: 0,
            adam: AdamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut groups = self.trainable.clone();
        groups.sort_by_key(|g| *g as u8);
        groups.dedup();
        match self.stage {
            1 => {
                if groups != TRAINABLE_STAGE1 {
                    return Err(contract(format!("stage 1 trains the connector only, got {:?}", self.trainable)));
                }
                if self.use_visual_loss || self.use_blank_tokens {
                    return Err(contract("stage 1 uses neither the visual loss nor blanking"));
                }
            }
            2 | 3 => {
                if groups != TRAINABLE_LATER {
                    return Err(contract(format!(
                        "stages 2-3 train vision, connector, backbone and heads, got {:?}",
                        self.trainable
                    )));
                }
            }
            s => return Err(contract(format!("unknown stage {s}"))),
        }
        if !(self.beta >= 0.0) {
            return Err(contract(format!("beta {} must be non-negative", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.mixture) {
            return Err(contract(format!("mixture {} outside [0, 1]", self.mixture)));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(contract("lr must be positive"));
        }
        self.blank_policy.validate()
    }
}

/// Training pools for one stage.
#[derive(Clone, Debug, Default)]
pub struct StageData {
    pub describe: Vec<MultimodalSample>,
    pub spatial: Vec<MultimodalSample>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    /// Adam moments, present exactly for the current stage's trainable tensors.
    pub moments: Vec<Option<Moments>>,
    pub stage: u8,
    /// Updates taken in the current stage.
    pub stage_step: u64,
    /// Updates taken over all stages.
    pub step: u64,
    pub history: Vec<LossBreakdown>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> TrainState {
        let n = params.len();
        TrainState {
            params,
            moments: vec![None; n],
            stage: 0,
            stage_step: 0,
            step: 0,
            history: Vec::new(),
        }
    }

    /// Enters `cfg.stage` with fresh moments for its trainable set.
    pub fn begin_stage(&mut self, cfg: &StageConfig) -> Result<()> {
        cfg.validate()?;
        if cfg.stage <= self.stage {
            return Err(contract(format!(
                "cannot enter stage {} after stage {}",
                cfg.stage, self.stage
            )));
        }
        self.stage = cfg.stage;
        self.stage_step = 0;
        self.moments = self
            .params
            .params()
            .iter()
            .map(|p| (p.group != Group::Aux && cfg.trainable.contains(&p.group)).then(|| Moments::zeros(p.tensor.numel())))
            .collect();
        Ok(())
    }
}

fn slot_rng(cfg: &StageConfig, step: u64, slot: usize) -> rng::Rng {
    rng::rng(cfg.seed, &[0x5a3b1e, cfg.stage as u64, step, slot as u64])
}

/// Whether batch slot `slot` of `step` draws from the spatial pool, and the
/// pool index it takes. Depends only on the seed, stage, step and slot.
pub fn draw_slot(cfg: &StageConfig, data: &StageData, step: u64, slot: usize) -> Result<(bool, usize)> {
    let mut r = slot_rng(cfg, step, slot);
    let spatial = r.random::<f64>() < cfg.mixture;
    let pool = if spatial { &data.spatial } else { &data.describe };
    if pool.is_empty() {
        return Err(contract(format!(
            "stage {} needs a non-empty {} pool",
            cfg.stage,
            if spatial { "spatial" } else { "describe" }
        )));
    }
    Ok((spatial, r.random_range(0..pool.len())))
}

pub fn draw_batch<'a>(cfg: &StageConfig, data: &'a StageData, step: u64) -> Result<Vec<&'a MultimodalSample>> {
    (0..cfg.batch_size)
        .map(|slot| {
            let (spatial, i) = draw_slot(cfg, data, step, slot)?;
            Ok(if spatial { &data.spatial[i] } else { &data.describe[i] })
        })
        .collect()
}

/// One update: optional blanking, forward, losses, backward and an Adam step
/// on the stage's trainable tensors.
pub fn train_step(state: &mut TrainState, batch: &[&MultimodalSample], cfg: &StageConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(contract("empty batch"));
    }
    if state.stage != cfg.stage {
        return Err(contract(format!(
            "state is in stage {}, config is for stage {}",
            state.stage, cfg.stage
        )));
    }
    let inputs: Vec<Vec<usize>> = if cfg.use_blank_tokens {
        batch
            .iter()
            .enumerate()
            .map(|(slot, s)| {
                let stream = rng::derive(cfg.stage as u64, &[state.stage_step, slot as u64]);
                blank_inputs_partial(&s.input, &cfg.blank_policy, &s.protected, stream).map(|(t, _)| t)
            })
            .collect::<Result<_>>()?
    } else {
        batch.iter().map(|s| s.input.clone()).collect()
    };

    let params = &state.params;
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, &cfg.trainable);
    let patches: Vec<f32> = batch.iter().flat_map(|s| s.patches.iter().copied()).collect();
    let texts: Vec<&[usize]> = inputs.iter().map(Vec::as_slice).collect();
    let feats = params.forward(&mut tape, &b, Some(&patches), &texts)?;
    let targets: Vec<usize> = batch.iter().flat_map(|s| s.target.iter().copied()).collect();
    let mask: Vec<bool> = batch.iter().flat_map(|s| s.loss_mask.iter().copied()).collect();
    let t_feat = feats.t_feat.ok_or_else(|| contract("batch has no text"))?;
    let ntp = ntp_loss(params, &mut tape, &b, t_feat, &targets, &mask)?;
    let visual = if cfg.use_visual_loss {
        let aux = params.aux_targets(&patches)?;
        let v_feat = feats.v_feat.expect("images present");
        Some(visual_loss(params, &mut tape, &b, v_feat, &aux)?)
    } else {
        None
    };
    let total = total_loss(&mut tape, ntp, visual, cfg.beta)?;
    let losses = LossBreakdown::read(&tape, ntp, visual, total, cfg.beta);
    if let Some(term) = losses.non_finite_term() {
        return Err(Error::NonFinite { term, step: state.step });
    }
    tape.backward(total)?;

    let t = state.stage_step + 1;
    let grads: Vec<Option<Vec<f32>>> = (0..state.params.len())
        .map(|i| state.moments[i].as_ref().and(tape.grad(b[i]).map(<[f32]>::to_vec)))
        .collect();
    drop(tape);
    for (i, g) in grads.iter().enumerate() {
        if let Some(m) = state.moments[i].as_mut() {
            let p = state.params.tensor_mut(i).data_mut();
            adam_update(&cfg.adam, cfg.lr, t, p, g.as_deref(), m);
        }
    }
    state.stage_step = t;
    state.step += 1;
    state.history.push(losses);
    Ok(losses)
}

/// Where `run_stage` reports progress.
#[derive(Default)]
pub struct StageSink<'a> {
    pub eval: Option<&'a [MultimodalSample]>,
    pub metrics: Option<&'a mut dyn Write>,
    pub metrics_path: Option<std::path::PathBuf>,
}

/// Runs the stage until `cfg.steps` updates have been taken, entering the
/// stage first if needed. A state already inside the stage resumes.
pub fn run_stage(state: &mut TrainState, data: &StageData, cfg: &StageConfig, sink: &mut StageSink<'_>) -> Result<()> {
    run_stage_until(state, data, cfg, cfg.steps, sink)
}

/// As [`run_stage`], stopping once `until` updates of the stage are done.
pub fn run_stage_until(state: &mut TrainState, data: &StageData, cfg: &StageConfig, until: u64, sink: &mut StageSink<'_>) -> Result<()> {
    cfg.validate()?;
    if state.stage != cfg.stage {
        state.begin_stage(cfg)?;
    }
    let until = until.min(cfg.steps);
    while state.stage_step < until {
        let batch = draw_batch(cfg, data, state.stage_step)?;
        let losses = train_step(state, &batch, cfg)?;
        let mut line = serde_json::json!({
            "stage": cfg.stage,
            "step": state.stage_step,
            "global_step": state.step,
            "ntp": losses.ntp,
            "visual": losses.visual,
            "total": losses.total,
        });
        if let Some(eval) = sink.eval {
            if cfg.eval_every > 0 && (state.stage_step % cfg.eval_every == 0 || state.stage_step == cfg.steps) {
                let e = eval_ntp(&state.params, eval)?;
                line["eval_ntp"] = serde_json::json!(e);
                log::info!("stage {} step {}: ntp {:.4} eval_ntp {:.4}", cfg.stage, state.stage_step, losses.ntp, e);
            }
        }
        if let Some(w) = sink.metrics.as_mut() {
            let path = sink.metrics_path.clone().unwrap_or_default();
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
    }
    Ok(())
}
