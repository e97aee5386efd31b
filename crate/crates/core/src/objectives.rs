//! Training objectives: next-token cross-entropy over the text span, the
//! visual regression term over the image span, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, Result};
use crate::model::{Bound, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ntp: f32,
    pub visual: f32,
    pub total: f32,
    pub beta: f32,
}

/// Masked cross-entropy of the tied language head over text features.
pub fn ntp_loss(params: &ModelParams, tape: &mut Tape, b: &Bound, t_feat: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let logits = params.lm_head(tape, b, t_feat)?;
    tape.cross_entropy(logits, targets, mask)
}

/// Mean squared error between the projected visual features and the frozen
/// auxiliary targets. Only image rows enter, so text rows get no gradient.
pub fn visual_loss(params: &ModelParams, tape: &mut Tape, b: &Bound, v_feat: Var, aux_targets: &Tensor) -> Result<Var> {
    let rows = tape.shape(v_feat)[0];
    if aux_targets.shape() != [rows, params.config().d_aux] {
        return Err(contract(format!(
            "aux targets {:?} do not match {rows} visual rows of width {}",
            aux_targets.shape(),
            params.config().d_aux
        )));
    }
    let pred = params.visual_head(tape, b, v_feat)?;
    let target = tape.leaf_with(aux_targets, false);
    tape.mse_masked(pred, target, &vec![true; rows])
}

/// `ntp + beta · visual`. With `visual` absent the result is `ntp` itself.
pub fn total_loss(tape: &mut Tape, ntp: Var, visual: Option<Var>, beta: f32) -> Result<Var> {
    if !(beta >= 0.0) {
        return Err(contract(format!("beta {beta} must be non-negative")));
    }
    match visual {
        Some(v) => {
            let weighted = tape.scale(v, beta);
            tape.add(ntp, weighted)
        }
        None => Ok(ntp),
    }
}

impl LossBreakdown {
    pub fn read(tape: &Tape, ntp: Var, visual: Option<Var>, total: Var, beta: f32) -> LossBreakdown {
        LossBreakdown {
            ntp: tape.scalar(ntp),
            visual: visual.map_or(0.0, |v| tape.scalar(v)),
            total: tape.scalar(total),
            beta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ntp.is_finite() && self.visual.is_finite() && self.total.is_finite()
    }

    /// Name of the first non-finite term.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        if !self.ntp.is_finite() {
            Some("ntp")
        } else if !self.visual.is_finite() {
            Some("visual")
        } else if !self.total.is_finite() {
            Some("total")
        } else {
            None
        }
    }
}
