//! Partial input blanking: a fixed prefix plus a seeded random share of the
//! text inputs are replaced by a reserved blank id. Targets are never touched.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng;
use crate::scene::vocab;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlankPolicy {
    pub prefix_n: usize,
    pub random_fraction: f64,
    pub blank_token_id: usize,
    pub seed: u64,
}

impl Default for BlankPolicy {
    fn default() -> Self {
        BlankPolicy {
            prefix_n: 5,
            random_fraction: 0.20,
            blank_token_id: vocab::BLANK,
            seed: 0,
        }
    }
}

impl BlankPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.random_fraction) {
            return Err(contract(format!("random_fraction {} outside [0, 1]", self.random_fraction)));
        }
        Ok(())
    }
}

/// Returns the blanked inputs and the keep mask (`true` = left as is).
///
/// `stream` selects the random draw; training passes a value derived from
/// the step and batch slot so every step sees a fresh mask.
pub fn blank_inputs_partial(t_in: &[usize], policy: &BlankPolicy, protected: &[bool], stream: u64) -> Result<(Vec<usize>, Vec<bool>)> {
    if protected.len() != t_in.len() {
        return Err(contract(format!(
            "protected mask has {} entries for {} tokens",
            protected.len(),
            t_in.len()
        )));
    }
    policy.validate()?;
    let mut r = rng::rng(policy.seed, &[0xb1a2c, stream]);
    let mut out = t_in.to_vec();
    let mut keep = vec![true; t_in.len()];
    for i in 0..t_in.len() {
        let blank = if i < policy.prefix_n {
            true
        } else {
            // one draw per position keeps later positions stable if earlier ones are protected
            r.random::<f64>() < policy.random_fraction
        };
        if blank && !protected[i] {
            out[i] = policy.blank_token_id;
            keep[i] = false;
        }
    }
    Ok((out, keep))
}
