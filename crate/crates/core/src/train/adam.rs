use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(n: usize) -> Moments {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Bias-corrected Adam update for step `t` (1-based). A missing gradient is
/// treated as zero.
pub fn adam_update(cfg: &AdamConfig, lr: f32, t: u64, param: &mut [f32], grad: Option<&[f32]>, mom: &mut Moments) {
    let c1 = 1.0 - (cfg.beta1 as f64).powi(t as i32);
    let c2 = 1.0 - (cfg.beta2 as f64).powi(t as i32);
    let (c1, c2) = (c1 as f32, c2 as f32);
    for i in 0..param.len() {
        let g = grad.map_or(0.0, |g| g[i]) + cfg.weight_decay * param[i];
        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = mom.m[i] / c1;
        let vhat = mom.v[i] / c2;
        param[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}
