//! Adam with decoupled weight decay and the cosine learning-rate schedule.
//!
//! Weight decay touches only the weight matrices; biases, the LayerNorm
//! affine parameters, and the log temperature are excluded. Decay is applied
//! before the moment update (decoupled), or folded into the gradient in
//! plain-L2 mode.

use serde::{Deserialize, Serialize};

use crate::encoder::ModalityGrads;
use crate::grad::Gradients;
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// AdamW-style: shrink weights before the Adam update.
    Decoupled,
    /// Plain L2: add `wd * w` to the gradient.
    L2,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.2,
            decay_mode: DecayMode::Decoupled,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub m: Vec<ModalityGrads>,
    pub v: Vec<ModalityGrads>,
    pub m_log_tau: f64,
    pub v_log_tau: f64,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ModelParams, cfg: OptimConfig) -> OptimState {
        OptimState {
            cfg,
            m: params.mods.iter().map(ModalityGrads::zeros_like).collect(),
            v: params.mods.iter().map(ModalityGrads::zeros_like).collect(),
            m_log_tau: 0.0,
            v_log_tau: 0.0,
            step: 0,
        }
    }
}

/// Tensors subject to weight decay.
const DECAYED: [&str; 3] = ["w0", "w1", "w2"];

fn adam_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &OptimConfig,
    lr: f64,
    bias1: f64,
    bias2: f64,
    decayed: bool,
) {
    let wd = cfg.weight_decay;
    for i in 0..p.len() {
        let mut grad = g[i];
        if decayed && wd != 0.0 {
            match cfg.decay_mode {
                DecayMode::Decoupled => p[i] -= lr * wd * p[i],
                DecayMode::L2 => grad += wd * p[i],
            }
        }
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad * grad;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// One Adam step with bias correction over the whole model.
pub fn adam_step(state: &mut OptimState, params: &mut ModelParams, grads: &Gradients, lr: f64) {
    assert!(lr >= 0.0, "learning rate must be non-negative");
    state.step += 1;
    let cfg = state.cfg;
    let bias1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, p) in params.mods.iter_mut().enumerate() {
        for name in crate::encoder::TENSOR_NAMES {
            let decayed = DECAYED.contains(&name);
            adam_update(
                p.tensor_mut(name),
                grads.mods[i].tensor(name),
                state.m[i].tensor_mut(name),
                state.v[i].tensor_mut(name),
                &cfg,
                lr,
                bias1,
                bias2,
                decayed,
            );
        }
    }
    let mut log_tau = [params.log_tau];
    let mut m = [state.m_log_tau];
    let mut v = [state.v_log_tau];
    adam_update(
        &mut log_tau,
        &[grads.d_log_tau],
        &mut m,
        &mut v,
        &cfg,
        lr,
        bias1,
        bias2,
        false,
    );
    params.log_tau = log_tau[0];
    state.m_log_tau = m[0];
    state.v_log_tau = v[0];
}

/// Cosine schedule without warmup: `0.5 * lr_max * (1 + cos(pi * progress))`.
pub fn cosine_lr(progress: f64, lr_max: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&progress));
    0.5 * lr_max * (1.0 + (std::f64::consts::PI * progress).cos())
}
