//! The full learnable state: one projection head per modality plus the
//! shared log-temperature.

use crate::data::ModalitySpec;
use crate::encoder::{init_projection, CoordinationSpace, ProjectionParams};
use crate::error::{Error, Result};
use crate::losses::LossConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// One head per modality, in dataset order.
    pub mods: Vec<ProjectionParams>,
    /// Shared log temperature (tau = exp(log_tau), clamped to tau_max).
    pub log_tau: f64,
}

impl ModelParams {
    /// Initialize heads for the given modalities. Each head draws from its
    /// own stream derived from `seed` and the modality name, so the result
    /// does not depend on modality order.
    pub fn init(
        modalities: &[ModalitySpec],
        space: &CoordinationSpace,
        seed: u64,
        log_tau: f64,
    ) -> Result<ModelParams> {
        let mods = modalities
            .iter()
            .map(|spec| init_projection(spec, space, modality_seed(seed, &spec.name)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelParams { mods, log_tau })
    }

    pub fn modality(&self, name: &str) -> Option<&ProjectionParams> {
        self.mods.iter().find(|p| p.modality == name)
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.mods.iter().position(|p| p.modality == name)
    }

    /// Effective temperature and whether the clamp was hit (in which case
    /// the gradient through log_tau vanishes).
    pub fn effective_tau(&self, cfg: &LossConfig) -> (f64, bool) {
        let tau = self.log_tau.exp();
        if tau > cfg.tau_max {
            (cfg.tau_max, true)
        } else {
            (tau, false)
        }
    }

    pub fn validate_finite(&self) -> Result<()> {
        for p in &self.mods {
            for name in crate::encoder::TENSOR_NAMES {
                if p.tensor(name).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{}.{}", p.modality, name)));
                }
            }
        }
        if !self.log_tau.is_finite() {
            return Err(Error::NonFinite("log_tau".into()));
        }
        Ok(())
    }
}

/// Mix a modality name into the base seed (FNV-1a over the name bytes).
pub fn modality_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed ^ h
}
