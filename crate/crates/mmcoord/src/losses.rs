//! Pairwise coordination losses.
//!
//! Two families over the B x B similarity block of each modality pair:
//! a symmetric temperature-scaled cross-entropy (contrastive), and a
//! Frobenius-norm regression toward a binary target raised to the power
//! 2 + rho. Both accept presence masks so samples with missing views drop
//! out instead of polluting the objective. The total loss sums every
//! unordered modality pair.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::encoder::{encode_with_cache, EncodeCache};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::similarity::{
    build_mask, normalize_rows, row_dot_products, target_for_batch, Mask, MaskKind,
    SimilarityMatrix, TargetMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossFamily {
    Pcmc,
    Pcmr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    Fixed,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum CeReduction {
    /// Mean over contributing rows (batch-size invariant learning rates).
    Mean,
    /// Plain sum over contributing rows.
    Sum,
}

/// Initial temperature 1/0.07, the usual contrastive-pretraining choice.
pub const DEFAULT_LOG_TAU: f64 = 2.6592600369327783; // ln(1/0.07)

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub family: LossFamily,
    pub tau_mode: TauMode,
    /// Initial (and, in fixed mode, permanent) log temperature.
    pub log_tau: f64,
    pub tau_max: f64,
    /// Exponent modulator: the regression loss is ||residual||_F^(2+rho).
    pub rho: f64,
    /// Same-view similarity threshold for the binary target.
    pub target_threshold: f64,
    pub reduction: CeReduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            family: LossFamily::Pcmc,
            tau_mode: TauMode::Learned,
            log_tau: DEFAULT_LOG_TAU,
            tau_max: 100.0,
            rho: 1.0,
            target_threshold: 0.99,
            reduction: CeReduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let tau = self.log_tau.exp();
        if !(tau > 0.0 && tau <= self.tau_max) {
            return Err(Error::Config(format!(
                "exp(log_tau) = {tau} must lie in (0, tau_max = {}]",
                self.tau_max
            )));
        }
        if self.rho < 0.0 {
            return Err(Error::Config("rho must be non-negative".into()));
        }
        if !(self.target_threshold > 0.0 && self.target_threshold < 1.0) {
            return Err(Error::Config(
                "target threshold must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Temperature-scaled cross-entropy over one similarity block.
///
/// Logits are `tau * S` plus the additive mask. A row contributes iff its
/// own diagonal entry is unmasked (the sample has both the query and the
/// db view); masked columns are excluded from the softmax.
pub fn ce_loss(
    s: &SimilarityMatrix,
    tau: f64,
    mask: Option<&Mask>,
    reduction: CeReduction,
) -> Result<f64> {
    let mask_values = check_contrastive(s, mask)?;
    ce_with_grad(&s.values, tau, mask_values, reduction, false).map(|(l, _)| l)
}

/// Symmetric pair loss: mean of the cross-entropy in both retrieval
/// directions.
pub fn pcmc_pair_loss(
    s: &SimilarityMatrix,
    tau: f64,
    mask: Option<&Mask>,
    reduction: CeReduction,
) -> Result<f64> {
    let mask_values = check_contrastive(s, mask)?;
    pcmc_with_grad(&s.values, tau, mask_values, reduction, false).map(|(l, _)| l)
}

/// Regression pair loss: `||mask . (S - T)||_F^(2+rho)`.
pub fn pcmr_pair_loss(
    s: &SimilarityMatrix,
    target: &TargetMatrix,
    rho: f64,
    mask: Option<&Mask>,
) -> Result<f64> {
    let mask_values = match mask {
        Some(m) if m.kind != MaskKind::Regression => {
            return Err(Error::Config(
                "regression loss needs a regression (multiplicative) mask".into(),
            ))
        }
        m => m.map(|m| &m.values),
    };
    pcmr_with_grad(&s.values, &target.values, rho, mask_values, false).map(|(l, _)| l)
}

fn check_contrastive<'a>(
    s: &SimilarityMatrix,
    mask: Option<&'a Mask>,
) -> Result<Option<&'a Array2<f64>>> {
    if s.values.nrows() != s.values.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "contrastive loss needs a square block, got {}x{}",
            s.values.nrows(),
            s.values.ncols()
        )));
    }
    match mask {
        Some(m) if m.kind != MaskKind::Contrastive => Err(Error::Config(
            "contrastive loss needs a contrastive (additive) mask".into(),
        )),
        Some(m) if m.values.dim() != s.values.dim() => Err(Error::ShapeMismatch(
            "mask shape differs from similarity block".into(),
        )),
        m => Ok(m.map(|m| &m.values)),
    }
}

pub(crate) fn ce_with_grad(
    s: &Array2<f64>,
    tau: f64,
    mask: Option<&Array2<f64>>,
    reduction: CeReduction,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let b = s.nrows();
    if b < 2 {
        return Err(Error::Config(
            "cross-entropy needs a batch of at least 2".into(),
        ));
    }
    let contributes = |p: usize| mask.map_or(true, |m| m[[p, p]] == 0.0);
    let n_contrib = (0..b).filter(|&p| contributes(p)).count();
    let mut grad = want_grad.then(|| Array2::zeros((b, b)));
    if n_contrib == 0 {
        return Ok((0.0, grad));
    }
    let weight = match reduction {
        CeReduction::Mean => 1.0 / n_contrib as f64,
        CeReduction::Sum => 1.0,
    };

    let mut loss = 0.0;
    let mut logits = vec![0.0; b];
    for p in 0..b {
        if !contributes(p) {
            continue;
        }
        let mut max = f64::NEG_INFINITY;
        for q in 0..b {
            let masked = mask.is_some_and(|m| m[[p, q]] == f64::NEG_INFINITY);
            logits[q] = if masked {
                f64::NEG_INFINITY
            } else {
                tau * s[[p, q]]
            };
            if logits[q].is_nan() {
                return Err(Error::NonFinite(format!(
                    "cross-entropy logit at ({p}, {q})"
                )));
            }
            max = max.max(logits[q]);
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::Config(format!(
                "cross-entropy row {p} has no unmasked columns"
            )));
        }
        let sum_exp: f64 = logits
            .iter()
            .filter(|l| l.is_finite())
            .map(|l| (l - max).exp())
            .sum();
        let lse = max + sum_exp.ln();
        loss += weight * (lse - logits[p]);
        if let Some(g) = grad.as_mut() {
            for q in 0..b {
                if logits[q].is_finite() {
                    let softmax = (logits[q] - lse).exp();
                    let delta = if q == p { 1.0 } else { 0.0 };
                    g[[p, q]] += tau * weight * (softmax - delta);
                }
            }
        }
    }
    Ok((loss, grad))
}

pub(crate) fn pcmc_with_grad(
    s: &Array2<f64>,
    tau: f64,
    mask: Option<&Array2<f64>>,
    reduction: CeReduction,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let st = s.t().to_owned();
    let mask_t = mask.map(|m| m.t().to_owned());
    let (l1, g1) = ce_with_grad(s, tau, mask, reduction, want_grad)?;
    let (l2, g2) = ce_with_grad(&st, tau, mask_t.as_ref(), reduction, want_grad)?;
    let loss = 0.5 * (l1 + l2);
    let grad = match (g1, g2) {
        (Some(g1), Some(g2)) => Some(0.5 * (&g1 + &g2.t())),
        _ => None,
    };
    Ok((loss, grad))
}

pub(crate) fn pcmr_with_grad(
    s: &Array2<f64>,
    target: &Array2<f64>,
    rho: f64,
    mask: Option<&Array2<f64>>,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    if s.dim() != target.dim() {
        return Err(Error::ShapeMismatch(format!(
            "similarity block {:?} vs target {:?}",
            s.dim(),
            target.dim()
        )));
    }
    if let Some(m) = mask {
        if m.dim() != s.dim() {
            return Err(Error::ShapeMismatch(
                "mask shape differs from similarity block".into(),
            ));
        }
    }
    let mut residual = s - target;
    if let Some(m) = mask {
        residual *= m;
    }
    let fro2: f64 = residual.iter().map(|v| v * v).sum();
    let loss = fro2.powf(0.5 * (2.0 + rho));
    let grad = want_grad.then(|| {
        let scale = if fro2 > 0.0 {
            (2.0 + rho) * fro2.powf(0.5 * rho)
        } else {
            0.0
        };
        residual.mapv(|v| scale * v)
    });
    Ok((loss, grad))
}

/// One term of the pairwise total.
#[derive(Debug, Clone, Serialize)]
pub struct PairTerm {
    pub modality_a: String,
    pub modality_b: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TotalLoss {
    pub total: f64,
    pub pairs: Vec<PairTerm>,
}

/// Everything the loss (and its gradients) needs from one encoded batch.
pub(crate) struct EncodedBatch {
    /// Row-normalized projections, one B x D block per modality.
    pub zn: Vec<Array2<f64>>,
    /// Guarded row norms.
    pub norms: Vec<ndarray::Array1<f64>>,
    pub caches: Option<Vec<EncodeCache>>,
    /// Binary target (regression family only), built on raw inputs.
    pub target: Option<TargetMatrix>,
    pub tau: f64,
    pub tau_clamped: bool,
}

pub(crate) fn encode_batch(
    params: &ModelParams,
    batch: &Batch,
    cfg: &LossConfig,
    with_cache: bool,
) -> Result<EncodedBatch> {
    cfg.validate()?;
    let m = batch.n_modalities();
    if m < 2 {
        return Err(Error::Config(
            "pairwise losses need at least two modalities".into(),
        ));
    }
    if params.mods.len() != m {
        return Err(Error::ModalityMismatch(format!(
            "{} parameter heads vs {} batch modalities",
            params.mods.len(),
            m
        )));
    }
    if batch.len() < 2 {
        return Err(Error::Config("losses need a batch of at least 2".into()));
    }
    let mut zn = Vec::with_capacity(m);
    let mut norms = Vec::with_capacity(m);
    let mut caches = with_cache.then(Vec::new);
    for i in 0..m {
        if params.mods[i].modality != batch.modality_names[i] {
            return Err(Error::ModalityMismatch(format!(
                "head '{}' does not match batch modality '{}'",
                params.mods[i].modality, batch.modality_names[i]
            )));
        }
        let (zi, cache) = encode_with_cache(&params.mods[i], &batch.inputs[i], &batch.presence[i])?;
        let (zni, normi) = normalize_rows(&zi);
        zn.push(zni);
        norms.push(normi);
        if let Some(c) = caches.as_mut() {
            c.push(cache);
        }
    }
    let target = match cfg.family {
        LossFamily::Pcmr => Some(target_for_batch(batch, cfg.target_threshold)?),
        LossFamily::Pcmc => None,
    };
    let (tau, tau_clamped) = params.effective_tau(cfg);
    Ok(EncodedBatch {
        zn,
        norms,
        caches,
        target,
        tau,
        tau_clamped,
    })
}

/// Loss for the (i, j) pair of an encoded batch, with the gradient w.r.t.
/// the similarity block when requested.
pub(crate) fn pair_loss(
    enc: &EncodedBatch,
    batch: &Batch,
    cfg: &LossConfig,
    i: usize,
    j: usize,
    want_grad: bool,
) -> Result<(f64, Array2<f64>, Option<Array2<f64>>)> {
    let s = row_dot_products(&enc.zn[i], &enc.zn[j]);
    let any_missing = batch.presence[i].iter().chain(&batch.presence[j]).any(|p| !p);
    let (loss, ds) = match cfg.family {
        LossFamily::Pcmc => {
            let mask = any_missing
                .then(|| build_mask(&batch.presence[i], &batch.presence[j], MaskKind::Contrastive));
            pcmc_with_grad(&s, enc.tau, mask.as_ref().map(|m| &m.values), cfg.reduction, want_grad)?
        }
        LossFamily::Pcmr => {
            let mask = any_missing
                .then(|| build_mask(&batch.presence[i], &batch.presence[j], MaskKind::Regression));
            let target = enc.target.as_ref().expect("target built for pcmr");
            pcmr_with_grad(&s, &target.values, cfg.rho, mask.as_ref().map(|m| &m.values), want_grad)?
        }
    };
    Ok((loss, s, ds))
}

/// Total pairwise loss over all C(M, 2) modality pairs of a batch, with a
/// labeled per-pair breakdown.
pub fn total_loss(params: &ModelParams, batch: &Batch, cfg: &LossConfig) -> Result<TotalLoss> {
    let enc = encode_batch(params, batch, cfg, false)?;
    let m = batch.n_modalities();
    let mut total = 0.0;
    let mut pairs = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            let (loss, _, _) = pair_loss(&enc, batch, cfg, i, j, false)?;
            total += loss;
            pairs.push(PairTerm {
                modality_a: batch.modality_names[i].clone(),
                modality_b: batch.modality_names[j].clone(),
                value: loss,
            });
        }
    }
    Ok(TotalLoss { total, pairs })
}
