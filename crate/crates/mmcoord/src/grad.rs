//! Exact gradients of the total pairwise loss with respect to every
//! projection tensor and the log temperature, plus a central
//! finite-difference checker used to verify them.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Batch;
use crate::encoder::{encode_backward, ModalityGrads, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::losses::{encode_batch, pair_loss, total_loss, LossConfig, LossFamily, TauMode};
use crate::model::ModelParams;
use crate::similarity::COSINE_EPS;

/// Gradient tensors mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub mods: Vec<ModalityGrads>,
    pub d_log_tau: f64,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Gradients {
        Gradients {
            mods: params.mods.iter().map(ModalityGrads::zeros_like).collect(),
            d_log_tau: 0.0,
        }
    }

    /// Name of the first non-finite tensor, if any.
    fn first_non_finite(&self, params: &ModelParams) -> Option<String> {
        for (g, p) in self.mods.iter().zip(&params.mods) {
            for name in TENSOR_NAMES {
                if g.tensor(name).iter().any(|v| !v.is_finite()) {
                    return Some(format!("grad {}.{name}", p.modality));
                }
            }
        }
        (!self.d_log_tau.is_finite()).then(|| "grad log_tau".to_string())
    }
}

/// Backward pass of `S = An . Bn^T` for row-normalized `An`, `Bn` with
/// guarded norms. Accumulates into the un-normalized projection gradients.
fn cosine_backward(
    ds: &Array2<f64>,
    s: &Array2<f64>,
    zn_a: &Array2<f64>,
    zn_b: &Array2<f64>,
    norms_a: &Array1<f64>,
    norms_b: &Array1<f64>,
    dz_a: &mut Array2<f64>,
    dz_b: &mut Array2<f64>,
) {
    let weighted = ds * s;
    let gb = ds.dot(zn_b);
    for (p, mut row) in dz_a.rows_mut().into_iter().enumerate() {
        let alpha = norms_a[p];
        let row_ws: f64 = weighted.row(p).sum();
        let clamped = alpha <= COSINE_EPS;
        for d in 0..row.len() {
            let mut g = gb[[p, d]];
            if !clamped {
                g -= row_ws * zn_a[[p, d]];
            }
            row[d] += g / alpha;
        }
    }
    let ga = ds.t().dot(zn_a);
    for (q, mut row) in dz_b.rows_mut().into_iter().enumerate() {
        let beta = norms_b[q];
        let col_ws: f64 = weighted.column(q).sum();
        let clamped = beta <= COSINE_EPS;
        for d in 0..row.len() {
            let mut g = ga[[q, d]];
            if !clamped {
                g -= col_ws * zn_b[[q, d]];
            }
            row[d] += g / beta;
        }
    }
}

/// Loss of a batch together with exact parameter gradients.
///
/// The loss value is computed along the same code path as
/// [`total_loss`](crate::losses::total_loss), so the two agree bit for bit.
/// `d_log_tau` is zero in fixed-temperature mode, for the regression family,
/// and when the temperature sits at its clamp.
pub fn grad_total_loss(
    params: &ModelParams,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<(f64, Gradients)> {
    let enc = encode_batch(params, batch, cfg, true)?;
    let caches = enc.caches.as_ref().expect("caches requested");
    let m = batch.n_modalities();
    let b = batch.len();
    let d = params.mods[0].output_dim();

    let mut grads = Gradients::zeros_like(params);
    let mut dz: Vec<Array2<f64>> = (0..m).map(|_| Array2::zeros((b, d))).collect();
    let mut total = 0.0;

    let tau_learned =
        cfg.tau_mode == TauMode::Learned && cfg.family == LossFamily::Pcmc && !enc.tau_clamped;
    for i in 0..m {
        for j in (i + 1)..m {
            let (loss, s, ds) = pair_loss(&enc, batch, cfg, i, j, true)?;
            let ds = ds.expect("gradient requested");
            total += loss;
            if tau_learned {
                grads.d_log_tau += (&ds * &s).sum();
            }
            let (dz_i, dz_j) = split_two(&mut dz, i, j);
            cosine_backward(
                &ds,
                &s,
                &enc.zn[i],
                &enc.zn[j],
                &enc.norms[i],
                &enc.norms[j],
                dz_i,
                dz_j,
            );
        }
    }

    for i in 0..m {
        encode_backward(
            &params.mods[i],
            &batch.inputs[i],
            &batch.presence[i],
            &caches[i],
            &dz[i],
            &mut grads.mods[i],
        );
    }

    if !total.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    if let Some(name) = grads.first_non_finite(params) {
        return Err(Error::NonFinite(name));
    }
    Ok((total, grads))
}

fn split_two<T>(items: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert!(i < j);
    let (left, right) = items.split_at_mut(j);
    (&mut left[i], &mut right[0])
}

/// Address of one scalar coordinate in the flattened parameter vector.
enum Coord {
    Tensor {
        modality: usize,
        name: &'static str,
        offset: usize,
    },
    LogTau,
}

fn coordinate_layout(params: &ModelParams, include_log_tau: bool) -> Vec<(usize, &'static str, usize)> {
    let mut layout = Vec::new();
    for (m, p) in params.mods.iter().enumerate() {
        for name in TENSOR_NAMES {
            layout.push((m, name, p.tensor(name).len()));
        }
    }
    if include_log_tau {
        layout.push((usize::MAX, "log_tau", 1));
    }
    layout
}

fn resolve(layout: &[(usize, &'static str, usize)], mut idx: usize) -> Coord {
    for &(m, name, len) in layout {
        if idx < len {
            return if m == usize::MAX {
                Coord::LogTau
            } else {
                Coord::Tensor {
                    modality: m,
                    name,
                    offset: idx,
                }
            };
        }
        idx -= len;
    }
    unreachable!("coordinate out of range");
}

fn read_coord(params: &ModelParams, coord: &Coord) -> f64 {
    match coord {
        Coord::Tensor {
            modality,
            name,
            offset,
        } => params.mods[*modality].tensor(name)[*offset],
        Coord::LogTau => params.log_tau,
    }
}

fn write_coord(params: &mut ModelParams, coord: &Coord, value: f64) {
    match coord {
        Coord::Tensor {
            modality,
            name,
            offset,
        } => params.mods[*modality].tensor_mut(name)[*offset] = value,
        Coord::LogTau => params.log_tau = value,
    }
}

fn analytic_coord(grads: &Gradients, coord: &Coord) -> f64 {
    match coord {
        Coord::Tensor {
            modality,
            name,
            offset,
        } => grads.mods[*modality].tensor(name)[*offset],
        Coord::LogTau => grads.d_log_tau,
    }
}

/// Central finite differences against the analytic gradients.
///
/// Checks every coordinate, or a seeded random subsample of at least 200
/// when `max_coords` is given. Returns the maximum relative error with the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check(
    params: &ModelParams,
    batch: &Batch,
    cfg: &LossConfig,
    h: f64,
    seed: u64,
    max_coords: Option<usize>,
) -> Result<f64> {
    let include_log_tau = cfg.tau_mode == TauMode::Learned && cfg.family == LossFamily::Pcmc;
    let layout = coordinate_layout(params, include_log_tau);
    let total: usize = layout.iter().map(|(_, _, len)| len).sum();

    let indices: Vec<usize> = match max_coords {
        Some(limit) if total > limit.max(200) => {
            let take = limit.max(200);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, total, take).into_vec()
        }
        _ => (0..total).collect(),
    };

    let (_, grads) = grad_total_loss(params, batch, cfg)?;
    let mut probe = params.clone();
    let mut max_err: f64 = 0.0;
    for idx in indices {
        let coord = resolve(&layout, idx);
        let orig = read_coord(&probe, &coord);
        write_coord(&mut probe, &coord, orig + h);
        let up = total_loss(&probe, batch, cfg)?.total;
        write_coord(&mut probe, &coord, orig - h);
        let down = total_loss(&probe, batch, cfg)?.total;
        write_coord(&mut probe, &coord, orig);
        let numeric = (up - down) / (2.0 * h);
        let analytic = analytic_coord(&grads, &coord);
        let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Deterministic synthetic instance for gradient checking: `m` modalities
/// with small input dims, gaussian inputs, fan-in-initialized heads, and an
/// optional missing-view rate.
pub fn gradcheck_instance(
    n_modalities: usize,
    dim: usize,
    batch_size: usize,
    missing_rate: f64,
    seed: u64,
) -> Result<(ModelParams, Batch)> {
    use crate::data::ModalitySpec;
    use crate::encoder::CoordinationSpace;
    use rand::Rng;
    use rand_distr::StandardNormal;

    if n_modalities < 2 || batch_size < 2 {
        return Err(Error::Config(
            "gradcheck needs at least 2 modalities and a batch of at least 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dims = [5usize, 7, 6, 8, 4, 9];
    let specs: Vec<ModalitySpec> = (0..n_modalities)
        .map(|i| ModalitySpec {
            name: format!("m{i}"),
            dim: input_dims[i % input_dims.len()],
            file: String::new(),
        })
        .collect();
    let space = CoordinationSpace {
        dim,
        hidden: dim.max(2),
    };
    let params = ModelParams::init(&specs, &space, seed, crate::losses::DEFAULT_LOG_TAU)?;

    let mut inputs = Vec::with_capacity(n_modalities);
    let mut presence = Vec::with_capacity(n_modalities);
    for spec in &specs {
        let matrix = Array2::from_shape_simple_fn((batch_size, spec.dim), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        inputs.push(matrix);
        presence.push(vec![true; batch_size]);
    }
    if missing_rate > 0.0 {
        for flags in presence.iter_mut() {
            for f in flags.iter_mut() {
                if rng.random_range(0.0..1.0) < missing_rate {
                    *f = false;
                }
            }
        }
        // Keep at least one fully present sample so every pair has signal.
        for flags in presence.iter_mut() {
            flags[0] = true;
        }
        for (m, flags) in presence.iter().enumerate() {
            for (p, &present) in flags.iter().enumerate() {
                if !present {
                    inputs[m].row_mut(p).fill(0.0);
                }
            }
        }
    }
    let batch = Batch {
        entity_indices: (0..batch_size).collect(),
        modality_names: specs.iter().map(|s| s.name.clone()).collect(),
        inputs,
        presence,
        ordinal: 0,
        range: (1, batch_size),
    };
    Ok((params, batch))
}
