//! Per-modality projection head: linear input projection, residual
//! feed-forward block with ReLU, and a terminal LayerNorm.
//!
//! Forward pass for one present row `x`:
//!
//! ```text
//! h = W0 x + b0
//! u = h + W2 relu(W1 h + b1)
//! z = layer_norm(u) * gamma + beta
//! ```
//!
//! Absent rows encode to zero rows and are flagged downstream. The backward
//! pass is exact reverse-mode accumulation through the same graph.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ModalitySpec;
use crate::error::{Error, Result};

/// LayerNorm variance guard.
pub const LN_EPS: f64 = 1e-5;

/// Shared coordination space: output dimensionality and the hidden width of
/// the feed-forward block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CoordinationSpace {
    pub dim: usize,
    pub hidden: usize,
}

impl Default for CoordinationSpace {
    fn default() -> Self {
        CoordinationSpace {
            dim: 256,
            hidden: 256,
        }
    }
}

impl CoordinationSpace {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(
                "coordination dim must be at least 2 (cosine is degenerate at dim 1)".into(),
            ));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Learnable parameters of one modality's projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub modality: String,
    /// D x D_in input projection.
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    /// H x D first feed-forward layer.
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// D x H second feed-forward layer.
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Names of the tensors inside a projection head, in serialization order.
pub const TENSOR_NAMES: [&str; 8] = ["w0", "b0", "w1", "b1", "w2", "b2", "gamma", "beta"];

impl ProjectionParams {
    pub fn input_dim(&self) -> usize {
        self.w0.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w0.nrows()
    }

    pub fn tensor_shape(&self, name: &str) -> Vec<usize> {
        match name {
            "w0" => self.w0.shape().to_vec(),
            "b0" => self.b0.shape().to_vec(),
            "w1" => self.w1.shape().to_vec(),
            "b1" => self.b1.shape().to_vec(),
            "w2" => self.w2.shape().to_vec(),
            "b2" => self.b2.shape().to_vec(),
            "gamma" => self.gamma.shape().to_vec(),
            "beta" => self.beta.shape().to_vec(),
            _ => panic!("unknown tensor '{name}'"),
        }
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        match name {
            "w0" => self.w0.as_slice().unwrap(),
            "b0" => self.b0.as_slice().unwrap(),
            "w1" => self.w1.as_slice().unwrap(),
            "b1" => self.b1.as_slice().unwrap(),
            "w2" => self.w2.as_slice().unwrap(),
            "b2" => self.b2.as_slice().unwrap(),
            "gamma" => self.gamma.as_slice().unwrap(),
            "beta" => self.beta.as_slice().unwrap(),
            _ => panic!("unknown tensor '{name}'"),
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        match name {
            "w0" => self.w0.as_slice_mut().unwrap(),
            "b0" => self.b0.as_slice_mut().unwrap(),
            "w1" => self.w1.as_slice_mut().unwrap(),
            "b1" => self.b1.as_slice_mut().unwrap(),
            "w2" => self.w2.as_slice_mut().unwrap(),
            "b2" => self.b2.as_slice_mut().unwrap(),
            "gamma" => self.gamma.as_slice_mut().unwrap(),
            "beta" => self.beta.as_slice_mut().unwrap(),
            _ => panic!("unknown tensor '{name}'"),
        }
    }
}

/// Gradient (or moment) tensors mirroring [`ProjectionParams`] shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityGrads {
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl ModalityGrads {
    pub fn zeros_like(params: &ProjectionParams) -> Self {
        ModalityGrads {
            w0: Array2::zeros(params.w0.dim()),
            b0: Array1::zeros(params.b0.len()),
            w1: Array2::zeros(params.w1.dim()),
            b1: Array1::zeros(params.b1.len()),
            w2: Array2::zeros(params.w2.dim()),
            b2: Array1::zeros(params.b2.len()),
            gamma: Array1::zeros(params.gamma.len()),
            beta: Array1::zeros(params.beta.len()),
        }
    }

    pub fn tensor(&self, name: &str) -> &[f64] {
        match name {
            "w0" => self.w0.as_slice().unwrap(),
            "b0" => self.b0.as_slice().unwrap(),
            "w1" => self.w1.as_slice().unwrap(),
            "b1" => self.b1.as_slice().unwrap(),
            "w2" => self.w2.as_slice().unwrap(),
            "b2" => self.b2.as_slice().unwrap(),
            "gamma" => self.gamma.as_slice().unwrap(),
            "beta" => self.beta.as_slice().unwrap(),
            _ => panic!("unknown tensor '{name}'"),
        }
    }

    pub fn tensor_mut(&mut self, name: &str) -> &mut [f64] {
        match name {
            "w0" => self.w0.as_slice_mut().unwrap(),
            "b0" => self.b0.as_slice_mut().unwrap(),
            "w1" => self.w1.as_slice_mut().unwrap(),
            "b1" => self.b1.as_slice_mut().unwrap(),
            "w2" => self.w2.as_slice_mut().unwrap(),
            "b2" => self.b2.as_slice_mut().unwrap(),
            "gamma" => self.gamma.as_slice_mut().unwrap(),
            "beta" => self.beta.as_slice_mut().unwrap(),
            _ => panic!("unknown tensor '{name}'"),
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = f64> + '_ {
        TENSOR_NAMES
            .iter()
            .flat_map(move |n| self.tensor(n).iter().copied())
    }
}

/// Fan-in uniform initialization: W entries uniform in
/// [-1/sqrt(fan_in), +1/sqrt(fan_in)], biases zero, gamma one, beta zero.
/// Bit-reproducible for a fixed seed.
pub fn init_projection(
    spec: &ModalitySpec,
    space: &CoordinationSpace,
    seed: u64,
) -> Result<ProjectionParams> {
    space.validate()?;
    if spec.dim == 0 {
        return Err(Error::Config(format!(
            "modality '{}' has input dim 0",
            spec.name
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform_matrix = |rows: usize, cols: usize, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
    };
    Ok(ProjectionParams {
        modality: spec.name.clone(),
        w0: uniform_matrix(space.dim, spec.dim, spec.dim),
        b0: Array1::zeros(space.dim),
        w1: uniform_matrix(space.hidden, space.dim, space.dim),
        b1: Array1::zeros(space.hidden),
        w2: uniform_matrix(space.dim, space.hidden, space.hidden),
        b2: Array1::zeros(space.dim),
        gamma: Array1::ones(space.dim),
        beta: Array1::zeros(space.dim),
    })
}

/// LayerNorm over one vector with population variance:
/// `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn layer_norm(
    x: ArrayView1<'_, f64>,
    gamma: ArrayView1<'_, f64>,
    beta: ArrayView1<'_, f64>,
    eps: f64,
) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    let mut out = Array1::zeros(x.len());
    for i in 0..x.len() {
        out[i] = gamma[i] * (x[i] - mean) * inv_std + beta[i];
    }
    out
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    /// Post-projection rows (B x D).
    pub h: Array2<f64>,
    /// Pre-activation of the hidden layer (B x H).
    pub a: Array2<f64>,
    /// Normalized rows before the affine part of LayerNorm (B x D).
    pub xhat: Array2<f64>,
    /// Per-row 1/sqrt(var + eps).
    pub inv_std: Array1<f64>,
}

/// Encode a batch of input rows. Rows with `presence[p] == false` come out
/// as zero rows and never contribute gradients.
pub fn encode(
    params: &ProjectionParams,
    inputs: &Array2<f64>,
    presence: &[bool],
) -> Result<Array2<f64>> {
    encode_with_cache(params, inputs, presence).map(|(z, _)| z)
}

pub fn encode_with_cache(
    params: &ProjectionParams,
    inputs: &Array2<f64>,
    presence: &[bool],
) -> Result<(Array2<f64>, EncodeCache)> {
    if inputs.ncols() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "modality '{}': inputs have {} columns, projection expects {}",
            params.modality,
            inputs.ncols(),
            params.input_dim()
        )));
    }
    if inputs.nrows() != presence.len() {
        return Err(Error::ShapeMismatch(format!(
            "modality '{}': {} input rows vs {} presence flags",
            params.modality,
            inputs.nrows(),
            presence.len()
        )));
    }
    let b = inputs.nrows();
    let d = params.output_dim();

    let mut h = inputs.dot(&params.w0.t());
    h += &params.b0;
    let mut a = h.dot(&params.w1.t());
    a += &params.b1;
    let r = a.mapv(|v| v.max(0.0));
    let mut f = r.dot(&params.w2.t());
    f += &params.b2;
    let u = &h + &f;

    let mut z = Array2::zeros((b, d));
    let mut xhat = Array2::zeros((b, d));
    let mut inv_std = Array1::zeros(b);
    let dim = d as f64;
    for p in 0..b {
        if !presence[p] {
            continue;
        }
        let row = u.row(p);
        let mean = row.sum() / dim;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[p] = is;
        for i in 0..d {
            let xh = (row[i] - mean) * is;
            xhat[[p, i]] = xh;
            z[[p, i]] = params.gamma[i] * xh + params.beta[i];
        }
    }
    Ok((z, EncodeCache { h, a, xhat, inv_std }))
}

/// Reverse-mode pass for [`encode_with_cache`]: propagate `d_out` back to
/// parameter gradients, accumulating into `grads`.
pub fn encode_backward(
    params: &ProjectionParams,
    inputs: &Array2<f64>,
    presence: &[bool],
    cache: &EncodeCache,
    d_out: &Array2<f64>,
    grads: &mut ModalityGrads,
) {
    let b = inputs.nrows();
    let d = params.output_dim();
    let dim = d as f64;

    // LayerNorm backward per present row.
    let mut du = Array2::<f64>::zeros((b, d));
    for p in 0..b {
        if !presence[p] {
            continue;
        }
        let is = cache.inv_std[p];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let dz = d_out[[p, i]];
            let xh = cache.xhat[[p, i]];
            grads.gamma[i] += dz * xh;
            grads.beta[i] += dz;
            let dxh = dz * params.gamma[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= dim;
        mean_dxhat_xhat /= dim;
        for i in 0..d {
            let dxh = d_out[[p, i]] * params.gamma[i];
            du[[p, i]] = is * (dxh - mean_dxhat - cache.xhat[[p, i]] * mean_dxhat_xhat);
        }
    }

    // Residual: u = h + f, so dH starts at du and the FF branch adds to it.
    let df = &du;
    let r = cache.a.mapv(|v| v.max(0.0));
    grads.w2 += &df.t().dot(&r);
    grads.b2 += &df.sum_axis(Axis(0));
    let mut da = df.dot(&params.w2);
    da.zip_mut_with(&cache.a, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    grads.w1 += &da.t().dot(&cache.h);
    grads.b1 += &da.sum_axis(Axis(0));
    let dh = &du + &da.dot(&params.w1);
    grads.w0 += &dh.t().dot(inputs);
    grads.b0 += &dh.sum_axis(Axis(0));
}
