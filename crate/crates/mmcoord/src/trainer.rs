//! Training loop: shuffled epochs, cosine-scheduled Adam steps, validation
//! monitoring with patience-based early stopping, and checkpointing.
//!
//! Checkpoints are a directory holding `checkpoint.json` (config, history,
//! tensor index) and `params.bin` (all tensors, including optimizer moments,
//! as little-endian f64 records). Reloading reproduces forward outputs bit
//! for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{BatchMode, Dataset};
use crate::encoder::{CoordinationSpace, ModalityGrads, ProjectionParams, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::eval::{average_cross_modal_r1, PositiveMode};
use crate::grad::grad_total_loss;
use crate::losses::LossConfig;
use crate::model::ModelParams;
use crate::optim::{adam_step, cosine_lr, OptimConfig, OptimState};

/// Magic bytes at the head of `params.bin`.
const CHECKPOINT_MAGIC: &[u8; 4] = b"MMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Improvements smaller than this do not reset patience.
const IMPROVEMENT_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub space: CoordinationSpace,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_max: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Ground-truth mode for the validation metric.
    pub val_positives: PositiveMode,
    /// Monitored quantity; only average directional r@1 is supported.
    pub eval_metric: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            space: CoordinationSpace::default(),
            optim: OptimConfig::default(),
            batch_size: 80,
            max_epochs: 50,
            patience: 5,
            lr_max: 1e-4,
            seed: 0,
            shuffle: true,
            val_positives: PositiveMode::Entity,
            eval_metric: "avg_r1".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.space.validate()?;
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.lr_max < 0.0 {
            return Err(Error::Config("lr_max must be non-negative".into()));
        }
        if self.eval_metric != "avg_r1" {
            return Err(Error::Config(format!(
                "unsupported eval metric '{}' (expected 'avg_r1')",
                self.eval_metric
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optim: OptimState,
    /// Epoch (1-based) the returned parameters come from; 0 if untrained.
    pub epoch: usize,
    pub best_val_metric: f64,
    pub config: TrainConfig,
    pub history: Vec<EpochStats>,
}

/// Freshly initialized, untrained state (epoch 0). Useful as a baseline.
pub fn initial_checkpoint(dataset: &Dataset, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let params = ModelParams::init(
        &dataset.modalities,
        &config.space,
        config.seed,
        config.loss.log_tau,
    )?;
    let optim = OptimState::new(&params, config.optim);
    Ok(Checkpoint {
        params,
        optim,
        epoch: 0,
        best_val_metric: 0.0,
        config: config.clone(),
        history: Vec::new(),
    })
}

/// Train with the standard validation metric (average directional r@1 over
/// the validation split).
pub fn train(
    dataset: &Dataset,
    train_split: &str,
    val_split: &str,
    config: &TrainConfig,
) -> Result<Checkpoint> {
    train_with_metric(dataset, train_split, config, |params| {
        average_cross_modal_r1(params, dataset, val_split, config.val_positives)
    })
}

/// Core loop with an injectable validation metric (used by tests to drive
/// the stopping rule with a scripted sequence).
pub(crate) fn train_with_metric(
    dataset: &Dataset,
    train_split: &str,
    config: &TrainConfig,
    mut metric: impl FnMut(&ModelParams) -> Result<f64>,
) -> Result<Checkpoint> {
    config.validate()?;
    let mut params = ModelParams::init(
        &dataset.modalities,
        &config.space,
        config.seed,
        config.loss.log_tau,
    )?;
    let mut optim = OptimState::new(&params, config.optim);

    let mut best: Option<(ModelParams, OptimState, usize, f64)> = None;
    let mut best_metric = f64::NEG_INFINITY;
    let mut bad_epochs = 0;
    let mut history = Vec::new();

    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(epoch as f64 / config.max_epochs as f64, config.lr_max);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        let batches = dataset.batch_iter(
            train_split,
            config.batch_size,
            config.seed,
            epoch as u64,
            config.shuffle,
            BatchMode::Train,
        )?;
        for batch in batches {
            let (loss, grads) =
                grad_total_loss(&params, &batch, &config.loss).map_err(|e| match e {
                    Error::NonFinite(what) => Error::Divergence(format!(
                        "epoch {}, batch {}: non-finite {what}",
                        epoch + 1,
                        batch.ordinal
                    )),
                    other => other,
                })?;
            adam_step(&mut optim, &mut params, &grads, lr);
            loss_sum += loss;
            n_batches += 1;
        }
        let train_loss = loss_sum / n_batches as f64;
        let val_metric = metric(&params)?;
        history.push(EpochStats {
            epoch: epoch + 1,
            train_loss,
            val_metric,
        });

        if val_metric > best_metric + IMPROVEMENT_EPS {
            best_metric = val_metric;
            best = Some((params.clone(), optim.clone(), epoch + 1, val_metric));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience {
                break;
            }
        }
    }

    let (params, optim, epoch, best_val_metric) =
        best.expect("at least one epoch ran and any finite metric improves on -inf");
    Ok(Checkpoint {
        params,
        optim,
        epoch,
        best_val_metric,
        config: config.clone(),
        history,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModalityInfo {
    name: String,
    input_dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    modalities: Vec<ModalityInfo>,
    config: TrainConfig,
    epoch: usize,
    best_val_metric: f64,
    optim_step: u64,
    history: Vec<EpochStats>,
    tensors: Vec<TensorInfo>,
}

fn push_record(buf: &mut Vec<u8>, index: &mut Vec<TensorInfo>, name: &str, shape: &[usize], data: &[f64]) {
    debug_assert_eq!(shape.iter().product::<usize>().max(1), data.len());
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in shape {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    index.push(TensorInfo {
        name: name.to_string(),
        shape: shape.to_vec(),
    });
}

fn grad_records(buf: &mut Vec<u8>, index: &mut Vec<TensorInfo>, prefix: &str, p: &ProjectionParams, g: &ModalityGrads) {
    for name in TENSOR_NAMES {
        push_record(
            buf,
            index,
            &format!("{prefix}.{}.{name}", p.modality),
            &p.tensor_shape(name),
            g.tensor(name),
        );
    }
}

/// Serialize a checkpoint into `dir/checkpoint.json` + `dir/params.bin`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let mut index = Vec::new();
    for p in &ckpt.params.mods {
        for name in TENSOR_NAMES {
            push_record(
                &mut buf,
                &mut index,
                &format!("enc.{}.{name}", p.modality),
                &p.tensor_shape(name),
                p.tensor(name),
            );
        }
    }
    push_record(&mut buf, &mut index, "log_tau", &[], &[ckpt.params.log_tau]);
    for (p, (m, v)) in ckpt
        .params
        .mods
        .iter()
        .zip(ckpt.optim.m.iter().zip(&ckpt.optim.v))
    {
        grad_records(&mut buf, &mut index, "adam_m", p, m);
        grad_records(&mut buf, &mut index, "adam_v", p, v);
    }
    push_record(&mut buf, &mut index, "adam_m.log_tau", &[], &[ckpt.optim.m_log_tau]);
    push_record(&mut buf, &mut index, "adam_v.log_tau", &[], &[ckpt.optim.v_log_tau]);

    let bin_path = dir.join("params.bin");
    let mut file = fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&bin_path, e))?;

    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        modalities: ckpt
            .params
            .mods
            .iter()
            .map(|p| ModalityInfo {
                name: p.modality.clone(),
                input_dim: p.input_dim(),
            })
            .collect(),
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        best_val_metric: ckpt.best_val_metric,
        optim_step: ckpt.optim.step,
        history: ckpt.history.clone(),
        tensors: index,
    };
    let json_path = dir.join("checkpoint.json");
    fs::write(&json_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&json_path, e))
}

struct RecordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CorruptCheckpoint("truncated record".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn next_record(&mut self) -> Result<Option<(String, Vec<usize>, Vec<f64>)>> {
        if self.pos == self.bytes.len() {
            return Ok(None);
        }
        let name_len = self.u32()? as usize;
        let name = String::from_utf8(self.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("record name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product::<usize>().max(1);
        let mut data = Vec::with_capacity(count);
        for chunk in self.take(count * 8)?.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(Some((name, shape, data)))
    }
}

fn take_tensor(
    records: &mut std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    name: &str,
) -> Result<(Vec<usize>, Vec<f64>)> {
    records
        .remove(name)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor '{name}'")))
}

fn matrix(shape: &[usize], data: Vec<f64>, name: &str) -> Result<Array2<f64>> {
    if shape.len() != 2 {
        return Err(Error::CorruptCheckpoint(format!(
            "tensor '{name}' expected rank 2, found {}",
            shape.len()
        )));
    }
    Array2::from_shape_vec((shape[0], shape[1]), data)
        .map_err(|e| Error::CorruptCheckpoint(format!("tensor '{name}': {e}")))
}

fn vector(shape: &[usize], data: Vec<f64>, name: &str) -> Result<Array1<f64>> {
    if shape.len() != 1 {
        return Err(Error::CorruptCheckpoint(format!(
            "tensor '{name}' expected rank 1, found {}",
            shape.len()
        )));
    }
    Ok(Array1::from_vec(data))
}

fn scalar(shape: &[usize], data: &[f64], name: &str) -> Result<f64> {
    if !shape.is_empty() || data.len() != 1 {
        return Err(Error::CorruptCheckpoint(format!(
            "tensor '{name}' expected a scalar"
        )));
    }
    Ok(data[0])
}

fn load_head(
    records: &mut std::collections::BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    prefix: &str,
    modality: &str,
) -> Result<ProjectionParams> {
    let mut get = |t: &str| take_tensor(records, &format!("{prefix}.{modality}.{t}"));
    let (s, d) = get("w0")?;
    let w0 = matrix(&s, d, "w0")?;
    let (s, d) = get("b0")?;
    let b0 = vector(&s, d, "b0")?;
    let (s, d) = get("w1")?;
    let w1 = matrix(&s, d, "w1")?;
    let (s, d) = get("b1")?;
    let b1 = vector(&s, d, "b1")?;
    let (s, d) = get("w2")?;
    let w2 = matrix(&s, d, "w2")?;
    let (s, d) = get("b2")?;
    let b2 = vector(&s, d, "b2")?;
    let (s, d) = get("gamma")?;
    let gamma = vector(&s, d, "gamma")?;
    let (s, d) = get("beta")?;
    let beta = vector(&s, d, "beta")?;
    Ok(ProjectionParams {
        modality: modality.to_string(),
        w0,
        b0,
        w1,
        b1,
        w2,
        b2,
        gamma,
        beta,
    })
}

/// Load a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let json_path = dir.join("checkpoint.json");
    let meta: CheckpointMeta =
        serde_json::from_str(&fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?)
            .map_err(|e| Error::CorruptCheckpoint(format!("checkpoint.json: {e}")))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported checkpoint version {}",
            meta.version
        )));
    }
    let bin_path = dir.join("params.bin");
    let mut bytes = Vec::new();
    fs::File::open(&bin_path)
        .map_err(|e| Error::io(&bin_path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() < 8 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint(
            "params.bin has wrong magic bytes".into(),
        ));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint("params.bin version mismatch".into()));
    }

    let mut reader = RecordReader {
        bytes: &bytes,
        pos: 8,
    };
    let mut records = std::collections::BTreeMap::new();
    while let Some((name, shape, data)) = reader.next_record()? {
        if records.insert(name.clone(), (shape, data)).is_some() {
            return Err(Error::CorruptCheckpoint(format!("duplicate tensor '{name}'")));
        }
    }
    for info in &meta.tensors {
        match records.get(&info.name) {
            Some((shape, _)) if *shape == info.shape => {}
            Some(_) => {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor '{}' shape differs from index",
                    info.name
                )))
            }
            None => {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor '{}' listed in index but missing",
                    info.name
                )))
            }
        }
    }

    let mut mods = Vec::with_capacity(meta.modalities.len());
    let mut m_moments = Vec::with_capacity(meta.modalities.len());
    let mut v_moments = Vec::with_capacity(meta.modalities.len());
    for info in &meta.modalities {
        let head = load_head(&mut records, "enc", &info.name)?;
        if head.input_dim() != info.input_dim {
            return Err(Error::CorruptCheckpoint(format!(
                "modality '{}' input dim {} differs from index {}",
                info.name,
                head.input_dim(),
                info.input_dim
            )));
        }
        let m_head = load_head(&mut records, "adam_m", &info.name)?;
        let v_head = load_head(&mut records, "adam_v", &info.name)?;
        m_moments.push(head_to_grads(m_head));
        v_moments.push(head_to_grads(v_head));
        mods.push(head);
    }
    let (s, d) = take_tensor(&mut records, "log_tau")?;
    let log_tau = scalar(&s, &d, "log_tau")?;
    let (s, d) = take_tensor(&mut records, "adam_m.log_tau")?;
    let m_log_tau = scalar(&s, &d, "adam_m.log_tau")?;
    let (s, d) = take_tensor(&mut records, "adam_v.log_tau")?;
    let v_log_tau = scalar(&s, &d, "adam_v.log_tau")?;
    if !records.is_empty() {
        return Err(Error::CorruptCheckpoint(format!(
            "unexpected tensors: {:?}",
            records.keys().collect::<Vec<_>>()
        )));
    }

    let params = ModelParams { mods, log_tau };
    let optim = OptimState {
        cfg: meta.config.optim,
        m: m_moments,
        v: v_moments,
        m_log_tau,
        v_log_tau,
        step: meta.optim_step,
    };
    Ok(Checkpoint {
        params,
        optim,
        epoch: meta.epoch,
        best_val_metric: meta.best_val_metric,
        config: meta.config,
        history: meta.history,
    })
}

fn head_to_grads(head: ProjectionParams) -> ModalityGrads {
    ModalityGrads {
        w0: head.w0,
        b0: head.b0,
        w1: head.w1,
        b1: head.b1,
        w2: head.w2,
        b2: head.b2,
        gamma: head.gamma,
        beta: head.beta,
    }
}
