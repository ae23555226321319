//! Datasets of per-modality embedding matrices with possibly-missing views,
//! plus deterministic mini-batch iteration.
//!
//! A dataset is described by a JSON manifest that binds entity records to row
//! indices inside per-modality embedding matrix files (`.mmeb`). A missing
//! view is an explicit `null` row index. Matrices are stored as 32-bit floats
//! on disk and widened to 64-bit in memory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic bytes at the head of an embedding matrix file.
pub const MMEB_MAGIC: &[u8; 4] = b"MMEB";
/// Current embedding file format version.
pub const MMEB_VERSION: u32 = 1;

/// One modality: a name, its input dimensionality, and the matrix file path
/// (relative to the manifest).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    pub file: String,
}

/// One entity: per-modality row indices (None = view missing) and an
/// optional class label. `rows` is aligned with `Dataset::modalities`.
#[derive(Debug, Clone)]
pub struct EntityRecord {
    pub id: String,
    pub rows: Vec<Option<usize>>,
    pub class_label: Option<u32>,
}

impl EntityRecord {
    pub fn present(&self, modality_idx: usize) -> bool {
        self.rows[modality_idx].is_some()
    }
}

/// A fully loaded dataset: modality specs, entity records, named splits and
/// the resident embedding matrices (one per modality, in spec order).
///
/// Immutable after load; safe to share across readers.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub modalities: Vec<ModalitySpec>,
    pub entities: Vec<EntityRecord>,
    pub splits: BTreeMap<String, Vec<usize>>,
    pub matrices: Vec<Array2<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntity {
    id: String,
    rows: BTreeMap<String, Option<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_label: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    modalities: Vec<ModalitySpec>,
    entities: Vec<ManifestEntity>,
    splits: BTreeMap<String, Vec<usize>>,
}

/// Read an embedding matrix file: `MMEB`, u32 LE version/rows/cols, then
/// rows*cols f32 LE values, row-major.
pub fn read_mmeb(path: &Path) -> Result<Array2<f64>> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != MMEB_MAGIC {
        return Err(Error::Manifest(format!(
            "{}: not an MMEB embedding file",
            path.display()
        )));
    }
    let word = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = word(4);
    if version != MMEB_VERSION {
        return Err(Error::Manifest(format!(
            "{}: unsupported MMEB version {version}",
            path.display()
        )));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = 16 + rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Manifest(format!(
            "{}: expected {expected} bytes for {rows}x{cols}, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in bytes[16..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

/// Write an embedding matrix file. Values are narrowed to f32.
pub fn write_mmeb(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let (rows, cols) = matrix.dim();
    let mut bytes = Vec::with_capacity(16 + rows * cols * 4);
    bytes.extend_from_slice(MMEB_MAGIC);
    bytes.extend_from_slice(&MMEB_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(rows as u32).to_le_bytes());
    bytes.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in matrix.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

impl Dataset {
    /// Load and validate a dataset from a JSON manifest. Matrix files are
    /// resolved relative to the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let text =
            fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));

        let mut names = BTreeSet::new();
        for spec in &manifest.modalities {
            if !names.insert(spec.name.clone()) {
                return Err(Error::Manifest(format!(
                    "duplicate modality name '{}'",
                    spec.name
                )));
            }
            if spec.dim == 0 {
                return Err(Error::Manifest(format!(
                    "modality '{}' has dim 0",
                    spec.name
                )));
            }
        }
        if manifest.modalities.len() < 2 {
            return Err(Error::Manifest(
                "a dataset needs at least two modalities".into(),
            ));
        }

        let mut matrices = Vec::with_capacity(manifest.modalities.len());
        for spec in &manifest.modalities {
            let matrix = read_mmeb(&base.join(&spec.file))?;
            if matrix.ncols() != spec.dim {
                return Err(Error::DimensionMismatch {
                    modality: spec.name.clone(),
                    declared: spec.dim,
                    found: matrix.ncols(),
                });
            }
            matrices.push(matrix);
        }

        let mut entities = Vec::with_capacity(manifest.entities.len());
        for ent in &manifest.entities {
            let mut rows = vec![None; manifest.modalities.len()];
            for (key, value) in &ent.rows {
                let Some(m) = manifest.modalities.iter().position(|s| &s.name == key) else {
                    return Err(Error::Manifest(format!(
                        "entity '{}' references unknown modality '{key}'",
                        ent.id
                    )));
                };
                rows[m] = *value;
            }
            entities.push(EntityRecord {
                id: ent.id.clone(),
                rows,
                class_label: ent.class_label,
            });
        }

        let dataset = Dataset {
            name: manifest.name,
            modalities: manifest.modalities,
            entities,
            splits: manifest.splits,
            matrices,
        };
        dataset.validate()?;
        Ok(dataset)
    }

    /// Write the dataset back as manifest + MMEB files. Round-trips bit-exactly
    /// for matrices that originated from MMEB files.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        fs::create_dir_all(base).map_err(|e| Error::io(base, e))?;
        for (spec, matrix) in self.modalities.iter().zip(&self.matrices) {
            write_mmeb(&base.join(&spec.file), matrix)?;
        }
        let entities = self
            .entities
            .iter()
            .map(|ent| ManifestEntity {
                id: ent.id.clone(),
                rows: self
                    .modalities
                    .iter()
                    .zip(&ent.rows)
                    .map(|(spec, row)| (spec.name.clone(), *row))
                    .collect(),
                class_label: ent.class_label,
            })
            .collect();
        let manifest = Manifest {
            name: self.name.clone(),
            modalities: self.modalities.clone(),
            entities,
            splits: self.splits.clone(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
    }

    fn validate(&self) -> Result<()> {
        if self.entities.is_empty() {
            return Err(Error::Manifest("dataset has no entities".into()));
        }
        for ent in &self.entities {
            let present = ent.rows.iter().filter(|r| r.is_some()).count();
            if present < 2 {
                return Err(Error::Manifest(format!(
                    "entity '{}' has {present} present views; at least two are required",
                    ent.id
                )));
            }
            for (m, row) in ent.rows.iter().enumerate() {
                if let Some(r) = row {
                    let n_rows = self.matrices[m].nrows();
                    if *r >= n_rows {
                        return Err(Error::RowOutOfRange {
                            entity: ent.id.clone(),
                            modality: self.modalities[m].name.clone(),
                            row: *r,
                            rows: n_rows,
                        });
                    }
                    if self.matrices[m].row(*r).iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "modality '{}' row {r} (entity '{}')",
                            self.modalities[m].name, ent.id
                        )));
                    }
                }
            }
        }
        let mut seen = BTreeSet::new();
        for (split, indices) in &self.splits {
            for idx in indices {
                if *idx >= self.entities.len() {
                    return Err(Error::Manifest(format!(
                        "split '{split}' references entity index {idx} out of range"
                    )));
                }
                if !seen.insert(*idx) {
                    return Err(Error::Manifest(format!(
                        "entity index {idx} appears in more than one split"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|s| s.name == name)
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Config(format!("unknown split '{name}'")))
    }

    /// Raw input row for one entity view, if present.
    pub fn view(&self, entity_idx: usize, modality_idx: usize) -> Option<ArrayView1<'_, f64>> {
        self.entities[entity_idx].rows[modality_idx].map(|r| self.matrices[modality_idx].row(r))
    }

    /// Deterministic mini-batch sequence over a split.
    ///
    /// The permutation is fully determined by `(seed, epoch)`. In `Train`
    /// mode the final partial batch is dropped; in `Eval` mode it is kept.
    pub fn batch_iter(
        &self,
        split: &str,
        batch_size: usize,
        seed: u64,
        epoch: u64,
        shuffle: bool,
        mode: BatchMode,
    ) -> Result<BatchIter<'_>> {
        if batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        let indices = self.split(split)?;
        if mode == BatchMode::Train && indices.len() < batch_size {
            return Err(Error::Config(format!(
                "split '{split}' has {} entities, smaller than one batch of {batch_size}",
                indices.len()
            )));
        }
        let mut order: Vec<usize> = indices.to_vec();
        if shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch));
            order.shuffle(&mut rng);
        }
        Ok(BatchIter {
            dataset: self,
            order,
            batch_size,
            mode,
            next_ordinal: 0,
        })
    }

    /// Assemble a batch from explicit entity indices (in the given order).
    pub fn make_batch(&self, entity_indices: &[usize], ordinal: usize, start: usize) -> Batch {
        let b = entity_indices.len();
        let mut inputs = Vec::with_capacity(self.modalities.len());
        let mut presence = Vec::with_capacity(self.modalities.len());
        for (m, spec) in self.modalities.iter().enumerate() {
            let mut matrix = Array2::<f64>::zeros((b, spec.dim));
            let mut flags = vec![false; b];
            for (p, &ent) in entity_indices.iter().enumerate() {
                if let Some(row) = self.view(ent, m) {
                    matrix.row_mut(p).assign(&row);
                    flags[p] = true;
                }
            }
            inputs.push(matrix);
            presence.push(flags);
        }
        Batch {
            entity_indices: entity_indices.to_vec(),
            modality_names: self.modalities.iter().map(|s| s.name.clone()).collect(),
            inputs,
            presence,
            ordinal,
            range: (start + 1, start + b),
        }
    }
}

/// Mix an epoch number into a base seed so each epoch gets its own stream.
fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Drop the final partial batch.
    Train,
    /// Keep the final partial batch.
    Eval,
}

/// One mini-batch: per-modality input matrices (zero rows where a view is
/// absent) plus presence flags, aligned with the dataset's modality order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub entity_indices: Vec<usize>,
    pub modality_names: Vec<String>,
    pub inputs: Vec<Array2<f64>>,
    pub presence: Vec<Vec<bool>>,
    /// 0-based batch ordinal within the epoch.
    pub ordinal: usize,
    /// 1-based inclusive position range of this batch within the epoch order.
    pub range: (usize, usize),
}

impl Batch {
    pub fn len(&self) -> usize {
        self.entity_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_indices.is_empty()
    }

    pub fn n_modalities(&self) -> usize {
        self.inputs.len()
    }
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    mode: BatchMode,
    next_ordinal: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let start = self.next_ordinal * self.batch_size;
        if start >= self.order.len() {
            return None;
        }
        let end = (start + self.batch_size).min(self.order.len());
        if self.mode == BatchMode::Train && end - start < self.batch_size {
            return None;
        }
        let ordinal = self.next_ordinal;
        self.next_ordinal += 1;
        Some(
            self.dataset
                .make_batch(&self.order[start..end], ordinal, start),
        )
    }
}
