//! Deterministic generator of correlated multimodal datasets.
//!
//! Each class gets a latent centroid, each entity a latent near its class
//! centroid, and each modality observes the latent through a fixed random
//! linear map plus gaussian noise. Because the generative model is linear,
//! a trained projection can provably align the modalities, which makes the
//! end-to-end benchmarks winnable by construction.
//!
//! Granularity knobs: `views_per_entity` emits several noisy views sharing
//! one entity (caption-style), `class_level` makes a modality share one row
//! per class (class-embedding-style), `duplicate_view_rate` copies raw views
//! across record pairs, and `missing_rate` nulls views.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EntityRecord, ModalitySpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthModality {
    pub name: String,
    pub dim: usize,
    pub noise_sigma: f64,
    /// Noisy views per base entity (captions-per-image style).
    pub views_per_entity: usize,
    pub missing_rate: f64,
    /// One shared row per class instead of per-entity rows.
    pub class_level: bool,
}

impl Default for SynthModality {
    fn default() -> Self {
        SynthModality {
            name: String::new(),
            dim: 16,
            noise_sigma: 0.05,
            views_per_entity: 1,
            missing_rate: 0.0,
            class_level: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    /// Base entities (records = n_entities * max views_per_entity).
    pub n_entities: usize,
    pub n_classes: usize,
    pub latent_dim: usize,
    /// Standard deviation of entity latents around their class centroid.
    pub class_spread: f64,
    pub modalities: Vec<SynthModality>,
    /// Fraction of record pairs forced to share one raw instance view.
    pub duplicate_view_rate: f64,
    pub seed: u64,
    /// Partition classes (not records) into splits, for held-out-class
    /// evaluation.
    pub split_by_class: bool,
    pub split_fractions: (f64, f64, f64),
    /// Exact record counts for train/val/test; overrides fractions.
    pub split_counts: Option<(usize, usize, usize)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            name: "synth".to_string(),
            n_entities: 1000,
            n_classes: 10,
            latent_dim: 16,
            class_spread: 1.0,
            modalities: Vec::new(),
            duplicate_view_rate: 0.0,
            seed: 0,
            split_by_class: false,
            split_fractions: (0.7, 0.1, 0.2),
            split_counts: None,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_entities == 0 {
            return Err(Error::Config("n_entities must be positive".into()));
        }
        if self.n_classes == 0 || self.n_classes > self.n_entities {
            return Err(Error::Config(format!(
                "n_classes must lie in [1, n_entities]; got {} classes for {} entities",
                self.n_classes, self.n_entities
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.modalities.len() < 2 {
            return Err(Error::Config("at least two modalities are required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.modalities {
            if m.name.is_empty() || !names.insert(&m.name) {
                return Err(Error::Config(format!(
                    "modality names must be unique and non-empty ('{}')",
                    m.name
                )));
            }
            if m.dim == 0 {
                return Err(Error::Config(format!("modality '{}' has dim 0", m.name)));
            }
            if m.views_per_entity == 0 {
                return Err(Error::Config(format!(
                    "modality '{}' needs views_per_entity >= 1",
                    m.name
                )));
            }
            if m.class_level && m.views_per_entity != 1 {
                return Err(Error::Config(format!(
                    "class-level modality '{}' cannot have multiple views",
                    m.name
                )));
            }
            if !(0.0..=1.0).contains(&m.missing_rate) {
                return Err(Error::Config("missing_rate must lie in [0, 1]".into()));
            }
            if m.noise_sigma < 0.0 {
                return Err(Error::Config("noise_sigma must be non-negative".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.duplicate_view_rate) {
            return Err(Error::Config("duplicate_view_rate must lie in [0, 1]".into()));
        }
        let (a, b, c) = self.split_fractions;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-6 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        if self.split_counts.is_some() && self.split_by_class {
            return Err(Error::Config(
                "split_counts and split_by_class are mutually exclusive".into(),
            ));
        }
        Ok(())
    }
}

/// Generator internals exposed for verification: the fixed per-modality
/// observation maps.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) struct SynthDebug {
    pub maps: Vec<Array2<f64>>,
}

/// Generate a dataset on disk (manifest + MMEB files under `out_dir`) and
/// return it reloaded from those files, so the in-memory matrices match the
/// stored 32-bit precision. Byte-identical for a fixed config.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Dataset> {
    generate_full(cfg, out_dir).map(|(ds, _)| ds)
}

pub(crate) fn generate_full(cfg: &SynthConfig, out_dir: &Path) -> Result<(Dataset, SynthDebug)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.latent_dim;
    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    let centroids = Array2::from_shape_simple_fn((cfg.n_classes, d), || gauss(&mut rng));
    let entity_class: Vec<usize> = (0..cfg.n_entities).map(|e| e % cfg.n_classes).collect();
    let mut latents = Array2::zeros((cfg.n_entities, d));
    for e in 0..cfg.n_entities {
        for i in 0..d {
            latents[[e, i]] = centroids[[entity_class[e], i]] + cfg.class_spread * gauss(&mut rng);
        }
    }

    // Fixed random observation maps, scaled to roughly preserve norms.
    let scale = 1.0 / (d as f64).sqrt();
    let maps: Vec<Array2<f64>> = cfg
        .modalities
        .iter()
        .map(|m| Array2::from_shape_simple_fn((m.dim, d), || scale * gauss(&mut rng)))
        .collect();

    let observe = |map: &Array2<f64>, z: ndarray::ArrayView1<'_, f64>, sigma: f64, rng: &mut ChaCha8Rng| {
        let mut x = map.dot(&z);
        if sigma > 0.0 {
            for v in x.iter_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        x
    };

    let mut matrices: Vec<Array2<f64>> = Vec::with_capacity(cfg.modalities.len());
    for (m, spec) in cfg.modalities.iter().enumerate() {
        if spec.class_level {
            let mut rows = Array2::zeros((cfg.n_classes, spec.dim));
            for c in 0..cfg.n_classes {
                let x = observe(&maps[m], centroids.row(c), spec.noise_sigma, &mut rng);
                rows.row_mut(c).assign(&x);
            }
            matrices.push(rows);
        } else {
            let mut rows = Array2::zeros((cfg.n_entities * spec.views_per_entity, spec.dim));
            for e in 0..cfg.n_entities {
                for w in 0..spec.views_per_entity {
                    let x = observe(&maps[m], latents.row(e), spec.noise_sigma, &mut rng);
                    rows.row_mut(e * spec.views_per_entity + w).assign(&x);
                }
            }
            matrices.push(rows);
        }
    }

    let views_max = cfg
        .modalities
        .iter()
        .map(|m| m.views_per_entity)
        .max()
        .unwrap();
    let n_records = cfg.n_entities * views_max;
    let mut record_entity = Vec::with_capacity(n_records);
    let mut rows: Vec<Vec<Option<usize>>> = Vec::with_capacity(n_records);
    for e in 0..cfg.n_entities {
        for v in 0..views_max {
            record_entity.push(e);
            rows.push(
                cfg.modalities
                    .iter()
                    .map(|spec| {
                        if spec.class_level {
                            Some(entity_class[e])
                        } else {
                            Some(e * spec.views_per_entity + (v % spec.views_per_entity))
                        }
                    })
                    .collect(),
            );
        }
    }

    // Duplicate raw views across record pairs.
    if cfg.duplicate_view_rate > 0.0 {
        let eligible: Vec<usize> = cfg
            .modalities
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.class_level)
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(Error::Config(
                "duplicate_view_rate needs at least one instance-level modality".into(),
            ));
        }
        let n_dup = ((cfg.duplicate_view_rate * n_records as f64) / 2.0).round() as usize;
        let mut order: Vec<usize> = (0..n_records).collect();
        order.shuffle(&mut rng);
        for pair in order.chunks_exact(2).take(n_dup) {
            let m = eligible[rng.random_range(0..eligible.len())];
            rows[pair[1]][m] = rows[pair[0]][m];
        }
    }

    // Null views at the configured rates, then repair records that fall
    // below two present views by restoring their own rows.
    for (r, row) in rows.iter_mut().enumerate() {
        let e = record_entity[r];
        let v = r % views_max;
        for (m, spec) in cfg.modalities.iter().enumerate() {
            if spec.missing_rate > 0.0 && rng.random_range(0.0..1.0) < spec.missing_rate {
                row[m] = None;
            }
        }
        let mut present = row.iter().filter(|r| r.is_some()).count();
        while present < 2 {
            let nulled: Vec<usize> = (0..row.len()).filter(|&m| row[m].is_none()).collect();
            let pick = nulled[rng.random_range(0..nulled.len())];
            let spec = &cfg.modalities[pick];
            row[pick] = Some(if spec.class_level {
                entity_class[e]
            } else {
                e * spec.views_per_entity + (v % spec.views_per_entity)
            });
            present += 1;
        }
    }

    // Splits.
    let (train, val, test) = if cfg.split_by_class {
        let mut class_order: Vec<usize> = (0..cfg.n_classes).collect();
        class_order.shuffle(&mut rng);
        let (fa, fb, _) = cfg.split_fractions;
        let n_tr = ((cfg.n_classes as f64 * fa).round() as usize)
            .max(1)
            .min(cfg.n_classes.saturating_sub(2).max(1));
        let n_va = ((cfg.n_classes as f64 * fb).round() as usize)
            .max(1)
            .min(cfg.n_classes - n_tr - 1);
        let class_split: Vec<u8> = {
            let mut s = vec![2u8; cfg.n_classes];
            for (i, &c) in class_order.iter().enumerate() {
                s[c] = if i < n_tr {
                    0
                } else if i < n_tr + n_va {
                    1
                } else {
                    2
                };
            }
            s
        };
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for (r, &e) in record_entity.iter().enumerate() {
            match class_split[entity_class[e]] {
                0 => train.push(r),
                1 => val.push(r),
                _ => test.push(r),
            }
        }
        (train, val, test)
    } else {
        let mut order: Vec<usize> = (0..n_records).collect();
        order.shuffle(&mut rng);
        let (n_tr, n_va, n_te) = match cfg.split_counts {
            Some((a, b, c)) => {
                if a + b + c > n_records {
                    return Err(Error::Config(format!(
                        "split counts {}+{}+{} exceed {n_records} records",
                        a, b, c
                    )));
                }
                (a, b, c)
            }
            None => {
                let (fa, fb, _) = cfg.split_fractions;
                let n_tr = (n_records as f64 * fa).floor() as usize;
                let n_va = (n_records as f64 * fb).floor() as usize;
                (n_tr, n_va, n_records - n_tr - n_va)
            }
        };
        let train = order[..n_tr].to_vec();
        let val = order[n_tr..n_tr + n_va].to_vec();
        let test = order[n_tr + n_va..n_tr + n_va + n_te].to_vec();
        (train, val, test)
    };

    let entities: Vec<EntityRecord> = rows
        .iter()
        .enumerate()
        .map(|(r, row)| EntityRecord {
            id: format!("e{}_v{}", record_entity[r], r % views_max),
            rows: row.clone(),
            class_label: Some(entity_class[record_entity[r]] as u32),
        })
        .collect();

    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), train);
    splits.insert("val".to_string(), val);
    splits.insert("test".to_string(), test);

    let dataset = Dataset {
        name: cfg.name.clone(),
        modalities: cfg
            .modalities
            .iter()
            .map(|m| ModalitySpec {
                name: m.name.clone(),
                dim: m.dim,
                file: format!("{}.mmeb", m.name),
            })
            .collect(),
        entities,
        splits,
        matrices,
    };

    let manifest_path = manifest_path(out_dir);
    dataset.save(&manifest_path)?;
    let reloaded = Dataset::load(&manifest_path)?;
    Ok((reloaded, SynthDebug { maps }))
}

pub fn manifest_path(out_dir: &Path) -> PathBuf {
    out_dir.join("manifest.json")
}
