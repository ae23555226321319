//! Cross-modal retrieval metrics, zero-shot classification as retrieval,
//! and query/database enrichment by embedding fusion.
//!
//! Rankings are by cosine similarity with ties broken by ascending database
//! index, so every metric is deterministic. Queries are scored independently
//! and may run in parallel; reductions always walk results in query order.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::similarity::{normalize_rows, COSINE_EPS};

/// How ground-truth matches are derived for retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PositiveMode {
    /// A database item is correct iff it shares the underlying db-side view
    /// with the query's entity (covers multi-caption datasets where several
    /// entities reference one row).
    Entity,
    /// A database item is correct iff its class label matches the query's.
    Class,
}

/// Per-query sets of correct database indices.
#[derive(Debug, Clone)]
pub struct PositiveSet {
    pub mode: PositiveMode,
    pub positives: Vec<Vec<usize>>,
}

/// Projected embeddings for one modality, row-aligned with a split's entity
/// list. Absent views are zero rows with `present = false`.
#[derive(Debug, Clone)]
pub struct ProjectedTable {
    pub modality: String,
    pub rows: Array2<f64>,
    pub present: Vec<bool>,
}

/// Encode every present view of a split through the trained heads.
/// Produces one table per parameter head, in head order.
pub fn project_dataset(
    params: &ModelParams,
    dataset: &Dataset,
    split: &str,
) -> Result<Vec<ProjectedTable>> {
    let indices = dataset.split(split)?;
    if indices.is_empty() {
        return Err(Error::Config(format!("split '{split}' is empty")));
    }
    let mut tables = Vec::with_capacity(params.mods.len());
    for head in &params.mods {
        let Some(m) = dataset.modality_index(&head.modality) else {
            return Err(Error::ModalityMismatch(format!(
                "checkpoint modality '{}' not in dataset",
                head.modality
            )));
        };
        if dataset.modalities[m].dim != head.input_dim() {
            return Err(Error::ModalityMismatch(format!(
                "modality '{}': checkpoint expects dim {}, dataset has {}",
                head.modality,
                head.input_dim(),
                dataset.modalities[m].dim
            )));
        }
        let mut inputs = Array2::zeros((indices.len(), head.input_dim()));
        let mut present = vec![false; indices.len()];
        for (p, &ent) in indices.iter().enumerate() {
            if let Some(row) = dataset.view(ent, m) {
                inputs.row_mut(p).assign(&row);
                present[p] = true;
            }
        }
        let rows = crate::encoder::encode(head, &inputs, &present)?;
        tables.push(ProjectedTable {
            modality: head.modality.clone(),
            rows,
            present,
        });
    }
    Ok(tables)
}

fn l2_normalize(v: ArrayView1<'_, f64>) -> Array1<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    v.mapv(|x| x / norm)
}

/// Database indices sorted by descending cosine score, ties broken by
/// ascending index. `dbn` must be row-normalized.
fn ranked_indices(query: ArrayView1<'_, f64>, dbn: &Array2<f64>) -> Vec<usize> {
    let qn = l2_normalize(query);
    let scores: Vec<f64> = dbn.rows().into_iter().map(|r| r.dot(&qn)).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| a.cmp(&b))
    });
    order
}

fn check_instance(
    query_embs: &Array2<f64>,
    db_embs: &Array2<f64>,
    positives: &PositiveSet,
) -> Result<()> {
    if query_embs.ncols() != db_embs.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs db dim {}",
            query_embs.ncols(),
            db_embs.ncols()
        )));
    }
    if positives.positives.len() != query_embs.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} positive sets for {} queries",
            positives.positives.len(),
            query_embs.nrows()
        )));
    }
    for (q, set) in positives.positives.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::EmptyPositives(q));
        }
        if set.iter().any(|&p| p >= db_embs.nrows()) {
            return Err(Error::ShapeMismatch(format!(
                "positive index out of range for query {q}"
            )));
        }
    }
    Ok(())
}

/// Fraction of queries with at least one positive among the top-k results.
pub fn recall_at_k(
    query_embs: &Array2<f64>,
    db_embs: &Array2<f64>,
    positives: &PositiveSet,
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("recall@k needs k >= 1".into()));
    }
    check_instance(query_embs, db_embs, positives)?;
    if query_embs.nrows() == 0 {
        return Err(Error::Config("recall@k over zero queries".into()));
    }
    let (dbn, _) = normalize_rows(db_embs);
    let hits: Vec<bool> = (0..query_embs.nrows())
        .into_par_iter()
        .map(|q| {
            let order = ranked_indices(query_embs.row(q), &dbn);
            order
                .iter()
                .take(k)
                .any(|idx| positives.positives[q].contains(idx))
        })
        .collect();
    Ok(hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
}

/// Mean over queries of (positives within top-r) / r, where r is the size
/// of each query's positive set.
pub fn r_precision(
    query_embs: &Array2<f64>,
    db_embs: &Array2<f64>,
    positives: &PositiveSet,
) -> Result<f64> {
    check_instance(query_embs, db_embs, positives)?;
    if query_embs.nrows() == 0 {
        return Err(Error::Config("r-precision over zero queries".into()));
    }
    let (dbn, _) = normalize_rows(db_embs);
    let scores: Vec<f64> = (0..query_embs.nrows())
        .into_par_iter()
        .map(|q| {
            let order = ranked_indices(query_embs.row(q), &dbn);
            let r = positives.positives[q].len();
            let found = order
                .iter()
                .take(r)
                .filter(|idx| positives.positives[q].contains(idx))
                .count();
            found as f64 / r as f64
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// One retrieval problem extracted from projected tables: filtered query and
/// database embeddings plus ground truth. Queries without any positive in
/// the filtered database are skipped and counted.
pub struct RetrievalInstance {
    pub query_embs: Array2<f64>,
    pub db_embs: Array2<f64>,
    pub positives: PositiveSet,
    pub skipped_queries: usize,
}

/// Build a retrieval instance for one ordered modality pair.
pub fn retrieval_instance(
    dataset: &Dataset,
    split: &str,
    query_table: &ProjectedTable,
    db_table: &ProjectedTable,
    mode: PositiveMode,
) -> Result<RetrievalInstance> {
    let indices = dataset.split(split)?;
    let fused_q = [query_table];
    let fused_db = [db_table];
    fused_retrieval_instance(dataset, indices, &fused_q, &fused_db, mode)
}

/// Build a retrieval instance with fused (multi-table) query and db sides.
/// An entity must be present in every listed table on a side to take part;
/// otherwise it is skipped on that side.
pub fn fused_retrieval_instance(
    dataset: &Dataset,
    split_indices: &[usize],
    query_tables: &[&ProjectedTable],
    db_tables: &[&ProjectedTable],
    mode: PositiveMode,
) -> Result<RetrievalInstance> {
    if query_tables.is_empty() || db_tables.is_empty() {
        return Err(Error::Config("retrieval needs query and db tables".into()));
    }
    let n = split_indices.len();
    for t in query_tables.iter().chain(db_tables) {
        if t.rows.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "table '{}' has {} rows for a split of {n}",
                t.modality,
                t.rows.nrows()
            )));
        }
    }

    // Database side: entities present in all db tables.
    let mut db_rows = Vec::new();
    let mut db_entities = Vec::new();
    let mut skipped_db = 0;
    for p in 0..n {
        if db_tables.iter().all(|t| t.present[p]) {
            let views: Vec<ArrayView1<'_, f64>> =
                db_tables.iter().map(|t| t.rows.row(p)).collect();
            db_rows.push(combine_embeddings(&views)?);
            db_entities.push(split_indices[p]);
        } else {
            skipped_db += 1;
        }
    }

    // Ground-truth keys on the db side.
    let db_mod_indices: Vec<usize> = db_tables
        .iter()
        .map(|t| {
            dataset
                .modality_index(&t.modality)
                .ok_or_else(|| Error::ModalityMismatch(t.modality.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    // entity mode: db items grouped by their tuple of raw row indices, so
    // entities sharing every fused view count as interchangeable matches.
    let db_key = |ent: usize| -> Option<Vec<usize>> {
        db_mod_indices
            .iter()
            .map(|&m| dataset.entities[ent].rows[m])
            .collect()
    };
    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (pos, &ent) in db_entities.iter().enumerate() {
        match mode {
            PositiveMode::Entity => {
                if let Some(key) = db_key(ent) {
                    groups.entry(key).or_default().push(pos);
                }
            }
            PositiveMode::Class => {
                if let Some(label) = dataset.entities[ent].class_label {
                    by_label.entry(label).or_default().push(pos);
                }
            }
        }
    }

    // Query side: entities present in all query tables with >= 1 positive.
    let mut query_rows = Vec::new();
    let mut positives = Vec::new();
    let mut skipped_queries = skipped_db;
    for p in 0..n {
        if !query_tables.iter().all(|t| t.present[p]) {
            skipped_queries += 1;
            continue;
        }
        let ent = split_indices[p];
        let matches: Option<&Vec<usize>> = match mode {
            PositiveMode::Entity => db_key(ent).and_then(|key| groups.get(&key)),
            PositiveMode::Class => dataset.entities[ent]
                .class_label
                .and_then(|l| by_label.get(&l)),
        };
        match matches {
            Some(found) if !found.is_empty() => {
                let views: Vec<ArrayView1<'_, f64>> =
                    query_tables.iter().map(|t| t.rows.row(p)).collect();
                query_rows.push(combine_embeddings(&views)?);
                positives.push(found.clone());
            }
            _ => skipped_queries += 1,
        }
    }

    let dim = query_tables[0].rows.ncols();
    let query_embs = stack_rows(&query_rows, dim);
    let db_embs = stack_rows(&db_rows, dim);
    Ok(RetrievalInstance {
        query_embs,
        db_embs,
        positives: PositiveSet { mode, positives },
        skipped_queries,
    })
}

fn stack_rows(rows: &[Array1<f64>], dim: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    out
}

/// Per-pair and averaged retrieval metrics, JSON-serializable.
#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub pairs: BTreeMap<String, BTreeMap<String, f64>>,
    pub avg: BTreeMap<String, f64>,
    pub skipped_entities: usize,
}

fn instance_metrics(instance: &RetrievalInstance, ks: &[usize]) -> Result<BTreeMap<String, f64>> {
    let mut metrics = BTreeMap::new();
    for &k in ks {
        metrics.insert(
            format!("r@{k}"),
            recall_at_k(&instance.query_embs, &instance.db_embs, &instance.positives, k)?,
        );
    }
    metrics.insert(
        "r_precision".to_string(),
        r_precision(&instance.query_embs, &instance.db_embs, &instance.positives)?,
    );
    Ok(metrics)
}

fn averages(pairs: &BTreeMap<String, BTreeMap<String, f64>>) -> BTreeMap<String, f64> {
    let mut avg = BTreeMap::new();
    if pairs.is_empty() {
        return avg;
    }
    for metrics in pairs.values() {
        for (name, value) in metrics {
            *avg.entry(name.clone()).or_insert(0.0) += value;
        }
    }
    for value in avg.values_mut() {
        *value /= pairs.len() as f64;
    }
    avg
}

/// Metrics for every ordered modality pair of the projected tables.
pub fn cross_modal_report(
    dataset: &Dataset,
    split: &str,
    tables: &[ProjectedTable],
    ks: &[usize],
    mode: PositiveMode,
) -> Result<RetrievalReport> {
    if tables.len() < 2 {
        return Err(Error::Config(
            "cross-modal report needs at least two modalities".into(),
        ));
    }
    let mut pairs = BTreeMap::new();
    let mut skipped = 0;
    for qi in 0..tables.len() {
        for di in 0..tables.len() {
            if qi == di {
                continue;
            }
            let instance = retrieval_instance(dataset, split, &tables[qi], &tables[di], mode)?;
            skipped += instance.skipped_queries;
            let label = format!("{}->{}", tables[qi].modality, tables[di].modality);
            pairs.insert(label, instance_metrics(&instance, ks)?);
        }
    }
    let avg = averages(&pairs);
    Ok(RetrievalReport {
        pairs,
        avg,
        skipped_entities: skipped,
    })
}

/// Retrieval with fused query and/or database vectors.
pub fn enriched_retrieval(
    dataset: &Dataset,
    split: &str,
    query_tables: &[&ProjectedTable],
    db_tables: &[&ProjectedTable],
    ks: &[usize],
    mode: PositiveMode,
) -> Result<RetrievalReport> {
    let indices = dataset.split(split)?;
    let instance = fused_retrieval_instance(dataset, indices, query_tables, db_tables, mode)?;
    let label = format!(
        "{}->{}",
        query_tables
            .iter()
            .map(|t| t.modality.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        db_tables
            .iter()
            .map(|t| t.modality.as_str())
            .collect::<Vec<_>>()
            .join("+")
    );
    let mut pairs = BTreeMap::new();
    pairs.insert(label, instance_metrics(&instance, ks)?);
    let avg = averages(&pairs);
    Ok(RetrievalReport {
        pairs,
        avg,
        skipped_entities: instance.skipped_queries,
    })
}

/// Class embeddings by arithmetic mean of instance-level attribute vectors,
/// in raw attribute space. Returns the sorted class labels and one row per
/// class, aligned.
pub fn build_class_embeddings(
    attrs: &Array2<f64>,
    labels: &[u32],
) -> Result<(Vec<u32>, Array2<f64>)> {
    if attrs.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} attribute rows vs {} labels",
            attrs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Config("class embeddings need at least one entity".into()));
    }
    let mut sums: BTreeMap<u32, (Array1<f64>, usize)> = BTreeMap::new();
    for (row, &label) in attrs.rows().into_iter().zip(labels) {
        let entry = sums
            .entry(label)
            .or_insert_with(|| (Array1::zeros(attrs.ncols()), 0));
        entry.0 += &row;
        entry.1 += 1;
    }
    let class_labels: Vec<u32> = sums.keys().copied().collect();
    let mut rows = Array2::zeros((class_labels.len(), attrs.ncols()));
    for (i, label) in class_labels.iter().enumerate() {
        let (sum, count) = &sums[label];
        rows.row_mut(i).assign(&(sum / *count as f64));
    }
    Ok((class_labels, rows))
}

/// Fuse embeddings: L2-normalize each input, average, L2-normalize the
/// result. Zero vectors are guarded, not rejected.
pub fn combine_embeddings(embs: &[ArrayView1<'_, f64>]) -> Result<Array1<f64>> {
    let Some(first) = embs.first() else {
        return Err(Error::Config("combine needs at least one embedding".into()));
    };
    let dim = first.len();
    let mut mean = Array1::<f64>::zeros(dim);
    for e in embs {
        if e.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "combine: widths {} vs {dim}",
                e.len()
            )));
        }
        mean += &l2_normalize(*e);
    }
    mean /= embs.len() as f64;
    Ok(l2_normalize(mean.view()))
}

/// Average per-class top-1 accuracy for zero-shot classification.
///
/// `class_labels` must be sorted ascending and aligned with `class_embs`
/// rows; prediction is the argmax-cosine class with ties resolved toward
/// the lowest label.
pub fn zero_shot_t1(
    inputs: &Array2<f64>,
    true_labels: &[u32],
    class_labels: &[u32],
    class_embs: &Array2<f64>,
) -> Result<f64> {
    if inputs.nrows() != true_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs vs {} labels",
            inputs.nrows(),
            true_labels.len()
        )));
    }
    if class_labels.len() != class_embs.nrows() {
        return Err(Error::ShapeMismatch(
            "class labels not aligned with class embedding rows".into(),
        ));
    }
    if class_labels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("class labels must be sorted and unique".into()));
    }
    if inputs.ncols() != class_embs.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "input dim {} vs class dim {}",
            inputs.ncols(),
            class_embs.ncols()
        )));
    }
    for label in true_labels {
        if class_labels.binary_search(label).is_err() {
            return Err(Error::Config(format!(
                "label {label} outside the class table"
            )));
        }
    }
    let (cn, _) = normalize_rows(class_embs);
    let predictions: Vec<u32> = (0..inputs.nrows())
        .into_par_iter()
        .map(|i| {
            let q = l2_normalize(inputs.row(i));
            let mut best = (f64::NEG_INFINITY, 0u32);
            for (c, label) in class_labels.iter().enumerate() {
                let score = cn.row(c).dot(&q);
                if score > best.0 {
                    best = (score, *label);
                }
            }
            best.1
        })
        .collect();

    let mut correct: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (pred, truth) in predictions.iter().zip(true_labels) {
        let entry = correct.entry(*truth).or_insert((0, 0));
        entry.1 += 1;
        if pred == truth {
            entry.0 += 1;
        }
    }
    let t1 = correct
        .values()
        .map(|(hit, total)| *hit as f64 / *total as f64)
        .sum::<f64>()
        / correct.len() as f64;
    Ok(t1)
}

/// Unweighted mean of directional r@1 over all ordered modality pairs.
/// This is the validation signal monitored during training.
pub fn average_cross_modal_r1(
    params: &ModelParams,
    dataset: &Dataset,
    split: &str,
    mode: PositiveMode,
) -> Result<f64> {
    let tables = project_dataset(params, dataset, split)?;
    let mut sum = 0.0;
    let mut count = 0;
    for qi in 0..tables.len() {
        for di in 0..tables.len() {
            if qi == di {
                continue;
            }
            let instance = retrieval_instance(dataset, split, &tables[qi], &tables[di], mode)?;
            if instance.query_embs.nrows() == 0 {
                continue;
            }
            sum += recall_at_k(&instance.query_embs, &instance.db_embs, &instance.positives, 1)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Config(
            "no evaluable modality pairs on the validation split".into(),
        ));
    }
    Ok(sum / count as f64)
}
