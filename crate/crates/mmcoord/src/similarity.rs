//! Pairwise similarity blocks between projected batch views, the binary
//! target matrix for regression, and the missing-modality masks.

use ndarray::{Array1, Array2};

use crate::data::Batch;
use crate::error::{Error, Result};

/// Zero-norm guard inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// B x B cosine similarities between two projected views.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub values: Array2<f64>,
    pub query_modality: String,
    pub db_modality: String,
}

/// Binary B x B target: 1 where a sample pair shares some view (same-view
/// similarity above the threshold), 0 elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Additive: pass = 0, fail = -inf.
    Contrastive,
    /// Multiplicative: pass = 1, fail = 0.
    Regression,
}

/// Missing-modality mask over a similarity block. Entry (p, q) passes iff
/// the query modality is present in sample p and the db modality in sample q.
#[derive(Debug, Clone)]
pub struct Mask {
    pub kind: MaskKind,
    pub values: Array2<f64>,
}

impl Mask {
    pub fn transposed(&self) -> Mask {
        Mask {
            kind: self.kind,
            values: self.values.t().to_owned(),
        }
    }
}

/// L2-normalize rows, guarding zero norms with [`COSINE_EPS`]. Returns the
/// normalized matrix and the guarded norms.
pub(crate) fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let mut out = m.clone();
    let mut norms = Array1::zeros(m.nrows());
    for (p, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(COSINE_EPS);
        norms[p] = norm;
        row.mapv_inplace(|v| v / norm);
    }
    (out, norms)
}

/// Cosine similarity between every row of `a` and every row of `b`.
///
/// Entries are accumulated index-by-index so that
/// `cosine_similarity_matrix(a, b)` is exactly the transpose of
/// `cosine_similarity_matrix(b, a)`.
pub fn cosine_similarity_matrix(
    a: &Array2<f64>,
    b: &Array2<f64>,
    query_modality: &str,
    db_modality: &str,
) -> Result<SimilarityMatrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "cosine: {} vs {} columns",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "cosine: {} vs {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let (an, _) = normalize_rows(a);
    let (bn, _) = normalize_rows(b);
    Ok(SimilarityMatrix {
        values: row_dot_products(&an, &bn),
        query_modality: query_modality.into(),
        db_modality: db_modality.into(),
    })
}

pub(crate) fn row_dot_products(an: &Array2<f64>, bn: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = (an.nrows(), bn.nrows());
    let mut values = Array2::zeros((rows, cols));
    for p in 0..rows {
        let ap = an.row(p);
        for q in 0..cols {
            let bq = bn.row(q);
            let mut dot = 0.0;
            for d in 0..an.ncols() {
                dot += ap[d] * bq[d];
            }
            values[[p, q]] = dot;
        }
    }
    values
}

/// Build the binary target from per-modality same-view similarity blocks.
/// Entries for missing views must be pre-filled with -inf so they never win
/// the max. `T[p][q] = 1` iff the max over modalities exceeds `t`.
pub fn build_target_matrix(same_view_sims: &[Array2<f64>], t: f64) -> Result<TargetMatrix> {
    if same_view_sims.is_empty() {
        return Err(Error::Config(
            "target matrix needs at least one same-view similarity block".into(),
        ));
    }
    if !(0.0..1.0).contains(&t) || t == 0.0 {
        return Err(Error::Config(format!(
            "target threshold must lie in (0, 1), got {t}"
        )));
    }
    let dim = same_view_sims[0].dim();
    for s in same_view_sims {
        if s.dim() != dim {
            return Err(Error::ShapeMismatch(
                "same-view similarity blocks differ in shape".into(),
            ));
        }
    }
    let mut values = Array2::zeros(dim);
    for p in 0..dim.0 {
        for q in 0..dim.1 {
            let max = same_view_sims
                .iter()
                .map(|s| s[[p, q]])
                .fold(f64::NEG_INFINITY, f64::max);
            values[[p, q]] = if max > t { 1.0 } else { 0.0 };
        }
    }
    Ok(TargetMatrix { values })
}

/// Same-view similarity blocks of a batch computed on the raw inputs, with
/// -inf entries wherever either sample lacks the view. Keeping the target on
/// raw inputs makes it constant across training.
pub fn same_view_sims_for_batch(batch: &Batch) -> Result<Vec<Array2<f64>>> {
    let b = batch.len();
    let mut blocks = Vec::with_capacity(batch.n_modalities());
    for m in 0..batch.n_modalities() {
        let sims = cosine_similarity_matrix(
            &batch.inputs[m],
            &batch.inputs[m],
            &batch.modality_names[m],
            &batch.modality_names[m],
        )?;
        let mut values = sims.values;
        for p in 0..b {
            for q in 0..b {
                if !(batch.presence[m][p] && batch.presence[m][q]) {
                    values[[p, q]] = f64::NEG_INFINITY;
                }
            }
        }
        blocks.push(values);
    }
    Ok(blocks)
}

/// Target matrix for one batch at threshold `t`.
pub fn target_for_batch(batch: &Batch, t: f64) -> Result<TargetMatrix> {
    build_target_matrix(&same_view_sims_for_batch(batch)?, t)
}

/// Presence mask for a similarity block between two modalities.
pub fn build_mask(presence_query: &[bool], presence_db: &[bool], kind: MaskKind) -> Mask {
    let (fail, pass) = match kind {
        MaskKind::Contrastive => (f64::NEG_INFINITY, 0.0),
        MaskKind::Regression => (0.0, 1.0),
    };
    let mut values = Array2::zeros((presence_query.len(), presence_db.len()));
    for (p, &qp) in presence_query.iter().enumerate() {
        for (q, &dp) in presence_db.iter().enumerate() {
            values[[p, q]] = if qp && dp { pass } else { fail };
        }
    }
    Mask { kind, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn cosine_hand_example() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.6, 0.8]];
        let s = cosine_similarity_matrix(&a, &b, "a", "b").unwrap();
        assert_relative_eq!(s.values[[0, 0]], 0.6, epsilon = 1e-12);
    }

    #[test]
    fn cosine_self_diagonal_is_one() {
        let a = array![[1.0, 2.0, 3.0], [0.5, -0.5, 2.0], [3.0, 0.0, -1.0]];
        let s = cosine_similarity_matrix(&a, &a, "a", "a").unwrap();
        for p in 0..3 {
            assert_relative_eq!(s.values[[p, p]], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cosine_orthogonal_rows_are_zero() {
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 2.0]];
        let s = cosine_similarity_matrix(&a, &b, "a", "b").unwrap();
        assert_eq!(s.values[[0, 0]], 0.0);
    }

    #[test]
    fn cosine_zero_rows_are_guarded() {
        let a = array![[0.0, 0.0]];
        let b = array![[1.0, 1.0]];
        let s = cosine_similarity_matrix(&a, &b, "a", "b").unwrap();
        assert_eq!(s.values[[0, 0]], 0.0);
    }

    #[test]
    fn target_identity_when_offdiagonal_below_threshold() {
        // Off-diagonal same-view sims <= 0.5 never reach t = 0.99.
        let sims = vec![array![[1.0, 0.5], [0.5, 1.0]], array![[1.0, 0.2], [0.2, 1.0]]];
        let t = build_target_matrix(&sims, 0.99).unwrap();
        assert_eq!(t.values, array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn target_marks_shared_views() {
        // Samples 0 and 1 share an identical image row: same-view sim 1.0.
        let image = array![[1.0, 1.0], [1.0, 0.3]];
        let text = array![[1.0, 0.2], [0.2, 1.0]];
        let t = build_target_matrix(&[image, text], 0.99).unwrap();
        assert_eq!(t.values, array![[1.0, 1.0], [1.0, 1.0]]);
    }

    #[test]
    fn target_diagonal_is_always_one() {
        let sims = vec![array![[1.0, -0.1], [-0.1, 1.0]]];
        let t = build_target_matrix(&sims, 0.5).unwrap();
        assert_eq!(t.values[[0, 0]], 1.0);
        assert_eq!(t.values[[1, 1]], 1.0);
    }

    #[test]
    fn missing_views_never_win_the_max() {
        let sims = vec![
            array![[1.0, f64::NEG_INFINITY], [f64::NEG_INFINITY, f64::NEG_INFINITY]],
            array![[1.0, 0.3], [0.3, 1.0]],
        ];
        let t = build_target_matrix(&sims, 0.99).unwrap();
        assert_eq!(t.values, array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn contrastive_mask_all_present_is_zero() {
        let m = build_mask(&[true, true], &[true, true], MaskKind::Contrastive);
        assert!(m.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn regression_mask_zeroes_missing_column() {
        let m = build_mask(&[true, true], &[true, false], MaskKind::Regression);
        assert_eq!(m.values, array![[1.0, 0.0], [1.0, 0.0]]);
    }

    #[test]
    fn contrastive_mask_kills_missing_query_row() {
        let m = build_mask(&[false, true], &[true, true], MaskKind::Contrastive);
        assert!(m.values.row(0).iter().all(|v| *v == f64::NEG_INFINITY));
        assert!(m.values.row(1).iter().all(|v| *v == 0.0));
    }

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-10.0f64..10.0, rows * cols)
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    proptest! {
        #[test]
        fn transpose_symmetry_is_exact(a in small_matrix(4, 3), b in small_matrix(4, 3)) {
            let ab = cosine_similarity_matrix(&a, &b, "a", "b").unwrap();
            let ba = cosine_similarity_matrix(&b, &a, "b", "a").unwrap();
            prop_assert_eq!(ab.values, ba.values.t().to_owned());
        }

        #[test]
        fn positive_row_scaling_is_invariant(a in small_matrix(3, 4), b in small_matrix(3, 4), c in 0.1f64..100.0) {
            let base = cosine_similarity_matrix(&a, &b, "a", "b").unwrap();
            let mut scaled = a.clone();
            scaled.row_mut(1).mapv_inplace(|v| v * c);
            let after = cosine_similarity_matrix(&scaled, &b, "a", "b").unwrap();
            for (x, y) in base.values.iter().zip(after.values.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn target_is_monotone_in_threshold(v in proptest::collection::vec(-1.0f64..1.0, 9), lo in 0.05f64..0.5, hi in 0.5f64..0.95) {
            let mut sims = Array2::from_shape_vec((3, 3), v).unwrap();
            for i in 0..3 { sims[[i, i]] = 1.0; }
            let t_lo = build_target_matrix(std::slice::from_ref(&sims), lo).unwrap();
            let t_hi = build_target_matrix(std::slice::from_ref(&sims), hi).unwrap();
            for (a, b) in t_lo.values.iter().zip(t_hi.values.iter()) {
                prop_assert!(b <= a, "raising t must not create 1-entries");
            }
            for i in 0..3 {
                prop_assert_eq!(t_hi.values[[i, i]], 1.0);
            }
        }
    }
}
