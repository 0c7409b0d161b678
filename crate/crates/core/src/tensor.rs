//! Numeric kernels shared by every stage of the cascade: cosine similarity,
//! min-max normalization, row softmax and pose-guided cross-attention.
//!
//! Everything here is a pure function over immutable inputs.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense, finite, non-empty real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("embedding"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    cosine_with_norms(a, b, a.norm(), b.norm())
}

/// Cosine with caller-supplied norms. Gives bit-identical results to
/// [`cosine_similarity`] when the norms come from [`EmbeddingVector::norm`].
pub(crate) fn cosine_with_norms(a: &EmbeddingVector, b: &EmbeddingVector, norm_a: f64, norm_b: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(Error::ZeroNormVector);
    }
    // Adding 0.0 turns a -0.0 result into +0.0.
    Ok(dot(&a.0, &b.0) / (norm_a * norm_b) + 0.0)
}

/// Maps `scores` affinely onto `[0, 1]`. A constant input maps to all zeros.
pub fn min_max_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span == 0.0 {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores.iter().map(|s| (s - min) / span).collect())
}

/// Token-by-feature matrix, one token per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(Array2<f64>);

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::EmptyInput("feature matrix"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix"));
        }
        Ok(Self(values))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
            return Err(Error::DimensionMismatch {
                expected: ncols,
                found: bad.len(),
            });
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values =
            Array2::from_shape_vec((rows.len(), ncols), flat).map_err(|_| Error::EmptyInput("feature matrix"))?;
        Self::new(values)
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn view(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

/// Query/key/value projections for [`pose_cross_attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    w_v: Array2<f64>,
}

impl AttentionWeights {
    pub fn new(w_q: Array2<f64>, w_k: Array2<f64>, w_v: Array2<f64>) -> Result<Self> {
        let d = w_q.nrows();
        if d == 0 {
            return Err(Error::EmptyInput("attention weights"));
        }
        for w in [&w_q, &w_k, &w_v] {
            for found in [w.nrows(), w.ncols()] {
                if found != d {
                    return Err(Error::DimensionMismatch { expected: d, found });
                }
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("attention weights"));
            }
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn identity(d: usize) -> Result<Self> {
        let eye = Array2::eye(d);
        Self::new(eye.clone(), eye.clone(), eye)
    }

    pub fn dim(&self) -> usize {
        self.w_q.nrows()
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &FeatureMatrix) -> FeatureMatrix {
    let mut out = m.0.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    FeatureMatrix(out)
}

/// Pose-guided cross-attention with a residual connection.
///
/// Pose tokens are the queries and image tokens supply keys and values. Each
/// token row `x` is projected as `W x`. Returns `(f_ca, f_v)` where
/// `f_ca = softmax((Q Kᵀ) / √d) V` and `f_v = f_image + f_ca`.
pub fn pose_cross_attention(
    f_pose: &FeatureMatrix,
    f_image: &FeatureMatrix,
    weights: &AttentionWeights,
) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let d = weights.dim();
    for found in [f_pose.cols(), f_image.cols()] {
        if found != d {
            return Err(Error::DimensionMismatch { expected: d, found });
        }
    }
    if f_pose.rows() != f_image.rows() {
        return Err(Error::ShapeMismatchForResidual {
            pose_rows: f_pose.rows(),
            image_rows: f_image.rows(),
        });
    }

    let q = f_pose.0.dot(&weights.w_q.t());
    let k = f_image.0.dot(&weights.w_k.t());
    let v = f_image.0.dot(&weights.w_v.t());
    let logits = q.dot(&k.t()) / (d as f64).sqrt();
    let attn = softmax_rows(&FeatureMatrix(logits));
    let f_ca = attn.0.dot(&v);
    let f_v = &f_image.0 + &f_ca;
    Ok((FeatureMatrix(f_ca), FeatureMatrix(f_v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn ev(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&ev(&[0.6, 0.8]), &ev(&[0.6, 0.8])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&ev(&[1.0, 2.0, 2.0]), &ev(&[2.0, 1.0, 2.0])).unwrap();
        assert!((c - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&ev(&[1.0, 0.0]), &ev(&[1.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { expected: 2, found: 3 })
        ));
        assert!(matches!(
            cosine_similarity(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])),
            Err(Error::ZeroNormVector)
        ));
    }

    #[test]
    fn embedding_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![]).is_err());
        assert!(serde_json::from_str::<EmbeddingVector>("[]").is_err());
    }

    #[test]
    fn min_max_examples() {
        assert_eq!(min_max_normalize(&[2.0, 4.0, 6.0]).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(min_max_normalize(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        let n = min_max_normalize(&[0.3, 0.9, 0.6]).unwrap();
        assert_eq!(n[0], 0.0);
        assert_eq!(n[1], 1.0);
        assert!((n[2] - 0.5).abs() < 1e-12);
        assert!(matches!(min_max_normalize(&[]), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn softmax_examples() {
        let m = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![2f64.ln(), 0.0], vec![7.0, 7.0]]).unwrap();
        let s = softmax_rows(&m).into_inner();
        assert_eq!(s.row(0).to_vec(), vec![0.5, 0.5]);
        assert!((s[[1, 0]] - 2.0 / 3.0).abs() < 1e-12);
        assert!((s[[1, 1]] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.row(2).to_vec(), vec![0.5, 0.5]);

        let third = softmax_rows(&FeatureMatrix::from_rows(&[vec![-3.5; 3]]).unwrap()).into_inner();
        for v in third.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let m = FeatureMatrix::from_rows(&[vec![1000.0, 999.0]]).unwrap();
        let s = softmax_rows(&m).into_inner();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_singleton_identity() {
        let f_i = FeatureMatrix::new(array![[0.25, -1.5, 3.0]]).unwrap();
        let f_p = FeatureMatrix::new(array![[9.0, 2.0, -4.0]]).unwrap();
        let (ca, v) = pose_cross_attention(&f_p, &f_i, &AttentionWeights::identity(3).unwrap()).unwrap();
        assert_eq!(ca.view(), f_i.view());
        assert_eq!(v.into_inner(), f_i.view() * 2.0);
    }

    #[test]
    fn attention_zero_value_projection() {
        let f_i = FeatureMatrix::new(array![[0.2, -1.0], [3.0, 0.5]]).unwrap();
        let f_p = FeatureMatrix::new(array![[1.0, 1.0], [-2.0, 0.0]]).unwrap();
        let w = AttentionWeights::new(
            array![[1.0, 2.0], [0.0, 1.0]],
            array![[0.5, 0.0], [1.0, 1.0]],
            Array2::zeros((2, 2)),
        )
        .unwrap();
        let (ca, v) = pose_cross_attention(&f_p, &f_i, &w).unwrap();
        assert!(ca.view().iter().all(|x| *x == 0.0));
        assert_eq!(v, f_i);
    }

    #[test]
    fn attention_shape_errors() {
        let w = AttentionWeights::identity(2).unwrap();
        let two = FeatureMatrix::new(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let one = FeatureMatrix::new(array![[1.0, 0.0]]).unwrap();
        let wide = FeatureMatrix::new(array![[1.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(
            pose_cross_attention(&one, &two, &w),
            Err(Error::ShapeMismatchForResidual {
                pose_rows: 1,
                image_rows: 2
            })
        ));
        assert!(matches!(
            pose_cross_attention(&wide, &wide, &w),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(AttentionWeights::new(Array2::eye(2), Array2::eye(3), Array2::eye(2)).is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..24).prop_flat_map(|d| {
            (
                prop::collection::vec(-1e3f64..1e3, d),
                prop::collection::vec(-1e3f64..1e3, d),
            )
        })
    }

    proptest! {
        #[test]
        fn cosine_bounded_symmetric_scale_invariant((a, b) in vec_strategy(), alpha in 1e-3f64..1e3) {
            let (va, vb) = (ev(&a), ev(&b));
            prop_assume!(va.norm() > 0.0 && vb.norm() > 0.0);
            let c = cosine_similarity(&va, &vb).unwrap();
            prop_assert!(c.abs() <= 1.0 + 1e-12);
            prop_assert_eq!(c, cosine_similarity(&vb, &va).unwrap());
            let scaled = ev(&a.iter().map(|x| x * alpha).collect::<Vec<_>>());
            prop_assert!((cosine_similarity(&scaled, &vb).unwrap() - c).abs() < 1e-9);
            prop_assert!((cosine_similarity(&va, &va).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn min_max_preserves_argsort(scores in prop::collection::vec(prop_oneof![-5i32..5, -5i32..5].prop_map(|v| v as f64 * 0.5), 1..30)) {
            let norm = min_max_normalize(&scores).unwrap();
            for i in 0..scores.len() {
                prop_assert!((0.0..=1.0).contains(&norm[i]));
                for j in 0..scores.len() {
                    prop_assert_eq!(scores[i].partial_cmp(&scores[j]), norm[i].partial_cmp(&norm[j]));
                }
            }
        }

        #[test]
        fn softmax_rows_stochastic_and_shift_invariant(
            rows in prop::collection::vec(prop::collection::vec(-50f64..50.0, 4), 1..6),
            shift in -100f64..100.0,
        ) {
            let m = FeatureMatrix::from_rows(&rows).unwrap();
            let shifted = FeatureMatrix::new(m.view() + shift).unwrap();
            let a = softmax_rows(&m).into_inner();
            let b = softmax_rows(&shifted).into_inner();
            for row in a.rows() {
                prop_assert!(row.iter().all(|v| *v >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            }
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
