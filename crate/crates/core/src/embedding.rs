//! Embedding vectors, cosine geometry and segment-level context suppression.
//!
//! Storage is `f32`; every dot product and norm accumulates in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default embedding width of the teacher space.
pub const DEFAULT_DIM: usize = 768;

/// Norms below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// Default amount of global scene context removed from segment embeddings.
pub const DEFAULT_ALPHA: f64 = 0.65;

/// A finite, D-dimensional embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding vector"));
        }
        Ok(Self(values))
    }

    /// Builds a vector and checks it against the expected width.
    pub fn with_dim(values: Vec<f32>, dim: usize) -> Result<Self> {
        if values.len() != dim {
            return Err(Error::dim(dim, values.len()));
        }
        Self::new(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of two equal-length slices without validation; callers guarantee nonzero norms.
#[inline]
pub(crate) fn cosine_unchecked(a: &[f32], b: &[f32]) -> f64 {
    cosine_from_parts(dot(a, b), dot(a, a), dot(b, b))
}

/// Cosine from a dot product and the two squared norms. Taking one square root of
/// the product (not a product of roots) makes `cos(a, a)` exactly 1.
#[inline]
pub(crate) fn cosine_from_parts(ab: f64, aa: f64, bb: f64) -> f64 {
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// Scales `v` to unit Euclidean norm.
pub fn l2_normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    normalize_slice(v.as_slice()).map(EmbeddingVector)
}

pub(crate) fn normalize_slice(v: &[f32]) -> Result<Vec<f32>> {
    let n = norm(v);
    if n < ZERO_NORM_EPS {
        return Err(Error::zero_vector());
    }
    Ok(v.iter().map(|&x| (f64::from(x) / n) as f32).collect())
}

/// Cosine similarity clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim(a.dim(), b.dim()));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na < ZERO_NORM_EPS || nb < ZERO_NORM_EPS {
        return Err(Error::zero_vector());
    }
    Ok(cosine_unchecked(a.as_slice(), b.as_slice()))
}

/// Strength of global-context removal, `0 <= alpha <= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressionConfig {
    alpha: f64,
}

impl SuppressionConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// Removes the scaled whole-image direction from a segment embedding:
/// `seg / |seg| - alpha * img / |img|`.
///
/// The result is not renormalized. With `alpha = 1` and parallel inputs it is the
/// zero vector, which downstream normalization rejects.
pub fn suppress_context(
    segment: &EmbeddingVector,
    image: &EmbeddingVector,
    cfg: SuppressionConfig,
) -> Result<EmbeddingVector> {
    if segment.dim() != image.dim() {
        return Err(Error::dim(segment.dim(), image.dim()));
    }
    let (ns, ni) = (segment.norm(), image.norm());
    if ns < ZERO_NORM_EPS || ni < ZERO_NORM_EPS {
        return Err(Error::zero_vector());
    }
    let alpha = cfg.alpha();
    let out = segment
        .as_slice()
        .iter()
        .zip(image.as_slice())
        .map(|(&s, &g)| (f64::from(s) / ns - alpha * (f64::from(g) / ni)) as f32)
        .collect();
    Ok(EmbeddingVector(out))
}
