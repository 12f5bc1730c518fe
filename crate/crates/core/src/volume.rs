//! Dense per-pixel embedding volumes, segment masks and teacher-volume assembly.

use std::collections::BTreeMap;

use crate::embedding::{
    norm, suppress_context, EmbeddingVector, SuppressionConfig, ZERO_NORM_EPS,
};
use crate::error::{Error, Result};

/// An `H x W x D` volume stored row-major (row, then column, then channel).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseEmbeddingMap {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl DenseEmbeddingMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height * width * dim;
        if data.len() != expected {
            return Err(Error::dim(expected, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense embedding map"));
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, dim: usize) -> Self {
        Self {
            height,
            width,
            dim,
            data: vec![0.0; height * width * dim],
        }
    }

    /// Builds a volume from one vector per pixel, in row-major pixel order.
    pub fn from_pixels(height: usize, width: usize, pixels: &[EmbeddingVector]) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::dim(height * width, pixels.len()));
        }
        let dim = pixels.first().map_or(0, EmbeddingVector::dim);
        let mut data = Vec::with_capacity(height * width * dim);
        for p in pixels {
            if p.dim() != dim {
                return Err(Error::dim(dim, p.dim()));
            }
            data.extend_from_slice(p.as_slice());
        }
        Ok(Self {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Channel slice at flat pixel index `row * width + col`.
    #[inline]
    pub fn pixel(&self, index: usize) -> &[f32] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    #[inline]
    pub fn pixel_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        self.pixel(row * self.width + col)
    }

    pub fn pixels(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on zero chunk size
        self.data.chunks_exact(self.dim.max(1)).take(self.num_pixels())
    }

    pub(crate) fn check_same_shape(&self, other: &DenseEmbeddingMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::ShapeMismatch {
                expected: (self.height, self.width),
                found: (other.height, other.width),
            });
        }
        if self.dim != other.dim {
            return Err(Error::dim(self.dim, other.dim));
        }
        Ok(())
    }
}

/// Per-pixel segment ids; 0 marks pixels outside every mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMaskMap {
    height: usize,
    width: usize,
    ids: Vec<u16>,
}

impl SegmentMaskMap {
    pub fn new(height: usize, width: usize, ids: Vec<u16>) -> Result<Self> {
        if ids.len() != height * width {
            return Err(Error::dim(height * width, ids.len()));
        }
        Ok(Self { height, width, ids })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn at(&self, row: usize, col: usize) -> u16 {
        self.ids[row * self.width + col]
    }

    pub fn labeled_pixels(&self) -> usize {
        self.ids.iter().filter(|&&id| id != 0).count()
    }
}

/// Reserved segment id for the whole-image embedding.
pub const GLOBAL_SEGMENT_ID: u16 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub segment_id: u16,
    pub class_id: Option<u16>,
    pub raw_embedding: EmbeddingVector,
    pub refined_embedding: Option<EmbeddingVector>,
}

impl SegmentRecord {
    pub fn new(segment_id: u16, class_id: Option<u16>, raw_embedding: EmbeddingVector) -> Result<Self> {
        if raw_embedding.norm() < ZERO_NORM_EPS {
            return Err(Error::ZeroSegmentEmbedding(segment_id));
        }
        Ok(Self {
            segment_id,
            class_id,
            raw_embedding,
            refined_embedding: None,
        })
    }

    pub fn is_global(&self) -> bool {
        self.segment_id == GLOBAL_SEGMENT_ID
    }
}

/// Segment records of one image keyed by segment id; id 0 is the whole-image record.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentRecords {
    records: BTreeMap<u16, SegmentRecord>,
}

impl SegmentRecords {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: SegmentRecord) -> Result<()> {
        if let Some(first) = self.records.values().next() {
            let (expected, found) = (first.raw_embedding.dim(), record.raw_embedding.dim());
            if expected != found {
                return Err(Error::dim(expected, found));
            }
        }
        if self.records.contains_key(&record.segment_id) {
            return Err(Error::DuplicateSegment(record.segment_id));
        }
        self.records.insert(record.segment_id, record);
        Ok(())
    }

    pub fn get(&self, id: u16) -> Option<&SegmentRecord> {
        self.records.get(&id)
    }

    pub fn global(&self) -> Option<&SegmentRecord> {
        self.get(GLOBAL_SEGMENT_ID)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.records.values().next().map(|r| r.raw_embedding.dim())
    }

    /// Records in ascending segment-id order.
    pub fn iter(&self) -> impl Iterator<Item = &SegmentRecord> {
        self.records.values()
    }

    /// Segment (non-global) records.
    pub fn segments(&self) -> impl Iterator<Item = &SegmentRecord> {
        self.records.values().filter(|r| !r.is_global())
    }

    /// Fills `refined_embedding` of every segment record by suppressing the
    /// whole-image direction. Requires the id-0 record.
    pub fn refine(&mut self, cfg: SuppressionConfig) -> Result<()> {
        let image = self
            .global()
            .ok_or(Error::MissingSegment(GLOBAL_SEGMENT_ID))?
            .raw_embedding
            .clone();
        for rec in self.records.values_mut().filter(|r| !r.is_global()) {
            rec.refined_embedding = Some(suppress_context(&rec.raw_embedding, &image, cfg)?);
        }
        Ok(())
    }
}

/// Distillation target: per-pixel teacher embeddings plus the coverage set.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherVolume {
    embeddings: DenseEmbeddingMap,
    coverage: Vec<bool>,
}

impl TeacherVolume {
    /// Validates that uncovered pixels are zero and covered pixels nonzero.
    pub fn new(embeddings: DenseEmbeddingMap, coverage: Vec<bool>) -> Result<Self> {
        if coverage.len() != embeddings.num_pixels() {
            return Err(Error::dim(embeddings.num_pixels(), coverage.len()));
        }
        for (p, &covered) in coverage.iter().enumerate() {
            let px = embeddings.pixel(p);
            if covered {
                if norm(px) < ZERO_NORM_EPS {
                    return Err(Error::zero_vector());
                }
            } else if px.iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "uncovered teacher pixel {p} carries a nonzero embedding"
                )));
            }
        }
        Ok(Self {
            embeddings,
            coverage,
        })
    }

    /// Teacher from a stored volume and the mask that defines coverage; pixels
    /// outside the mask are zeroed.
    pub fn from_volume_and_mask(mut embeddings: DenseEmbeddingMap, mask: &SegmentMaskMap) -> Result<Self> {
        if (embeddings.height(), embeddings.width()) != (mask.height(), mask.width()) {
            return Err(Error::ShapeMismatch {
                expected: (embeddings.height(), embeddings.width()),
                found: (mask.height(), mask.width()),
            });
        }
        let coverage: Vec<bool> = mask.ids().iter().map(|&id| id != 0).collect();
        for (p, &covered) in coverage.iter().enumerate() {
            if !covered {
                embeddings.pixel_mut(p).fill(0.0);
            }
        }
        Self::new(embeddings, coverage)
    }

    pub fn embeddings(&self) -> &DenseEmbeddingMap {
        &self.embeddings
    }

    pub fn coverage(&self) -> &[bool] {
        &self.coverage
    }

    pub fn covered_pixels(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    /// True when no pixel is supervised.
    pub fn is_empty(&self) -> bool {
        self.covered_pixels() == 0
    }
}

/// Places each segment's refined embedding on the pixels of its mask.
pub fn assemble_teacher_volume(
    mask: &SegmentMaskMap,
    records: &SegmentRecords,
    dim: usize,
) -> Result<TeacherVolume> {
    let mut embeddings = DenseEmbeddingMap::zeros(mask.height(), mask.width(), dim);
    let mut coverage = vec![false; mask.height() * mask.width()];
    let mut resolved: BTreeMap<u16, &[f32]> = BTreeMap::new();
    for (p, &id) in mask.ids().iter().enumerate() {
        if id == 0 {
            continue;
        }
        let src = match resolved.get(&id) {
            Some(s) => *s,
            None => {
                let refined = records
                    .get(id)
                    .and_then(|r| r.refined_embedding.as_ref())
                    .ok_or(Error::MissingSegment(id))?;
                if refined.dim() != dim {
                    return Err(Error::dim(dim, refined.dim()));
                }
                if refined.norm() < ZERO_NORM_EPS {
                    return Err(Error::ZeroSegmentEmbedding(id));
                }
                resolved.insert(id, refined.as_slice());
                refined.as_slice()
            }
        };
        embeddings.pixel_mut(p).copy_from_slice(src);
        coverage[p] = true;
    }
    Ok(TeacherVolume {
        embeddings,
        coverage,
    })
}
