//! Closed-set segmentation from dense embeddings.
//!
//! Three ways to turn a pixel embedding into one of `C` classes: cosine arg-max
//! against text references, cosine arg-max against visual-mean references, and
//! an affine probe trained with softmax cross-entropy. All arg-max ties go to the
//! lowest class index.

use std::collections::HashMap;

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedDiv, ToPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_from_parts, cosine_unchecked, dot, norm, normalize_slice, EmbeddingVector, ZERO_NORM_EPS};
use crate::error::{Error, Result};
use crate::optim::{OptimizerState, TrainConfig};
use crate::volume::{DenseEmbeddingMap, SegmentRecord};

/// Label value for pixels that carry no class.
pub const IGNORE_LABEL: u16 = 0xFFFF;

/// Per-class reference directions.
///
/// Each class owns one or more unit rows; a pixel's class score is its best cosine
/// over the class's rows (max aggregation for multi-prompt classes).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    class_names: Vec<String>,
    dim: usize,
    rows: Vec<f32>,
    row_class: Vec<usize>,
}

impl ReferenceSet {
    /// One row per class; rows are normalized on construction.
    pub fn new(class_names: Vec<String>, rows: &[EmbeddingVector]) -> Result<Self> {
        if class_names.len() != rows.len() {
            return Err(Error::dim(class_names.len(), rows.len()));
        }
        let entries: Vec<(String, EmbeddingVector)> =
            class_names.into_iter().zip(rows.iter().cloned()).collect();
        let set = Self::from_named_rows(&entries)?;
        if set.num_rows() != set.num_classes() {
            return Err(Error::InvalidConfig("class names must be unique".into()));
        }
        Ok(set)
    }

    /// Groups rows by name in order of first appearance; repeated names add rows
    /// to an existing class.
    pub fn from_named_rows(entries: &[(String, EmbeddingVector)]) -> Result<Self> {
        let Some((_, first)) = entries.first() else {
            return Err(Error::InvalidConfig("reference set needs at least one class".into()));
        };
        let dim = first.dim();
        let mut class_names = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut rows = Vec::with_capacity(entries.len() * dim);
        let mut row_class = Vec::with_capacity(entries.len());
        for (name, v) in entries {
            if v.dim() != dim {
                return Err(Error::dim(dim, v.dim()));
            }
            let class = *index.entry(name.as_str()).or_insert_with(|| {
                class_names.push(name.clone());
                class_names.len() - 1
            });
            rows.extend(normalize_slice(v.as_slice())?);
            row_class.push(class);
        }
        Ok(Self {
            class_names,
            dim,
            rows,
            row_class,
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_rows(&self) -> usize {
        self.row_class.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.rows[r * self.dim..(r + 1) * self.dim]
    }

    /// Class owning row `r`.
    pub fn row_class(&self, r: usize) -> usize {
        self.row_class[r]
    }

    /// (name, unit row) pairs, one per row.
    pub fn named_rows(&self) -> impl Iterator<Item = (&str, &[f32])> {
        (0..self.num_rows()).map(|r| (self.class_names[self.row_class[r]].as_str(), self.row(r)))
    }

    /// Best cosine per class and the arg-max class for one pixel; `None` for a zero pixel.
    pub fn classify_pixel(&self, px: &[f32]) -> Option<(u16, f64)> {
        let pp = dot(px, px);
        if pp.sqrt() < ZERO_NORM_EPS {
            return None;
        }
        let mut scores = vec![f64::NEG_INFINITY; self.num_classes()];
        for r in 0..self.num_rows() {
            let row = self.row(r);
            let cos = cosine_from_parts(dot(px, row), pp, dot(row, row));
            let s = &mut scores[self.row_class[r]];
            if cos > *s {
                *s = cos;
            }
        }
        let (best, score) = argmax(&scores);
        Some((best as u16, score))
    }
}

/// Index and value of the first maximum.
fn argmax(scores: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    (best, scores[best])
}

/// Per-pixel class ids; [`IGNORE_LABEL`] marks unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::dim(height * width, labels.len()));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && usize::from(l) >= classes)
        {
            Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
            None => Ok(()),
        }
    }

    fn check_shape(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::ShapeMismatch {
                expected: (height, width),
                found: (self.height, self.width),
            });
        }
        Ok(())
    }
}

/// Result of cosine arg-max classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub labels: LabelMap,
    /// Winning cosine per pixel; 0 at ignored pixels.
    pub similarity: Vec<f64>,
    /// Zero-norm pixels labeled [`IGNORE_LABEL`].
    pub ignored_pixels: usize,
}

/// Assigns every pixel the class with the highest cosine similarity.
pub fn classify_argmax(map: &DenseEmbeddingMap, refs: &ReferenceSet) -> Result<Classification> {
    if map.dim() != refs.dim() {
        return Err(Error::dim(refs.dim(), map.dim()));
    }
    let per_pixel: Vec<Option<(u16, f64)>> = (0..map.num_pixels())
        .into_par_iter()
        .map(|p| refs.classify_pixel(map.pixel(p)))
        .collect();
    let mut labels = Vec::with_capacity(per_pixel.len());
    let mut similarity = Vec::with_capacity(per_pixel.len());
    let mut ignored_pixels = 0;
    for r in per_pixel {
        match r {
            Some((l, s)) => {
                labels.push(l);
                similarity.push(s);
            }
            None => {
                labels.push(IGNORE_LABEL);
                similarity.push(0.0);
                ignored_pixels += 1;
            }
        }
    }
    Ok(Classification {
        labels: LabelMap::new(map.height(), map.width(), labels)?,
        similarity,
        ignored_pixels,
    })
}

/// Per-pixel cosine similarity to a query given as one or more vectors (best
/// vector wins). Zero-norm pixels score 0.
pub fn similarity_map(map: &DenseEmbeddingMap, queries: &[EmbeddingVector]) -> Result<Vec<f64>> {
    if queries.is_empty() {
        return Err(Error::InvalidConfig("similarity query needs at least one vector".into()));
    }
    for q in queries {
        if q.dim() != map.dim() {
            return Err(Error::dim(map.dim(), q.dim()));
        }
        if q.norm() < ZERO_NORM_EPS {
            return Err(Error::zero_vector());
        }
    }
    Ok((0..map.num_pixels())
        .into_par_iter()
        .map(|p| {
            let px = map.pixel(p);
            if norm(px) < ZERO_NORM_EPS {
                return 0.0;
            }
            queries
                .iter()
                .map(|q| cosine_unchecked(px, q.as_slice()))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect())
}

/// Which embedding of a segment record feeds the visual means.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    #[default]
    Refined,
    Raw,
}

/// Mean embedding of all segments of each class, normalized. Row `k` belongs to
/// `classes[k]`; records of other classes, unclassified records and whole-image
/// records are skipped.
pub fn visual_mean_references<'a>(
    records: impl IntoIterator<Item = &'a SegmentRecord>,
    classes: &[(u16, String)],
    source: EmbeddingSource,
) -> Result<ReferenceSet> {
    let slot: HashMap<u16, usize> = classes.iter().enumerate().map(|(i, (c, _))| (*c, i)).collect();
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; classes.len()];
    for rec in records {
        if rec.is_global() {
            continue;
        }
        let Some(&k) = rec.class_id.as_ref().and_then(|c| slot.get(c)) else {
            continue;
        };
        let emb = match source {
            EmbeddingSource::Refined => match &rec.refined_embedding {
                Some(e) => e,
                None => continue,
            },
            EmbeddingSource::Raw => &rec.raw_embedding,
        };
        let (sum, count) = sums[k].get_or_insert_with(|| (vec![0.0; emb.dim()], 0));
        if sum.len() != emb.dim() {
            return Err(Error::dim(sum.len(), emb.dim()));
        }
        for (s, &v) in sum.iter_mut().zip(emb.as_slice()) {
            *s += f64::from(v);
        }
        *count += 1;
    }
    let mut entries = Vec::with_capacity(classes.len());
    let mut dim = None;
    for ((class, name), acc) in classes.iter().zip(sums) {
        let (sum, count) = acc.ok_or(Error::EmptyClass(*class))?;
        let d = *dim.get_or_insert(sum.len());
        if d != sum.len() {
            return Err(Error::dim(d, sum.len()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let n = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        if n < ZERO_NORM_EPS {
            return Err(Error::zero_vector());
        }
        let unit = mean.iter().map(|m| (m / n) as f32).collect();
        entries.push((name.clone(), EmbeddingVector::new(unit)?));
    }
    let set = ReferenceSet::from_named_rows(&entries)?;
    if set.num_rows() != set.num_classes() {
        return Err(Error::InvalidConfig("class names must be unique".into()));
    }
    Ok(set)
}

/// Affine classifier `scores = weight * x + bias`, `weight` stored `classes x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProbeRepr", into = "ProbeRepr")]
pub struct ProbeWeights {
    classes: usize,
    dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProbeRepr {
    classes: usize,
    dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl TryFrom<ProbeRepr> for ProbeWeights {
    type Error = Error;

    fn try_from(r: ProbeRepr) -> Result<Self> {
        Self::new(r.classes, r.dim, r.weight, r.bias)
    }
}

impl From<ProbeWeights> for ProbeRepr {
    fn from(p: ProbeWeights) -> Self {
        Self {
            classes: p.classes,
            dim: p.dim,
            weight: p.weight,
            bias: p.bias,
        }
    }
}

impl ProbeWeights {
    pub fn new(classes: usize, dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes == 0 {
            return Err(Error::InvalidConfig("probe needs at least one class".into()));
        }
        if weight.len() != classes * dim {
            return Err(Error::dim(classes * dim, weight.len()));
        }
        if bias.len() != classes {
            return Err(Error::dim(classes, bias.len()));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probe weights"));
        }
        Ok(Self {
            classes,
            dim,
            weight,
            bias,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn scores(&self, x: &[f32]) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.scores_into(x, &mut out);
        out
    }

    fn scores_into(&self, x: &[f32], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let w = &self.weight[c * self.dim..(c + 1) * self.dim];
            *o = self.bias[c] + w.iter().zip(x).map(|(wi, &xi)| wi * f64::from(xi)).sum::<f64>();
        }
    }

    /// Arg-max class of the affine scores.
    pub fn predict(&self, x: &[f32]) -> u16 {
        argmax(&self.scores(x)).0 as u16
    }
}

pub fn probe_predict(map: &DenseEmbeddingMap, w: &ProbeWeights) -> Result<LabelMap> {
    if map.dim() != w.dim() {
        return Err(Error::dim(w.dim(), map.dim()));
    }
    let labels = (0..map.num_pixels())
        .into_par_iter()
        .map(|p| w.predict(map.pixel(p)))
        .collect();
    LabelMap::new(map.height(), map.width(), labels)
}

const PROBE_CHUNK: usize = 512;

/// Mean softmax cross-entropy and its gradients over labeled rows.
fn probe_loss_grad(w: &ProbeWeights, rows: &[(&[f32], usize)]) -> (f64, Vec<f64>, Vec<f64>) {
    let (c, d) = (w.classes, w.dim);
    let partials: Vec<(f64, Vec<f64>, Vec<f64>)> = rows
        .par_chunks(PROBE_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut gw = vec![0.0; c * d];
            let mut gb = vec![0.0; c];
            let mut s = vec![0.0; c];
            for &(x, label) in chunk {
                w.scores_into(x, &mut s);
                let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - max).exp()).sum();
                loss += z.ln() + max - s[label];
                for k in 0..c {
                    let g = (s[k] - max).exp() / z - if k == label { 1.0 } else { 0.0 };
                    gb[k] += g;
                    for (gwi, &xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gwi += g * f64::from(xi);
                    }
                }
            }
            (loss, gw, gb)
        })
        .collect();
    let n = rows.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; c * d];
    let mut gb = vec![0.0; c];
    for (l, w_part, b_part) in partials {
        loss += l;
        gw.iter_mut().zip(w_part).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(b_part).for_each(|(a, b)| *a += b);
    }
    gw.iter_mut().for_each(|g| *g /= n);
    gb.iter_mut().for_each(|g| *g /= n);
    (loss / n, gw, gb)
}

/// Trains an affine probe on frozen pixel embeddings; returns the weights and the
/// cross-entropy measured before each update.
pub fn train_linear_probe_with_history(
    samples: &[(DenseEmbeddingMap, LabelMap)],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(ProbeWeights, Vec<f64>)> {
    cfg.validate()?;
    if classes == 0 {
        return Err(Error::InvalidConfig("probe needs at least one class".into()));
    }
    let dim = samples.first().map_or(0, |(m, _)| m.dim());
    let mut rows: Vec<(&[f32], usize)> = Vec::new();
    for (map, labels) in samples {
        if map.dim() != dim {
            return Err(Error::dim(dim, map.dim()));
        }
        labels.check_shape(map.height(), map.width())?;
        labels.check_classes(classes)?;
        for (p, &l) in labels.labels().iter().enumerate() {
            if l != IGNORE_LABEL {
                rows.push((map.pixel(p), usize::from(l)));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::NoLabeledPixels);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 0.01).expect("finite std");
    let weight = (0..classes * dim).map(|_| normal.sample(&mut rng)).collect();
    let mut probe = ProbeWeights::new(classes, dim, weight, vec![0.0; classes])?;

    let mut opt = OptimizerState::new(cfg, &[classes * dim, classes]);
    let mut history = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let (loss, gw, gb) = probe_loss_grad(&probe, &rows);
        if !loss.is_finite() {
            return Err(Error::NonFinite("probe cross-entropy"));
        }
        history.push(loss);
        opt.begin_step();
        opt.update(0, &mut probe.weight, &gw);
        opt.update(1, &mut probe.bias, &gb);
        if probe.weight.iter().chain(&probe.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("probe weights"));
        }
    }
    Ok((probe, history))
}

pub fn train_linear_probe(
    samples: &[(DenseEmbeddingMap, LabelMap)],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<ProbeWeights> {
    train_linear_probe_with_history(samples, classes, cfg).map(|(w, _)| w)
}

/// Fraction of non-ignore ground-truth pixels predicted correctly.
pub fn pixel_accuracy(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    pred.check_shape(gt.height, gt.width)?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g != IGNORE_LABEL {
            total += 1;
            hit += usize::from(p == g);
        }
    }
    if total == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    /// Every non-excluded class in ascending order; `None` where the union is empty.
    pub per_class_iou: Vec<(u16, Option<f64>)>,
    /// Mean over classes with a defined IoU.
    pub mean_iou: f64,
    pub excluded_classes: Vec<u16>,
    /// `classes x classes` pixel counts, row = ground truth, column = prediction.
    pub confusion: Vec<u64>,
}

/// Mean intersection over union over pixels whose ground truth is neither
/// ignored nor excluded.
/// Mean of `num/den` fractions, summed exactly when the common denominator fits in
/// 128 bits so the result is the correctly rounded f64; plain f64 sum otherwise.
fn mean_of_ratios(ratios: &[(u64, u64)]) -> f64 {
    let exact = ratios
        .iter()
        .try_fold(Ratio::from_integer(0u128), |acc, &(a, b)| {
            acc.checked_add(&Ratio::new(u128::from(a), u128::from(b)))
        })
        .and_then(|sum| sum.checked_div(&Ratio::from_integer(ratios.len() as u128)))
        .and_then(|mean| mean.to_f64());
    exact.unwrap_or_else(|| ratios.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / ratios.len() as f64)
}

pub fn evaluate_miou(
    pred: &LabelMap,
    gt: &LabelMap,
    classes: usize,
    excluded: &[u16],
) -> Result<MiouReport> {
    pred.check_shape(gt.height, gt.width)?;
    gt.check_classes(classes)?;
    pred.check_classes(classes)?;
    let is_excluded = |c: u16| excluded.contains(&c);

    let mut confusion = vec![0u64; classes * classes];
    let mut missed = vec![0u64; classes];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        if g == IGNORE_LABEL || is_excluded(g) {
            continue;
        }
        if p == IGNORE_LABEL {
            // an unlabeled prediction is a miss for the true class
            missed[usize::from(g)] += 1;
        } else {
            confusion[usize::from(g) * classes + usize::from(p)] += 1;
        }
    }

    let mut per_class_iou = Vec::new();
    let mut ratios = Vec::new();
    for c in 0..classes {
        if is_excluded(c as u16) {
            continue;
        }
        let tp = confusion[c * classes + c];
        let row: u64 = confusion[c * classes..(c + 1) * classes].iter().sum::<u64>() + missed[c];
        let col: u64 = (0..classes).map(|r| confusion[r * classes + c]).sum();
        let union = row + col - tp;
        let iou = (union > 0).then(|| tp as f64 / union as f64);
        if union > 0 {
            ratios.push((tp, union));
        }
        per_class_iou.push((c as u16, iou));
    }
    if ratios.is_empty() {
        return Err(Error::NoLabeledPixels);
    }
    let mut excluded_classes = excluded.to_vec();
    excluded_classes.sort_unstable();
    excluded_classes.dedup();
    Ok(MiouReport {
        per_class_iou,
        mean_iou: mean_of_ratios(&ratios),
        excluded_classes,
        confusion,
    })
}
