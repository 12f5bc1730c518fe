//! Pixel-wise cosine distillation: loss, analytic gradient and a toy per-pixel student.
//!
//! The loss averages `1 - cos(y_p, y_hat_p)` over covered pixels only. Pixel
//! reductions run in fixed chunks of [`CHUNK_PIXELS`]; chunk partial sums are
//! combined in chunk order, so results do not depend on the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::ZERO_NORM_EPS;
use crate::error::{Error, Result};
use crate::optim::{OptimizerState, TrainConfig};
use crate::volume::{DenseEmbeddingMap, TeacherVolume};

/// Pixels per reduction chunk.
pub const CHUNK_PIXELS: usize = 256;

/// Tangent components this small relative to the teacher norm are rounding noise.
const TANGENT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub loss: f64,
    pub covered_pixels: usize,
}

/// Loss and (optionally) unscaled-then-scaled gradient over flat pixel rows.
fn cosine_kernel<T>(
    pred: &[T],
    teacher: &[f32],
    coverage: &[bool],
    dim: usize,
    grad: Option<&mut [f64]>,
) -> Result<LossReport>
where
    T: Copy + Into<f64> + Sync,
{
    let covered = coverage.iter().filter(|&&c| c).count();
    if covered == 0 {
        return Err(Error::EmptyCoverage);
    }
    if dim == 0 {
        return Err(Error::zero_vector());
    }
    let inv = 1.0 / covered as f64;
    let n = coverage.len();

    let chunk = |ci: usize, mut g: Option<&mut [f64]>| -> Result<f64> {
        let start = ci * CHUNK_PIXELS;
        let end = (start + CHUNK_PIXELS).min(n);
        let mut sum = 0.0;
        let mut tangent = Vec::with_capacity(if g.is_some() { dim } else { 0 });
        for p in start..end {
            let local = (p - start) * dim..(p - start + 1) * dim;
            if !coverage[p] {
                if let Some(g) = g.as_deref_mut() {
                    g[local].fill(0.0);
                }
                continue;
            }
            let y = &teacher[p * dim..(p + 1) * dim];
            let yh = &pred[p * dim..(p + 1) * dim];
            let (mut d, mut ny2, mut nh2) = (0.0, 0.0, 0.0);
            for (&a, &b) in y.iter().zip(yh) {
                let (a, b) = (f64::from(a), b.into());
                d += a * b;
                ny2 += a * a;
                nh2 += b * b;
            }
            let (ny, nh) = (ny2.sqrt(), nh2.sqrt());
            if ny < ZERO_NORM_EPS || nh < ZERO_NORM_EPS {
                return Err(Error::zero_vector());
            }
            let cos = d / (ny * nh);
            sum += 1.0 - cos.clamp(-1.0, 1.0);
            if let Some(g) = g.as_deref_mut() {
                // the gradient is the teacher's component orthogonal to the
                // prediction; a second projection pass removes rounding residue
                tangent.clear();
                let a = d / nh2;
                tangent.extend(y.iter().zip(yh).map(|(&yi, &hi)| f64::from(yi) - a * hi.into()));
                let c = tangent.iter().zip(yh).map(|(t, &hi)| t * hi.into()).sum::<f64>() / nh2;
                let mut tn2 = 0.0;
                for (t, &hi) in tangent.iter_mut().zip(yh) {
                    *t -= c * hi.into();
                    tn2 += *t * *t;
                }
                let dst = &mut g[local];
                if tn2.sqrt() <= TANGENT_EPS * ny {
                    dst.fill(0.0);
                } else {
                    let b = -inv / (ny * nh);
                    for (gi, t) in dst.iter_mut().zip(&tangent) {
                        *gi = b * t;
                    }
                }
            }
        }
        Ok(sum)
    };

    let partials: Vec<Result<f64>> = match grad {
        Some(g) => g
            .par_chunks_mut(CHUNK_PIXELS * dim)
            .enumerate()
            .map(|(ci, gc)| chunk(ci, Some(gc)))
            .collect(),
        None => (0..n.div_ceil(CHUNK_PIXELS))
            .into_par_iter()
            .map(|ci| chunk(ci, None))
            .collect(),
    };
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(LossReport {
        loss: total * inv,
        covered_pixels: covered,
    })
}

fn check_pred(pred: &DenseEmbeddingMap, teacher: &TeacherVolume) -> Result<()> {
    teacher.embeddings().check_same_shape(pred)
}

/// Mean cosine distance between prediction and teacher over covered pixels.
pub fn cosine_distill_loss(pred: &DenseEmbeddingMap, teacher: &TeacherVolume) -> Result<LossReport> {
    check_pred(pred, teacher)?;
    cosine_kernel(
        pred.data(),
        teacher.embeddings().data(),
        teacher.coverage(),
        pred.dim(),
        None,
    )
}

/// Gradient of [`cosine_distill_loss`] with respect to the prediction; zero on uncovered pixels.
pub fn cosine_distill_loss_grad(
    pred: &DenseEmbeddingMap,
    teacher: &TeacherVolume,
) -> Result<DenseEmbeddingMap> {
    check_pred(pred, teacher)?;
    let mut grad = vec![0.0f64; pred.data().len()];
    cosine_kernel(
        pred.data(),
        teacher.embeddings().data(),
        teacher.coverage(),
        pred.dim(),
        Some(&mut grad),
    )?;
    DenseEmbeddingMap::new(
        pred.height(),
        pred.width(),
        pred.dim(),
        grad.into_iter().map(|g| g as f32).collect(),
    )
}

/// One affine layer, `weight` stored `d_out x d_in` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub d_in: usize,
    pub d_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(d_in: usize, d_out: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != d_in * d_out {
            return Err(Error::dim(d_in * d_out, weight.len()));
        }
        if bias.len() != d_out {
            return Err(Error::dim(d_out, bias.len()));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(Self {
            d_in,
            d_out,
            weight,
            bias,
        })
    }

    /// `rows x d_in` inputs to `rows x d_out` outputs.
    fn apply(&self, input: &[f64], relu: bool) -> Vec<f64> {
        let mut out = vec![0.0; input.len() / self.d_in.max(1) * self.d_out];
        if self.d_out == 0 {
            return out;
        }
        out.par_chunks_mut(self.d_out)
            .zip(input.par_chunks(self.d_in.max(1)))
            .for_each(|(o, x)| {
                for (k, ok) in o.iter_mut().enumerate() {
                    let w = &self.weight[k * self.d_in..(k + 1) * self.d_in];
                    let mut s = self.bias[k];
                    for (wi, xi) in w.iter().zip(x) {
                        s += wi * xi;
                    }
                    *ok = if relu { s.max(0.0) } else { s };
                }
            });
        out
    }
}

/// Per-pixel multilayer student: rectifier between layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StudentParamsRepr", into = "StudentParamsRepr")]
pub struct StudentParams {
    layers: Vec<DenseLayer>,
}

#[derive(Serialize, Deserialize)]
struct StudentParamsRepr {
    layers: Vec<DenseLayer>,
}

impl TryFrom<StudentParamsRepr> for StudentParams {
    type Error = Error;

    fn try_from(r: StudentParamsRepr) -> Result<Self> {
        Self::new(
            r.layers
                .into_iter()
                .map(|l| DenseLayer::new(l.d_in, l.d_out, l.weight, l.bias))
                .collect::<Result<_>>()?,
        )
    }
}

impl From<StudentParams> for StudentParamsRepr {
    fn from(p: StudentParams) -> Self {
        Self { layers: p.layers }
    }
}

impl StudentParams {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("student needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].d_out != pair[1].d_in {
                return Err(Error::dim(pair[0].d_out, pair[1].d_in));
            }
        }
        Ok(Self { layers })
    }

    /// He-normal weights and zero biases for the layer widths `dims[0] -> ... -> dims[n]`.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("need input and output widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (d_in, d_out) = (w[0], w[1]);
                let std = (2.0 / d_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                let weight = (0..d_in * d_out).map(|_| normal.sample(&mut rng)).collect();
                DenseLayer::new(d_in, d_out, weight, vec![0.0; d_out])
            })
            .collect::<Result<_>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].d_out
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Activations for each layer boundary; entry 0 is the input.
    fn forward_all(&self, input: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.apply(acts.last().expect("nonempty"), i != last);
            acts.push(next);
        }
        acts
    }

    /// Gradients of every layer given the gradient at the output rows.
    fn backward(&self, acts: &[Vec<f64>], mut upstream: Vec<f64>) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![(Vec::new(), Vec::new()); self.layers.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (d_in, d_out) = (layer.d_in, layer.d_out);
            let input = &acts[l];
            let rows = input.len() / d_in.max(1);

            let mut dw = vec![0.0; d_out * d_in];
            dw.par_chunks_mut(d_in.max(1))
                .enumerate()
                .for_each(|(k, row)| {
                    for n in 0..rows {
                        let g = upstream[n * d_out + k];
                        if g != 0.0 {
                            for (r, x) in row.iter_mut().zip(&input[n * d_in..(n + 1) * d_in]) {
                                *r += g * x;
                            }
                        }
                    }
                });
            let mut db = vec![0.0; d_out];
            for n in 0..rows {
                for (b, g) in db.iter_mut().zip(&upstream[n * d_out..(n + 1) * d_out]) {
                    *b += g;
                }
            }

            if l > 0 {
                let mut down = vec![0.0; rows * d_in];
                down.par_chunks_mut(d_in.max(1))
                    .zip(upstream.par_chunks(d_out.max(1)))
                    .zip(input.par_chunks(d_in.max(1)))
                    .for_each(|((dx, g), x)| {
                        for (k, &gk) in g.iter().enumerate() {
                            if gk == 0.0 {
                                continue;
                            }
                            let w = &layer.weight[k * d_in..(k + 1) * d_in];
                            for (d, wi) in dx.iter_mut().zip(w) {
                                *d += gk * wi;
                            }
                        }
                        // rectifier derivative: the input to this layer is a ReLU output
                        for (d, &xi) in dx.iter_mut().zip(x) {
                            if xi <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    });
                upstream = down;
            }
            grads[l] = (dw, db);
        }
        grads
    }
}

/// Applies the student independently to every pixel of a feature map.
pub fn student_forward(features: &DenseEmbeddingMap, params: &StudentParams) -> Result<DenseEmbeddingMap> {
    if features.dim() != params.input_dim() {
        return Err(Error::dim(params.input_dim(), features.dim()));
    }
    let input = features.data().iter().map(|&v| f64::from(v)).collect();
    let out = params.forward_all(input).pop().expect("output layer");
    DenseEmbeddingMap::new(
        features.height(),
        features.width(),
        params.output_dim(),
        out.into_iter().map(|v| v as f32).collect(),
    )
}

/// Full-batch cosine distillation of `init` toward the teacher volumes.
///
/// All samples are pooled into one batch, so the reported loss averages over every
/// covered pixel of every sample. Returns the final parameters and the loss measured
/// before each update.
pub fn train_student(
    samples: &[(DenseEmbeddingMap, TeacherVolume)],
    cfg: &TrainConfig,
    init: StudentParams,
) -> Result<(StudentParams, Vec<f64>)> {
    cfg.validate()?;
    let (f_dim, e_dim) = (init.input_dim(), init.output_dim());
    let mut input = Vec::new();
    let mut target = Vec::new();
    let mut coverage = Vec::new();
    for (features, teacher) in samples {
        if features.dim() != f_dim {
            return Err(Error::dim(f_dim, features.dim()));
        }
        let t = teacher.embeddings();
        if t.dim() != e_dim {
            return Err(Error::dim(e_dim, t.dim()));
        }
        if (features.height(), features.width()) != (t.height(), t.width()) {
            return Err(Error::ShapeMismatch {
                expected: (t.height(), t.width()),
                found: (features.height(), features.width()),
            });
        }
        input.extend(features.data().iter().map(|&v| f64::from(v)));
        target.extend_from_slice(t.data());
        coverage.extend_from_slice(teacher.coverage());
    }
    if !coverage.iter().any(|&c| c) {
        return Err(Error::EmptyCoverage);
    }
    if cfg.iterations == 0 {
        return Ok((init, Vec::new()));
    }

    let mut params = init;
    let slots: Vec<usize> = params
        .layers
        .iter()
        .flat_map(|l| [l.weight.len(), l.bias.len()])
        .collect();
    let mut opt = OptimizerState::new(cfg, &slots);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut grad_out = vec![0.0; coverage.len() * e_dim];

    for _ in 0..cfg.iterations {
        let acts = params.forward_all(input.clone());
        let pred = acts.last().expect("output layer");
        let report = cosine_kernel(pred, &target, &coverage, e_dim, Some(&mut grad_out))?;
        if !report.loss.is_finite() {
            return Err(Error::NonFinite("distillation loss"));
        }
        history.push(report.loss);

        let grads = params.backward(&acts, grad_out.clone());
        opt.begin_step();
        for (i, (layer, (dw, db))) in params.layers.iter_mut().zip(&grads).enumerate() {
            opt.update(2 * i, &mut layer.weight, dw);
            opt.update(2 * i + 1, &mut layer.bias, db);
        }
        if !params.is_finite() {
            return Err(Error::NonFinite("student parameters"));
        }
    }
    Ok((params, history))
}
