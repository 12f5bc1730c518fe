//! Seeded synthetic data for tests, benchmarks and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::closed_set::LabelMap;
use crate::embedding::{dot, norm};
use crate::volume::{DenseEmbeddingMap, TeacherVolume};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            sigma * z
        })
        .collect()
}

pub fn random_unit<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vec(rng, dim, 1.0);
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit vector whose cosine with `anchor` is exactly `cos` (up to rounding).
pub fn unit_at_cosine<R: Rng + ?Sized>(rng: &mut R, anchor: &[f64], cos: f64) -> Vec<f64> {
    let an = anchor.iter().map(|x| x * x).sum::<f64>().sqrt();
    let a: Vec<f64> = anchor.iter().map(|x| x / an).collect();
    let u = loop {
        let r = gaussian_vec(rng, a.len(), 1.0);
        let p: f64 = r.iter().zip(&a).map(|(x, y)| x * y).sum();
        let o: Vec<f64> = r.iter().zip(&a).map(|(x, y)| x - p * y).collect();
        let n = o.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            break o.into_iter().map(|x| x / n).collect::<Vec<_>>();
        }
    };
    let s = (1.0 - cos * cos).max(0.0).sqrt();
    a.iter().zip(&u).map(|(x, y)| cos * x + s * y).collect()
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Volume with i.i.d. standard-normal entries.
pub fn random_volume<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, dim: usize) -> DenseEmbeddingMap {
    let data = to_f32(&gaussian_vec(rng, height * width * dim, 1.0));
    DenseEmbeddingMap::new(height, width, dim, data).expect("consistent shape")
}

/// Features plus a teacher that is exactly `matrix · feature` at every pixel.
pub struct LinearTask {
    pub features: DenseEmbeddingMap,
    pub teacher: TeacherVolume,
    /// Row-major `d_out × d_in`.
    pub matrix: Vec<f64>,
}

pub fn linear_task(seed: u64, height: usize, width: usize, d_in: usize, d_out: usize) -> LinearTask {
    let mut r = rng(seed);
    let matrix = gaussian_vec(&mut r, d_out * d_in, 1.0 / (d_in as f64).sqrt());
    loop {
        let features = random_volume(&mut r, height, width, d_in);
        let mut teacher = DenseEmbeddingMap::zeros(height, width, d_out);
        for p in 0..features.num_pixels() {
            let x = features.pixel(p);
            for (o, t) in teacher.pixel_mut(p).iter_mut().enumerate() {
                *t = dot(&to_f32(&matrix[o * d_in..(o + 1) * d_in]), x) as f32;
            }
        }
        // resample in the (improbable) event a teacher pixel vanishes
        if teacher.pixels().all(|t| norm(t) > 1e-6) {
            let coverage = vec![true; features.num_pixels()];
            let teacher = TeacherVolume::new(teacher, coverage).expect("all pixels nonzero");
            return LinearTask {
                features,
                teacher,
                matrix,
            };
        }
    }
}

/// Pixels drawn from `centers.len()` Gaussian clusters.
pub struct ClusterScene {
    pub map: DenseEmbeddingMap,
    pub labels: LabelMap,
    /// Unit cluster centers.
    pub centers: Vec<Vec<f64>>,
}

/// Two clusters with unit centers at cosine `center_cos`, isotropic per-component
/// noise `sigma`, labels drawn uniformly.
pub fn two_clusters(seed: u64, height: usize, width: usize, dim: usize, center_cos: f64, sigma: f64) -> ClusterScene {
    let mut r = rng(seed);
    let c0 = random_unit(&mut r, dim);
    let c1 = unit_at_cosine(&mut r, &c0, center_cos);
    clusters(&mut r, height, width, vec![c0, c1], sigma)
}

pub fn clusters<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    centers: Vec<Vec<f64>>,
    sigma: f64,
) -> ClusterScene {
    let dim = centers[0].len();
    let mut data = Vec::with_capacity(height * width * dim);
    let mut labels = Vec::with_capacity(height * width);
    for _ in 0..height * width {
        let k = rng.random_range(0..centers.len());
        let noise = gaussian_vec(rng, dim, sigma);
        data.extend(centers[k].iter().zip(&noise).map(|(c, n)| (c + n) as f32));
        labels.push(k as u16);
    }
    ClusterScene {
        map: DenseEmbeddingMap::new(height, width, dim, data).expect("consistent shape"),
        labels: LabelMap::new(height, width, labels).expect("consistent shape"),
        centers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_construction() {
        let mut r = rng(3);
        let a = random_unit(&mut r, 16);
        for target in [-0.5, 0.0, 0.2, 0.9, 1.0] {
            let b = unit_at_cosine(&mut r, &a, target);
            let c: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let n: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((c - target).abs() < 1e-12);
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_generators_repeat() {
        let a = two_clusters(5, 4, 4, 8, 0.2, 0.05);
        let b = two_clusters(5, 4, 4, 8, 0.2, 0.05);
        assert_eq!(a.map, b.map);
        assert_eq!(a.labels, b.labels);
        let t = linear_task(1, 3, 3, 4, 5);
        assert_eq!(t.teacher.covered_pixels(), 9);
        assert_eq!(t.teacher.embeddings().dim(), 5);
    }
}
