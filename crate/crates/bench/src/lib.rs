//! Deterministic inputs shared by the benchmarks.

use dve_core::synth::{self, random_unit, to_f32};
use dve_core::{DenseEmbeddingMap, EmbeddingVector, ReferenceSet, TeacherVolume};

pub fn unit_vector(seed: u64, dim: usize) -> EmbeddingVector {
    EmbeddingVector::new(to_f32(&random_unit(&mut synth::rng(seed), dim))).expect("finite")
}

pub fn volume(seed: u64, height: usize, width: usize, dim: usize) -> DenseEmbeddingMap {
    synth::random_volume(&mut synth::rng(seed), height, width, dim)
}

/// Teacher covering every pixel.
pub fn full_teacher(seed: u64, height: usize, width: usize, dim: usize) -> TeacherVolume {
    TeacherVolume::new(volume(seed, height, width, dim), vec![true; height * width]).expect("nonzero teacher")
}

pub fn references(seed: u64, classes: usize, dim: usize) -> ReferenceSet {
    let rows: Vec<_> = (0..classes).map(|c| unit_vector(seed + c as u64, dim)).collect();
    let names = (0..classes).map(|c| format!("class {c}")).collect();
    ReferenceSet::new(names, &rows).expect("valid references")
}

/// Points on a `side^3` lattice with spacing `step`, each with an embedding.
pub fn lattice_observations(seed: u64, side: usize, step: f64, dim: usize) -> Vec<([f64; 3], Vec<f32>)> {
    let mut rng = synth::rng(seed);
    let mut out = Vec::with_capacity(side * side * side);
    for i in 0..side {
        for j in 0..side {
            for k in 0..side {
                let p = [i as f64 * step, j as f64 * step, k as f64 * step];
                out.push((p, to_f32(&random_unit(&mut rng, dim))));
            }
        }
    }
    out
}
