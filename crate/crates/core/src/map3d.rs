//! Sparse voxel map of fused pixel embeddings.
//!
//! Posed depth images are back-projected into world space; every valid pixel's
//! embedding lands in the voxel containing its point. Cells keep a running sum of
//! unit-normalized contributions and an observation count; freezing divides out
//! the direction to a unit mean embedding per cell.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::closed_set::ProbeWeights;
use crate::embedding::{cosine_from_parts, dot, norm, EmbeddingVector, ZERO_NORM_EPS};
use crate::error::{Error, Result};
use crate::volume::DenseEmbeddingMap;

/// Integer cell index `floor(coordinate / cell_size)` per axis.
pub type VoxelKey = [i32; 3];

pub type Point3 = [f64; 3];

/// Default edge length of a cell in meters.
pub const DEFAULT_CELL_SIZE: f64 = 0.10;

/// Frozen cells whose accumulated direction is shorter than this are dropped.
pub const DROP_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr")]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per stored depth unit.
    pub depth_scale: f64,
}

#[derive(Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    depth_scale: f64,
}

impl TryFrom<IntrinsicsRepr> for CameraIntrinsics {
    type Error = Error;

    fn try_from(r: IntrinsicsRepr) -> Result<Self> {
        Self::new(r.fx, r.fy, r.cx, r.cy, r.depth_scale)
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, depth_scale: f64) -> Result<Self> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(fx) && positive(fy) && positive(depth_scale)) {
            return Err(Error::InvalidConfig(
                "fx, fy and depth_scale must be positive".into(),
            ));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::NonFinite("principal point"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            depth_scale,
        })
    }
}

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Pose {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

const POSE_TOL: f64 = 1e-6;

impl Pose {
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        if rotation.iter().flatten().chain(&translation).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pose"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| rotation[i][k] * rotation[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > POSE_TOL {
                    return Err(Error::InvalidConfig("rotation is not orthonormal".into()));
                }
            }
        }
        let r = &rotation;
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > POSE_TOL {
            return Err(Error::InvalidConfig(format!("rotation determinant {det} is not +1")));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Parses a row-major homogeneous 4x4 matrix.
    pub fn from_row_major(m: &[f64]) -> Result<Self> {
        if m.len() != 16 {
            return Err(Error::dim(16, m.len()));
        }
        let bottom = [m[12], m[13], m[14], m[15]];
        if bottom
            .iter()
            .zip([0.0, 0.0, 0.0, 1.0])
            .any(|(a, b)| (a - b).abs() > POSE_TOL)
        {
            return Err(Error::InvalidConfig("pose bottom row must be 0 0 0 1".into()));
        }
        Self::new(
            [
                [m[0], m[1], m[2]],
                [m[4], m[5], m[6]],
                [m[8], m[9], m[10]],
            ],
            [m[3], m[7], m[11]],
        )
    }

    pub fn rotation(&self) -> &[[f64; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> &[f64; 3] {
        &self.translation
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }
}

/// Raw 16-bit depth image; 0 marks missing depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthImage {
    height: usize,
    width: usize,
    data: Vec<u16>,
}

impl DepthImage {
    pub fn new(height: usize, width: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(height * width, data.len()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }
}

/// World points of all pixels with nonzero depth, with their flat pixel index.
pub fn backproject(depth: &DepthImage, intr: &CameraIntrinsics, pose: &Pose) -> Vec<(Point3, usize)> {
    let mut out = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let idx = v * depth.width + u;
            let d = depth.data[idx];
            if d == 0 {
                continue;
            }
            let z = f64::from(d) * intr.depth_scale;
            let cam = [
                (u as f64 - intr.cx) * z / intr.fx,
                (v as f64 - intr.cy) * z / intr.fy,
                z,
            ];
            out.push((pose.apply(cam), idx));
        }
    }
    out
}

/// Cell index along one axis. Coordinates within a relative 1e-9 of a multiple of
/// the cell size snap to that multiple, so `k * cell_size` maps to cell `k`.
fn axis_index(coord: f64, cell_size: f64) -> i32 {
    let q = coord / cell_size;
    let r = q.round();
    let k = if (q - r).abs() <= 1e-9 * r.abs().max(1.0) { r } else { q.floor() };
    k as i32
}

pub fn voxel_key(p: Point3, cell_size: f64) -> VoxelKey {
    [
        axis_index(p[0], cell_size),
        axis_index(p[1], cell_size),
        axis_index(p[2], cell_size),
    ]
}

/// How an observation is folded into a cell sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Accumulation {
    /// Each observation contributes its unit direction (equal weight).
    #[default]
    NormalizedPerObservation,
    /// Raw vectors are summed; larger predictions weigh more.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
struct CellAccumulator {
    sum: Vec<f64>,
    count: u32,
}

/// Mutable map under construction; single writer.
#[derive(Debug, Clone)]
pub struct MapBuilder {
    cell_size: f64,
    dim: usize,
    accumulation: Accumulation,
    cells: HashMap<VoxelKey, CellAccumulator>,
    skipped: usize,
}

/// Outcome of a batch insertion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InsertStats {
    pub inserted: usize,
    pub skipped_zero: usize,
}

impl MapBuilder {
    pub fn new(cell_size: f64, dim: usize) -> Result<Self> {
        Self::with_accumulation(cell_size, dim, Accumulation::default())
    }

    pub fn with_accumulation(cell_size: f64, dim: usize, accumulation: Accumulation) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("cell size must be positive, got {cell_size}")));
        }
        Ok(Self {
            cell_size,
            dim,
            accumulation,
            cells: HashMap::new(),
            skipped: 0,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    /// Zero-norm observations skipped so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn total_count(&self) -> u64 {
        self.cells.values().map(|c| u64::from(c.count)).sum()
    }

    /// `(sum, count)` of a cell.
    pub fn cell(&self, key: &VoxelKey) -> Option<(&[f64], u32)> {
        self.cells.get(key).map(|c| (c.sum.as_slice(), c.count))
    }

    pub fn keys(&self) -> impl Iterator<Item = &VoxelKey> {
        self.cells.keys()
    }

    /// The vector added to a cell for one observation, or `None` for a zero embedding.
    fn contribution(&self, embedding: &[f32]) -> Option<Vec<f64>> {
        let n = norm(embedding);
        if n < ZERO_NORM_EPS {
            return None;
        }
        let scale = match self.accumulation {
            Accumulation::NormalizedPerObservation => 1.0 / n,
            Accumulation::Raw => 1.0,
        };
        Some(embedding.iter().map(|&v| f64::from(v) * scale).collect())
    }

    fn check(&self, point: &Point3, embedding: &[f32]) -> Result<()> {
        if embedding.len() != self.dim {
            return Err(Error::dim(self.dim, embedding.len()));
        }
        if point.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("observation point"));
        }
        Ok(())
    }

    fn insert_unchecked(&mut self, point: Point3, embedding: &[f32]) -> bool {
        let Some(c) = self.contribution(embedding) else {
            self.skipped += 1;
            return false;
        };
        let key = voxel_key(point, self.cell_size);
        let cell = self.cells.entry(key).or_insert_with(|| CellAccumulator {
            sum: vec![0.0; c.len()],
            count: 0,
        });
        cell.sum.iter_mut().zip(&c).for_each(|(s, v)| *s += v);
        cell.count += 1;
        true
    }

    /// Inserts a batch of observations. The whole batch is validated first, so a
    /// dimension error leaves the builder untouched.
    pub fn insert<E: AsRef<[f32]>>(&mut self, observations: &[(Point3, E)]) -> Result<InsertStats> {
        for (p, e) in observations {
            self.check(p, e.as_ref())?;
        }
        let mut stats = InsertStats::default();
        for (p, e) in observations {
            if self.insert_unchecked(*p, e.as_ref()) {
                stats.inserted += 1;
            } else {
                stats.skipped_zero += 1;
            }
        }
        Ok(stats)
    }

    /// Back-projects one posed observation and inserts every valid pixel.
    pub fn insert_image(
        &mut self,
        embeddings: &DenseEmbeddingMap,
        depth: &DepthImage,
        intr: &CameraIntrinsics,
        pose: &Pose,
    ) -> Result<InsertStats> {
        if (embeddings.height(), embeddings.width()) != (depth.height(), depth.width()) {
            return Err(Error::ShapeMismatch {
                expected: (depth.height(), depth.width()),
                found: (embeddings.height(), embeddings.width()),
            });
        }
        if embeddings.dim() != self.dim {
            return Err(Error::dim(self.dim, embeddings.dim()));
        }
        let obs: Vec<(Point3, &[f32])> = backproject(depth, intr, pose)
            .into_iter()
            .map(|(p, idx)| (p, embeddings.pixel(idx)))
            .collect();
        self.insert(&obs)
    }

    /// Normalizes every cell; returns the frozen map and the keys of cells whose
    /// contributions cancelled out.
    pub fn freeze(self) -> (EmbeddingMap3D, Vec<VoxelKey>) {
        let mut cells = BTreeMap::new();
        let mut dropped = Vec::new();
        for (key, acc) in self.cells {
            let n = acc.sum.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < DROP_NORM_EPS {
                dropped.push(key);
                continue;
            }
            let mean = acc.sum.iter().map(|v| (v / n) as f32).collect();
            cells.insert(key, MapCell { mean, count: acc.count });
        }
        dropped.sort_unstable();
        (
            EmbeddingMap3D {
                cell_size: self.cell_size,
                dim: self.dim,
                cells,
            },
            dropped,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapCell {
    /// Unit mean direction.
    pub mean: Vec<f32>,
    pub count: u32,
}

/// Immutable, queryable map; cells are kept in key order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap3D {
    cell_size: f64,
    dim: usize,
    cells: BTreeMap<VoxelKey, MapCell>,
}

impl EmbeddingMap3D {
    /// Rebuilds a frozen map from stored cells, checking widths, counts and unit norms.
    pub fn from_cells(
        cell_size: f64,
        dim: usize,
        cells: impl IntoIterator<Item = (VoxelKey, MapCell)>,
    ) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidConfig(format!("cell size must be positive, got {cell_size}")));
        }
        let mut map = BTreeMap::new();
        for (key, cell) in cells {
            if cell.mean.len() != dim {
                return Err(Error::dim(dim, cell.mean.len()));
            }
            if cell.count == 0 {
                return Err(Error::InvalidConfig(format!("cell {key:?} has zero count")));
            }
            if cell.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("cell embedding"));
            }
            if (norm(&cell.mean) - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidConfig(format!("cell {key:?} embedding is not unit-norm")));
            }
            if map.insert(key, cell).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate cell {key:?}")));
            }
        }
        Ok(Self {
            cell_size,
            dim,
            cells: map,
        })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&MapCell> {
        self.cells.get(key)
    }

    /// Cells in ascending key order.
    pub fn cells(&self) -> impl ExactSizeIterator<Item = (&VoxelKey, &MapCell)> {
        self.cells.iter()
    }
}

fn sort_ranked(out: &mut [(VoxelKey, f64)]) {
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Cosine similarity of every cell to the query, best first; ties by key.
pub fn map_query(map: &EmbeddingMap3D, query: &EmbeddingVector) -> Result<Vec<(VoxelKey, f64)>> {
    map_query_multi(map, std::slice::from_ref(query))
}

/// Like [`map_query`] with several query vectors; each cell scores its best match.
pub fn map_query_multi(map: &EmbeddingMap3D, queries: &[EmbeddingVector]) -> Result<Vec<(VoxelKey, f64)>> {
    if queries.is_empty() {
        return Err(Error::InvalidConfig("no query vectors".into()));
    }
    let mut norms = Vec::with_capacity(queries.len());
    for q in queries {
        if q.dim() != map.dim {
            return Err(Error::dim(map.dim, q.dim()));
        }
        let n = q.norm();
        if n < ZERO_NORM_EPS {
            return Err(Error::zero_vector());
        }
        norms.push(dot(q.as_slice(), q.as_slice()));
    }
    let mut out: Vec<(VoxelKey, f64)> = map
        .cells
        .iter()
        .map(|(key, cell)| {
            let cc = dot(&cell.mean, &cell.mean);
            let best = queries
                .iter()
                .zip(&norms)
                .map(|(q, qq)| cosine_from_parts(dot(&cell.mean, q.as_slice()), cc, *qq))
                .fold(f64::NEG_INFINITY, f64::max);
            (*key, best)
        })
        .collect();
    sort_ranked(&mut out);
    Ok(out)
}

/// Probe class of every cell's mean embedding, in key order.
pub fn map_classify(map: &EmbeddingMap3D, w: &ProbeWeights) -> Result<Vec<(VoxelKey, u16)>> {
    if w.dim() != map.dim {
        return Err(Error::dim(map.dim, w.dim()));
    }
    Ok(map
        .cells
        .iter()
        .map(|(key, cell)| (*key, w.predict(&cell.mean)))
        .collect())
}
