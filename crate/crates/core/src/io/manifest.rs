//! JSON manifests. Relative paths resolve against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::binary::{read_label_map, read_mask_map, read_segment_records, read_volume};
use super::pgm::read_depth_pgm;
use crate::closed_set::LabelMap;
use crate::embedding::{SuppressionConfig, DEFAULT_ALPHA};
use crate::error::{Error, Result};
use crate::map3d::{CameraIntrinsics, DepthImage, Pose};
use crate::volume::{assemble_teacher_volume, DenseEmbeddingMap, TeacherVolume};

fn load_records<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, PathBuf)> {
    let text = fs::read_to_string(path)?;
    let records = serde_json::from_str(&text).map_err(|e| Error::BadSchema(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((records, base))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// One student-training sample. The teacher comes either from a dense volume
/// (`teacher`) or from segment records refined at `alpha` (`segments`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSampleEntry {
    pub features: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

pub fn load_student_manifest(path: impl AsRef<Path>) -> Result<Vec<(DenseEmbeddingMap, TeacherVolume)>> {
    let (entries, base) = load_records::<StudentSampleEntry>(path.as_ref())?;
    entries
        .into_iter()
        .map(|e| {
            let features = read_volume(resolve(&base, &e.features))?;
            let mask = read_mask_map(resolve(&base, &e.mask))?;
            let teacher = match (&e.teacher, &e.segments) {
                (Some(t), None) => TeacherVolume::from_volume_and_mask(read_volume(resolve(&base, t))?, &mask)?,
                (None, Some(s)) => {
                    let mut records = read_segment_records(resolve(&base, s))?;
                    records.refine(SuppressionConfig::new(e.alpha.unwrap_or(DEFAULT_ALPHA))?)?;
                    let dim = records.dim().ok_or(Error::MissingSegment(0))?;
                    assemble_teacher_volume(&mask, &records, dim)?
                }
                _ => {
                    return Err(Error::BadSchema(
                        "student sample needs exactly one of `teacher` or `segments`".into(),
                    ))
                }
            };
            Ok((features, teacher))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSampleEntry {
    pub map: PathBuf,
    pub labels: PathBuf,
}

pub fn load_probe_manifest(path: impl AsRef<Path>) -> Result<Vec<(DenseEmbeddingMap, LabelMap)>> {
    let (entries, base) = load_records::<ProbeSampleEntry>(path.as_ref())?;
    entries
        .into_iter()
        .map(|e| Ok((read_volume(resolve(&base, &e.map))?, read_label_map(resolve(&base, &e.labels))?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanEntry {
    pub embedding_map: PathBuf,
    pub depth: PathBuf,
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-world, row-major 4x4.
    pub pose: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Scan {
    pub embeddings: DenseEmbeddingMap,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
    pub pose: Pose,
}

pub fn load_scan_manifest(path: impl AsRef<Path>) -> Result<Vec<Scan>> {
    let (entries, base) = load_records::<ScanEntry>(path.as_ref())?;
    entries
        .into_iter()
        .map(|e| {
            Ok(Scan {
                embeddings: read_volume(resolve(&base, &e.embedding_map))?,
                depth: read_depth_pgm(resolve(&base, &e.depth))?,
                intrinsics: e.intrinsics,
                pose: Pose::from_row_major(&e.pose)?,
            })
        })
        .collect()
}

/// Volume to expose through the query service, with an optional display image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeEntry {
    pub id: String,
    pub volume: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

/// Parses the entries and resolves their paths without opening them.
pub fn load_serve_manifest(path: impl AsRef<Path>) -> Result<Vec<ServeEntry>> {
    let (entries, base) = load_records::<ServeEntry>(path.as_ref())?;
    Ok(entries
        .into_iter()
        .map(|e| ServeEntry {
            volume: resolve(&base, &e.volume),
            image: e.image.map(|p| resolve(&base, &p)),
            id: e.id,
        })
        .collect())
}
