use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use dve_core::io::{encode_heatmap_pgm, encode_label_map};
use dve_core::map3d::map_query_multi;
use dve_core::{classify_argmax, probe_predict, similarity_map, EmbeddingVector, LabelMap, VoxelKey};
use serde::{Deserialize, Serialize};

use crate::embedder::embed_prompt;
use crate::error::{Result, ServiceError};
use crate::session::{Session, MAP_TARGET};

pub const DEFAULT_TOP_K: usize = 100;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    /// Image id, or `"map"` for the 3D map.
    pub target: String,
    pub prompt: String,
    #[serde(default)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Self { min, max, mean }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSimilarity {
    pub image: String,
    pub height: usize,
    pub width: usize,
    pub similarities: Vec<f64>,
    pub stats: Stats,
    pub pgm: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellHit {
    pub key: VoxelKey,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QueryArtifact {
    Image(ImageSimilarity),
    Map(Vec<CellHit>),
}

#[derive(Serialize)]
#[serde(tag = "target", rename_all = "lowercase")]
enum QueryJson<'a> {
    Image {
        image: &'a str,
        height: usize,
        width: usize,
        stats: Stats,
        pgm: String,
    },
    Map {
        results: &'a [CellHit],
    },
}

impl QueryArtifact {
    pub fn to_json(&self) -> serde_json::Value {
        let body = match self {
            QueryArtifact::Image(img) => QueryJson::Image {
                image: &img.image,
                height: img.height,
                width: img.width,
                stats: img.stats,
                pgm: B64.encode(&img.pgm),
            },
            QueryArtifact::Map(hits) => QueryJson::Map { results: hits },
        };
        serde_json::to_value(body).expect("query response serializes")
    }
}

/// Query against already-embedded prompt vectors (max over vectors).
pub fn query_with_vectors(
    session: &Session,
    target: &str,
    vectors: &[EmbeddingVector],
    top_k: Option<usize>,
) -> Result<QueryArtifact> {
    if target == MAP_TARGET {
        let map = session.map().ok_or(ServiceError::NoMapLoaded)?;
        let mut ranked = map_query_multi(map, vectors)?;
        ranked.truncate(top_k.unwrap_or(DEFAULT_TOP_K));
        return Ok(QueryArtifact::Map(
            ranked
                .into_iter()
                .map(|(key, similarity)| CellHit { key, similarity })
                .collect(),
        ));
    }
    let vol = session.volume(target)?;
    let sims = similarity_map(&vol.map, vectors)?;
    Ok(QueryArtifact::Image(ImageSimilarity {
        image: target.to_string(),
        height: vol.map.height(),
        width: vol.map.width(),
        stats: Stats::of(&sims),
        pgm: encode_heatmap_pgm(vol.map.width(), vol.map.height(), &sims)?,
        similarities: sims,
    }))
}

fn check_target(session: &Session, target: &str) -> Result<()> {
    if target == MAP_TARGET {
        session.map().map(|_| ()).ok_or(ServiceError::NoMapLoaded)
    } else {
        session.volume(target).map(|_| ())
    }
}

/// Embeds the prompt (bank, then provider) and runs the similarity query.
/// The target is validated before any provider call.
pub async fn handle_query(session: &Session, req: &QueryRequest, client: &reqwest::Client) -> Result<QueryArtifact> {
    check_target(session, &req.target)?;
    let vectors = embed_prompt(&req.prompt, session.embedder(), session.bank(), client).await?;
    query_with_vectors(session, &req.target, &vectors, req.top_k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentMode {
    Text,
    Mean,
    Probe,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub image: String,
    pub mode: SegmentMode,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LegendEntry {
    pub id: u16,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentArtifact {
    pub image: String,
    pub mode: SegmentMode,
    pub labels: LabelMap,
    pub legend: Vec<LegendEntry>,
    pub lmap: Vec<u8>,
}

impl SegmentArtifact {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "image": self.image,
            "mode": self.mode,
            "height": self.labels.height(),
            "width": self.labels.width(),
            "lmap": B64.encode(&self.lmap),
            "legend": self.legend,
        })
    }
}

fn legend(names: impl IntoIterator<Item = String>) -> Vec<LegendEntry> {
    names
        .into_iter()
        .enumerate()
        .map(|(i, name)| LegendEntry { id: i as u16, name })
        .collect()
}

/// Closed-set labels for one loaded image.
///
/// * `text`: one class per distinct bank name
/// * `mean`: one class per distinct name in the loaded visual references
/// * `probe`: the loaded probe, classes named `class <id>`
pub fn handle_segment(session: &Session, req: &SegmentRequest) -> Result<SegmentArtifact> {
    let vol = session.volume(&req.image)?;
    let (labels, legend) = match req.mode {
        SegmentMode::Text | SegmentMode::Mean => {
            let bank = match req.mode {
                SegmentMode::Text => Some(session.bank()),
                _ => session.references(),
            };
            let mode = if req.mode == SegmentMode::Text { "text" } else { "mean" };
            let bank = bank.filter(|b| !b.is_empty()).ok_or(ServiceError::MissingReferences(mode))?;
            let refs = bank.reference_set()?;
            let out = classify_argmax(&vol.map, &refs)?;
            (out.labels, legend(refs.class_names().iter().cloned()))
        }
        SegmentMode::Probe => {
            let probe = session.probe().ok_or(ServiceError::MissingProbe)?;
            let labels = probe_predict(&vol.map, probe)?;
            (labels, legend((0..probe.classes()).map(|c| format!("class {c}"))))
        }
    };
    Ok(SegmentArtifact {
        image: req.image.clone(),
        mode: req.mode,
        lmap: encode_label_map(&labels)?,
        labels,
        legend,
    })
}
