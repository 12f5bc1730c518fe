//! Immutable session snapshots behind an atomically swapped pointer.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use arc_swap::ArcSwap;
use dve_core::io::manifest::load_serve_manifest;
use dve_core::io::{read_map3d, read_volume};
use dve_core::{DenseEmbeddingMap, EmbeddingBank, EmbeddingMap3D, ProbeWeights};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::embedder::EmbedderConfig;
use crate::error::{Result, ServiceError};

/// Target name reserved for the 3D map in query requests.
pub const MAP_TARGET: &str = "map";

#[derive(Debug, Clone)]
pub struct LoadedVolume {
    pub map: Arc<DenseEmbeddingMap>,
    pub image: Option<PathBuf>,
}

/// Everything a request can read. All artifacts share the bank's dimension.
#[derive(Debug, Clone)]
pub struct Session {
    bank: Arc<EmbeddingBank>,
    volumes: BTreeMap<String, LoadedVolume>,
    map: Option<Arc<EmbeddingMap3D>>,
    probe: Option<Arc<ProbeWeights>>,
    references: Option<Arc<EmbeddingBank>>,
    embedder: EmbedderConfig,
}

impl Session {
    pub fn new(bank: EmbeddingBank, embedder: EmbedderConfig) -> Self {
        Self {
            bank: Arc::new(bank),
            volumes: BTreeMap::new(),
            map: None,
            probe: None,
            references: None,
            embedder,
        }
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    fn check_dim(&self, found: usize) -> Result<()> {
        if found != self.dim() {
            return Err(ServiceError::DimMismatch {
                expected: self.dim(),
                found,
            });
        }
        Ok(())
    }

    pub fn with_volume(mut self, id: impl Into<String>, map: DenseEmbeddingMap, image: Option<PathBuf>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() || id == MAP_TARGET {
            return Err(ServiceError::BadRequest(format!("invalid image id {id:?}")));
        }
        self.check_dim(map.dim())?;
        self.volumes.insert(
            id,
            LoadedVolume {
                map: Arc::new(map),
                image,
            },
        );
        Ok(self)
    }

    pub fn with_map(mut self, map: EmbeddingMap3D) -> Result<Self> {
        self.check_dim(map.dim())?;
        self.map = Some(Arc::new(map));
        Ok(self)
    }

    pub fn with_probe(mut self, probe: ProbeWeights) -> Result<Self> {
        self.check_dim(probe.dim())?;
        self.probe = Some(Arc::new(probe));
        Ok(self)
    }

    /// Visual-mean class references, stored in bank format (one or more rows per class name).
    pub fn with_references(mut self, refs: EmbeddingBank) -> Result<Self> {
        self.check_dim(refs.dim())?;
        self.references = Some(Arc::new(refs));
        Ok(self)
    }

    /// Replaces the bank; every loaded artifact must match its dimension.
    pub fn with_bank(mut self, bank: EmbeddingBank) -> Result<Self> {
        let dims = self
            .volumes
            .values()
            .map(|v| v.map.dim())
            .chain(self.map.iter().map(|m| m.dim()))
            .chain(self.probe.iter().map(|p| p.dim()))
            .chain(self.references.iter().map(|r| r.dim()));
        for d in dims {
            if d != bank.dim() {
                return Err(ServiceError::DimMismatch {
                    expected: d,
                    found: bank.dim(),
                });
            }
        }
        self.bank = Arc::new(bank);
        Ok(self)
    }

    pub fn with_embedder(mut self, embedder: EmbedderConfig) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn bank(&self) -> &EmbeddingBank {
        &self.bank
    }

    pub fn volume(&self, id: &str) -> Result<&LoadedVolume> {
        self.volumes.get(id).ok_or_else(|| ServiceError::UnknownImage(id.to_string()))
    }

    pub fn volumes(&self) -> impl Iterator<Item = (&str, &LoadedVolume)> {
        self.volumes.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn map(&self) -> Option<&EmbeddingMap3D> {
        self.map.as_deref()
    }

    pub fn probe(&self) -> Option<&ProbeWeights> {
        self.probe.as_deref()
    }

    pub fn references(&self) -> Option<&EmbeddingBank> {
        self.references.as_deref()
    }

    pub fn embedder(&self) -> &EmbedderConfig {
        &self.embedder
    }

    pub fn inventory(&self) -> Inventory {
        Inventory {
            dim: self.dim(),
            volumes: self
                .volumes
                .iter()
                .map(|(id, v)| VolumeInfo {
                    id: id.clone(),
                    height: v.map.height(),
                    width: v.map.width(),
                    has_image: v.image.is_some(),
                })
                .collect(),
            map: self.map.as_ref().map(|m| MapInfo {
                cells: m.len(),
                cell_size: m.cell_size(),
            }),
            bank: BankInfo {
                entries: self.bank.len(),
                names: self.bank.names().into_iter().map(String::from).collect(),
            },
            references: self.references.as_ref().map(|r| BankInfo {
                entries: r.len(),
                names: r.names().into_iter().map(String::from).collect(),
            }),
            probe: self.probe.as_ref().map(|p| ProbeInfo { classes: p.classes() }),
            embedder: self.embedder.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeInfo {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub has_image: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapInfo {
    pub cells: usize,
    pub cell_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BankInfo {
    pub entries: usize,
    pub names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeInfo {
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inventory {
    pub dim: usize,
    pub volumes: Vec<VolumeInfo>,
    pub map: Option<MapInfo>,
    pub bank: BankInfo,
    pub references: Option<BankInfo>,
    pub probe: Option<ProbeInfo>,
    pub embedder: EmbedderConfig,
}

/// Body of `POST /load`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LoadRequest {
    Volume {
        id: String,
        path: PathBuf,
        #[serde(default)]
        image: Option<PathBuf>,
    },
    Manifest {
        path: PathBuf,
    },
    Map {
        path: PathBuf,
    },
    Bank {
        path: PathBuf,
    },
    References {
        path: PathBuf,
    },
    Probe {
        path: PathBuf,
    },
}

fn read_probe(path: &Path) -> Result<ProbeWeights> {
    let text = std::fs::read_to_string(path).map_err(dve_core::Error::from)?;
    serde_json::from_str(&text).map_err(|e| ServiceError::Core(dve_core::Error::BadSchema(e.to_string())))
}

/// Reads the artifact named by `req` and returns `base` with it installed.
/// Blocking file I/O; call from a blocking context.
pub fn apply_load(base: &Session, req: &LoadRequest) -> Result<Session> {
    let s = base.clone();
    match req {
        LoadRequest::Volume { id, path, image } => s.with_volume(id.clone(), read_volume(path)?, image.clone()),
        LoadRequest::Manifest { path } => {
            let mut s = s;
            for entry in load_serve_manifest(path)? {
                s = s.with_volume(entry.id, read_volume(&entry.volume)?, entry.image)?;
            }
            Ok(s)
        }
        LoadRequest::Map { path } => s.with_map(read_map3d(path)?),
        LoadRequest::Bank { path } => s.with_bank(EmbeddingBank::load(path)?),
        LoadRequest::References { path } => s.with_references(EmbeddingBank::load(path)?),
        LoadRequest::Probe { path } => s.with_probe(read_probe(path)?),
    }
}

/// Current session plus a writer lock. Readers never block; loads are serialized
/// and publish a complete new snapshot in one pointer swap.
pub struct SessionStore {
    current: ArcSwap<Session>,
    writer: Mutex<()>,
}

impl SessionStore {
    pub fn new(session: Session) -> Self {
        Self {
            current: ArcSwap::from_pointee(session),
            writer: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<Session> {
        self.current.load_full()
    }

    pub async fn load(&self, req: LoadRequest) -> Result<Inventory> {
        let _guard = self.writer.lock().await;
        let base = self.snapshot();
        let next = tokio::task::spawn_blocking(move || apply_load(&base, &req))
            .await
            .map_err(|e| ServiceError::BadRequest(format!("load task failed: {e}")))??;
        let inventory = next.inventory();
        self.current.store(Arc::new(next));
        Ok(inventory)
    }
}
