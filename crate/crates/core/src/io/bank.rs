use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::closed_set::ReferenceSet;
use crate::embedding::EmbeddingVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BankEntry {
    pub name: String,
    pub vector: EmbeddingVector,
}

/// Named embedding vectors. Names may repeat; repeated names are alternative
/// prompts for one concept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingBank {
    dim: usize,
    entries: Vec<BankEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    name: String,
    vector: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBank {
    dim: usize,
    entries: Vec<RawEntry>,
}

impl EmbeddingBank {
    pub fn new(dim: usize, entries: Vec<BankEntry>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::BadSchema("bank dim must be positive".into()));
        }
        if let Some(e) = entries.iter().find(|e| e.vector.dim() != dim) {
            return Err(Error::dim(dim, e.vector.dim()));
        }
        Ok(Self { dim, entries })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::BadSchema(e.to_string()))?;
        let raw: RawBank = serde_json::from_value(value).map_err(|e| Error::BadSchema(e.to_string()))?;
        let mut entries = Vec::with_capacity(raw.entries.len());
        for e in raw.entries {
            if e.vector.len() != raw.dim {
                return Err(Error::dim(raw.dim, e.vector.len()));
            }
            let v: Vec<f32> = e.vector.iter().map(|&x| x as f32).collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::BadSchema(format!("entry {:?} has a non-finite component", e.name)));
            }
            entries.push(BankEntry {
                name: e.name,
                vector: EmbeddingVector::new(v)?,
            });
        }
        Self::new(raw.dim, entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bank serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, name: impl Into<String>, vector: EmbeddingVector) -> Result<()> {
        if vector.dim() != self.dim {
            return Err(Error::dim(self.dim, vector.dim()));
        }
        self.entries.push(BankEntry {
            name: name.into(),
            vector,
        });
        Ok(())
    }

    /// All vectors stored under `name`, in file order.
    pub fn lookup(&self, name: &str) -> Vec<&EmbeddingVector> {
        self.entries
            .iter()
            .filter(|e| e.name == name)
            .map(|e| &e.vector)
            .collect()
    }

    /// Distinct names in order of first appearance.
    pub fn names(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.name.as_str()) {
                seen.push(e.name.as_str());
            }
        }
        seen
    }

    /// One class per distinct name; repeated names become extra rows of the same class.
    pub fn reference_set(&self) -> Result<ReferenceSet> {
        let rows: Vec<(String, EmbeddingVector)> = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.vector.clone()))
            .collect();
        ReferenceSet::from_named_rows(&rows)
    }
}
