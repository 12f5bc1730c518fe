//! Prompt embedding: bank lookup first, optional external provider on a miss.
//!
//! Provider protocol: `POST <endpoint>` with `{"prompt": "..."}`, answered by
//! `{"dim": n, "vector": [n reals]}`.

use std::time::Duration;

use dve_core::{EmbeddingBank, EmbeddingVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

pub const ENV_URL: &str = "DVE_EMBEDDER_URL";
pub const ENV_TIMEOUT_MS: &str = "DVE_EMBEDDER_TIMEOUT_MS";
pub const DEFAULT_TIMEOUT_MS: u64 = 5_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum EmbedderConfig {
    BankOnly,
    External { endpoint: String, timeout_ms: u64 },
}

impl EmbedderConfig {
    pub fn external(endpoint: impl Into<String>, timeout_ms: u64) -> Result<Self> {
        let endpoint = endpoint.into();
        if endpoint.trim().is_empty() {
            return Err(ServiceError::BadRequest("external embedder needs an endpoint".into()));
        }
        if timeout_ms == 0 {
            return Err(ServiceError::BadRequest("embedder timeout must be positive".into()));
        }
        Ok(EmbedderConfig::External { endpoint, timeout_ms })
    }

    /// `External` when `DVE_EMBEDDER_URL` is set and nonempty.
    pub fn from_env() -> Result<Self> {
        let url = std::env::var(ENV_URL).unwrap_or_default();
        if url.trim().is_empty() {
            return Ok(EmbedderConfig::BankOnly);
        }
        let timeout_ms = match std::env::var(ENV_TIMEOUT_MS) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| ServiceError::BadRequest(format!("{ENV_TIMEOUT_MS} must be an integer, got {v:?}")))?,
            Err(_) => DEFAULT_TIMEOUT_MS,
        };
        Self::external(url, timeout_ms)
    }
}

#[derive(Serialize)]
struct ProviderRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct ProviderResponse {
    dim: usize,
    vector: Vec<f32>,
}

/// Returns every bank vector stored under `prompt`; on a miss, asks the provider.
/// All returned vectors have the bank's dimension.
pub async fn embed_prompt(
    prompt: &str,
    cfg: &EmbedderConfig,
    bank: &EmbeddingBank,
    client: &reqwest::Client,
) -> Result<Vec<EmbeddingVector>> {
    if prompt.trim().is_empty() {
        return Err(ServiceError::EmptyPrompt);
    }
    let hits = bank.lookup(prompt);
    if !hits.is_empty() {
        return Ok(hits.into_iter().cloned().collect());
    }
    let EmbedderConfig::External { endpoint, timeout_ms } = cfg else {
        return Err(ServiceError::NoEmbedderConfigured(prompt.to_string()));
    };
    let classify = |e: reqwest::Error| {
        if e.is_timeout() {
            ServiceError::ProviderTimeout(*timeout_ms)
        } else {
            ServiceError::ProviderUnreachable(e.to_string())
        }
    };
    let resp = client
        .post(endpoint)
        .timeout(Duration::from_millis(*timeout_ms))
        .json(&ProviderRequest { prompt })
        .send()
        .await
        .map_err(classify)?;
    if !resp.status().is_success() {
        return Err(ServiceError::BadProviderResponse(format!("status {}", resp.status())));
    }
    let body = resp.bytes().await.map_err(classify)?;
    let parsed: ProviderResponse =
        serde_json::from_slice(&body).map_err(|e| ServiceError::BadProviderResponse(e.to_string()))?;
    if parsed.vector.len() != parsed.dim {
        return Err(ServiceError::BadProviderResponse(format!(
            "declared dim {} but sent {} values",
            parsed.dim,
            parsed.vector.len()
        )));
    }
    if parsed.dim != bank.dim() {
        return Err(ServiceError::DimMismatch {
            expected: bank.dim(),
            found: parsed.dim,
        });
    }
    let v = EmbeddingVector::new(parsed.vector).map_err(|e| ServiceError::BadProviderResponse(e.to_string()))?;
    Ok(vec![v])
}
