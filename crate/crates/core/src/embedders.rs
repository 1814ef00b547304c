//! Embedder implementations.
//!
//! * [`HashingEmbedder`]: offline, deterministic feature hashing of word
//!   unigrams and bigrams. Good enough for lexical overlap retrieval and for
//!   running the pipeline without any model.
//! * [`FixtureEmbedder`]: a fixed text → vector table, for tests and scripted
//!   scenarios where retrieval order must be set by hand.
//! * [`RemoteEmbedder`]: an embeddings endpoint speaking the common
//!   `{"model", "input"}` → `{"data":[{"embedding":[...]}]}` JSON shape.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::Deserialize;

use crate::llm::remote::RetryPolicy;
use crate::vector_index::{EmbedError, Embedder, Embedding};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
}

#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dimension: usize,
    name: String,
}

impl HashingEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        HashingEmbedder {
            dimension,
            name: "hashing-v1".to_string(),
        }
    }

    fn tokens(text: &str) -> Vec<String> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect()
    }

    fn add_feature(&self, values: &mut [f64], feature: &str, weight: f64) {
        let h = fnv1a(feature.as_bytes());
        let slot = (h % self.dimension as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        values[slot] += sign * weight;
    }
}

impl Embedder for HashingEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut values = vec![0.0; self.dimension];
        let tokens = Self::tokens(text);
        for t in &tokens {
            self.add_feature(&mut values, t, 1.0);
        }
        for pair in tokens.windows(2) {
            self.add_feature(&mut values, &format!("{} {}", pair[0], pair[1]), 0.5);
        }
        Ok(Embedding::new(values))
    }
}

#[derive(Debug, Clone)]
pub struct FixtureEmbedder {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
}

#[derive(Deserialize)]
struct FixtureFile {
    dimension: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl FixtureEmbedder {
    pub fn new(dimension: usize, vectors: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        let vectors: HashMap<_, _> = vectors.into_iter().collect();
        for (text, v) in &vectors {
            assert_eq!(v.len(), dimension, "fixture vector for {text:?} has wrong dimension");
        }
        FixtureEmbedder { dimension, vectors }
    }

    /// Load `{"dimension": n, "vectors": {"text": [..], ...}}`.
    pub fn from_file(path: &Path) -> Result<Self, EmbedError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| EmbedError::Backend(format!("{}: {e}", path.display())))?;
        let file: FixtureFile = serde_json::from_str(&raw)
            .map_err(|e| EmbedError::Backend(format!("{}: {e}", path.display())))?;
        for v in file.vectors.values() {
            if v.len() != file.dimension {
                return Err(EmbedError::Dimension {
                    expected: file.dimension,
                    actual: v.len(),
                });
            }
        }
        Ok(FixtureEmbedder {
            dimension: file.dimension,
            vectors: file.vectors,
        })
    }
}

impl Embedder for FixtureEmbedder {
    fn name(&self) -> &str {
        "fixture"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        self.vectors
            .get(text)
            .map(|v| Embedding::new(v.clone()))
            .ok_or_else(|| EmbedError::UnknownText(text.to_string()))
    }
}

pub struct RemoteEmbedder {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    retry: RetryPolicy,
    name: String,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key: Option<String>, dimension: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        RemoteEmbedder {
            agent,
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key,
            dimension,
            retry: RetryPolicy::default(),
            name: format!("remote:{model}"),
        }
    }

    fn request_once(&self, text: &str) -> Result<Vec<f64>, (bool, String)> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let body = serde_json::json!({ "model": self.model, "input": text });
        let mut resp = req.send_json(&body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, e.to_string()))?;
        if status != 200 {
            return Err((RetryPolicy::is_retryable_status(status), format!("HTTP {status}: {text}")));
        }
        let parsed: EmbeddingResponse = serde_json::from_str(&text).map_err(|e| (false, e.to_string()))?;
        parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| (false, "response carried no embedding".to_string()))
    }
}

impl Embedder for RemoteEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let mut delays = self.retry.delays();
        loop {
            match self.request_once(text) {
                Ok(values) => {
                    if values.len() != self.dimension {
                        return Err(EmbedError::Dimension {
                            expected: self.dimension,
                            actual: values.len(),
                        });
                    }
                    return Ok(Embedding::new(values));
                }
                Err((true, msg)) => match delays.next() {
                    Some(d) => {
                        log::warn!("embedding request failed ({msg}); retrying in {d:?}");
                        std::thread::sleep(d);
                    }
                    None => return Err(EmbedError::Backend(msg)),
                },
                Err((false, msg)) => return Err(EmbedError::Backend(msg)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hashing_is_deterministic() {
        let e = HashingEmbedder::new(64);
        assert_eq!(e.embed("Who directed Inception?").unwrap(), e.embed("Who directed Inception?").unwrap());
        assert_eq!(e.embed("x").unwrap().dimension(), 64);
    }

    #[test]
    fn hashing_prefers_lexical_overlap() {
        let e = HashingEmbedder::new(384);
        let q = e.embed("Who directed Inception?").unwrap();
        let near = e.embed("Inception directed by Christopher Nolan").unwrap();
        let far = e.embed("Emma Thomas occupation film producer").unwrap();
        assert!(q.cosine(&near) > q.cosine(&far));
    }

    #[test]
    fn hashing_ignores_case_and_punctuation() {
        let e = HashingEmbedder::new(32);
        assert_eq!(e.embed("Emma, THOMAS!").unwrap(), e.embed("emma thomas").unwrap());
    }

    #[test]
    fn fixture_rejects_unknown_text() {
        let e = FixtureEmbedder::new(2, [("a".to_string(), vec![1.0, 0.0])]);
        assert!(e.embed("a").is_ok());
        assert!(matches!(e.embed("b"), Err(EmbedError::UnknownText(_))));
    }
}
