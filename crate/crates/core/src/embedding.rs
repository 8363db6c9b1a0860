//! Text embeddings and cosine similarity.
//!
//! One embedder instance serves both the knowledge base and the expansion
//! redundancy filter.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Strategy};
use crate::sync::Semaphore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("embedding input text is empty")]
    EmptyText,
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("embedder returned an invalid response: {0}")]
    InvalidResponse(String),
}

/// A nonzero, finite embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::InvalidResponse("non-finite component".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(EmbeddingError::ZeroVector);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// Euclidean norm with left-to-right summation.
    pub fn norm(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, v| acc + v * v).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Result<Self, EmbeddingError> {
        Self::new(self.0.iter().map(|v| v * c).collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// `dot(a, b) / (|a| |b|)`, clamped to [-1, 1].
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(cosine_with_norms(a, a.norm(), b, b.norm()))
}

/// Cosine with precomputed norms. Bit-identical to [`cosine`] when the norms
/// come from [`EmbeddingVector::norm`]. Dimensions must already match.
pub(crate) fn cosine_with_norms(
    a: &EmbeddingVector,
    a_norm: f64,
    b: &EmbeddingVector,
    b_norm: f64,
) -> f64 {
    (dot(&a.0, &b.0) / (a_norm * b_norm)).clamp(-1.0, 1.0)
}

pub trait Embedder: Send + Sync {
    /// Stable identifier recorded in knowledge-base files.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        par::map(texts, Strategy::default(), |t| self.embed(t))
            .into_iter()
            .collect()
    }
}

/// Deterministic offline embedder: character trigrams hashed into `dim`
/// buckets, counted, then L2-normalized.
///
/// The text is padded with start/end markers so every nonempty input has at
/// least one trigram and the vector is never zero.
#[derive(Debug, Clone)]
pub struct HashedTrigramEmbedder {
    dim: usize,
}

impl HashedTrigramEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashedTrigramEmbedder { dim }
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(chars: &[char]) -> u64 {
    let mut buf = [0u8; 4];
    let mut h = FNV_OFFSET;
    for c in chars {
        for b in c.encode_utf8(&mut buf).bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

impl Embedder for HashedTrigramEmbedder {
    fn id(&self) -> String {
        format!("hashed-trigram-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let chars: Vec<char> = std::iter::once('\u{2}')
            .chain(text.chars())
            .chain(std::iter::once('\u{3}'))
            .collect();
        let mut counts = vec![0.0f64; self.dim];
        for window in chars.windows(3) {
            counts[(fnv1a(window) % self.dim as u64) as usize] += 1.0;
        }
        let norm = counts.iter().fold(0.0, |acc, v| acc + v * v).sqrt();
        EmbeddingVector::new(counts.into_iter().map(|v| v / norm).collect())
    }
}

/// Embedder backed by an HTTP endpoint: `POST {"texts": [...]}` answered by
/// `{"vectors": [[...], ...]}`.
pub struct RemoteEmbedder {
    url: String,
    token: Option<String>,
    dim: usize,
    agent: ureq::Agent,
    in_flight: Semaphore,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl RemoteEmbedder {
    pub fn new(url: impl Into<String>, token: Option<String>, dim: usize, max_in_flight: usize) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteEmbedder {
            url: url.into(),
            token,
            dim,
            agent,
            in_flight: Semaphore::new(max_in_flight),
        }
    }

    fn post(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        let body = serde_json::to_string(&EmbedRequest { texts }).expect("request serializes");
        let _permit = self.in_flight.acquire();
        let mut req = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send(body.as_str())
            .map_err(|e| EmbeddingError::EmbedderUnavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| EmbeddingError::EmbedderUnavailable(e.to_string()))?;
        if status != 200 {
            return Err(EmbeddingError::EmbedderUnavailable(format!("HTTP {status}: {text}")));
        }
        let parsed: EmbedResponse =
            serde_json::from_str(&text).map_err(|e| EmbeddingError::InvalidResponse(e.to_string()))?;
        if parsed.vectors.len() != texts.len() {
            return Err(EmbeddingError::InvalidResponse(format!(
                "expected {} vectors, got {}",
                texts.len(),
                parsed.vectors.len()
            )));
        }
        parsed
            .vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(EmbeddingError::DimensionMismatch(v.len(), self.dim));
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}:{}", self.url, self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        Ok(self.post(&[text.to_string()])?.remove(0))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.iter().any(|t| t.is_empty()) {
            return Err(EmbeddingError::EmptyText);
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.post(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use proptest::strategy::Strategy;

    fn v(xs: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(xs.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine(&v(&[2.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        let c = cosine(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        assert_eq!(
            cosine(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch(1, 2))
        );
        assert_eq!(EmbeddingVector::new(vec![0.0, 0.0]), Err(EmbeddingError::ZeroVector));
    }

    #[test]
    fn trigram_embedder_shape_and_determinism() {
        let e = HashedTrigramEmbedder::new(64);
        let a = e.embed("sort the array").unwrap();
        assert_eq!(a, e.embed("sort the array").unwrap());
        assert_eq!(a.dim(), 64);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(e.embed(""), Err(EmbeddingError::EmptyText));
    }

    #[test]
    fn trigram_embedder_separates_close_strings() {
        // Oracle: with padding, "abc" has trigrams {^ab, abc, bc$} and "abd"
        // has {^ab, abd, bd$}. Only ^ab is shared, so unless the hashes of
        // the other four collide the cosine is 1/3.
        let e = HashedTrigramEmbedder::new(64);
        let c = cosine(&e.embed("abc").unwrap(), &e.embed("abd").unwrap()).unwrap();
        assert!(c < 1.0);
        let bucket = |s: &str| {
            let cs: Vec<char> = s.chars().collect();
            fnv1a(&cs) % 64
        };
        let shared = ["\u{2}ab"];
        let only_a = ["abc", "bc\u{3}"];
        let only_b = ["abd", "bd\u{3}"];
        let mut a = [0.0; 64];
        let mut b = [0.0; 64];
        for t in shared.iter().chain(&only_a) {
            a[bucket(t) as usize] += 1.0;
        }
        for t in shared.iter().chain(&only_b) {
            b[bucket(t) as usize] += 1.0;
        }
        let d: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((c - d / (na * nb)).abs() < 1e-12);
    }

    #[test]
    fn default_batch_matches_single() {
        let e = HashedTrigramEmbedder::new(32);
        let texts = vec!["a".to_string(), "bb".to_string(), "ccc".to_string()];
        let batch = e.embed_batch(&texts).unwrap();
        for (t, vec) in texts.iter().zip(&batch) {
            assert_eq!(&e.embed(t).unwrap(), vec);
        }
    }

    fn nonzero_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..12).prop_flat_map(|n| {
            (
                prop::collection::vec(-100.0f64..100.0, n),
                prop::collection::vec(-100.0f64..100.0, n),
            )
        })
        .prop_filter("nonzero", |(a, b)| {
            a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3)
        })
    }

    proptest! {
        #[test]
        fn self_cosine_is_one((a, _) in nonzero_pair()) {
            let a = v(&a);
            prop_assert!((cosine(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn cosine_is_symmetric_bitwise((a, b) in nonzero_pair()) {
            let (a, b) = (v(&a), v(&b));
            prop_assert_eq!(cosine(&a, &b).unwrap().to_bits(), cosine(&b, &a).unwrap().to_bits());
        }

        #[test]
        fn cosine_is_scale_invariant((a, b) in nonzero_pair(), c in 1e-3f64..1e3) {
            let (a, b) = (v(&a), v(&b));
            let scaled = a.scaled(c).unwrap();
            prop_assert!((cosine(&scaled, &b).unwrap() - cosine(&a, &b).unwrap()).abs() <= 1e-9);
        }
    }

    #[test]
    fn remote_batch_round_trip() {
        let server = crate::testutil::OneShotServer::start(200, r#"{"vectors": [[1.0, 0.0], [0.0, 2.0]]}"#);
        let e = RemoteEmbedder::new(server.url(), Some("tok".into()), 2, 2);
        let out = e.embed_batch(&["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(out[1].values(), &[0.0, 2.0]);
        let seen = server.request();
        assert!(seen.head.to_ascii_lowercase().contains("authorization: bearer tok"));
        assert_eq!(seen.body, r#"{"texts":["a","b"]}"#);
    }

    #[test]
    fn remote_errors_are_typed() {
        let server = crate::testutil::OneShotServer::start(200, r#"{"vectors": [[1.0, 0.0, 0.0]]}"#);
        let e = RemoteEmbedder::new(server.url(), None, 2, 1);
        assert!(matches!(e.embed("x"), Err(EmbeddingError::DimensionMismatch(3, 2))));

        let server = crate::testutil::OneShotServer::start(503, "down");
        let e = RemoteEmbedder::new(server.url(), None, 2, 1);
        assert!(matches!(e.embed("x"), Err(EmbeddingError::EmbedderUnavailable(_))));

        let server = crate::testutil::OneShotServer::start(200, r#"{"vectors": []}"#);
        let e = RemoteEmbedder::new(server.url(), None, 2, 1);
        assert!(matches!(e.embed("x"), Err(EmbeddingError::InvalidResponse(_))));
        assert!(matches!(e.embed(""), Err(EmbeddingError::EmptyText)));
    }
}
