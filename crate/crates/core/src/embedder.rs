//! Text normalization and text→vector embedding.
//!
//! The reference embedder hashes character trigrams of the normalized text
//! into a fixed number of signed buckets (the "hashing trick") and
//! L2-normalizes the result. It needs no model weights and is fully
//! deterministic. Semantic embeddings can be plugged in through
//! [`RemoteEmbedder`], which talks to a local embedding service.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::remote::HttpEndpoint;

pub const DEFAULT_DIMENSION: usize = 256;
pub const MIN_DIMENSION: usize = 8;

/// Tolerance on the L2 norm of every stored embedding.
pub const NORM_TOLERANCE: f64 = 1e-6;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EmbedError {
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("remote embedding service unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("embedding accumulated to the zero vector")]
    DegenerateVector,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding contains non-finite components")]
    NonFinite,
    #[error("invalid embedder configuration: {0}")]
    InvalidConfig(String),
}

/// Unicode-normalizes (NFKC), case-folds, turns every non-alphanumeric
/// character into a separator and collapses separators to single spaces.
///
/// ```
/// use infohub_core::embedder::normalize_text;
/// assert_eq!(normalize_text("Hey, Suzume-chan!"), "hey suzume chan");
/// assert_eq!(normalize_text("  A  B "), "a b");
/// ```
pub fn normalize_text(text: &str) -> String {
    let folded: String = text.nfkc().flat_map(char::to_lowercase).nfkc().collect();
    let mut out = String::with_capacity(folded.len());
    let mut pending_space = false;
    for ch in folded.chars() {
        if ch.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(ch);
        } else {
            pending_space = true;
        }
    }
    out
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |hash, &b| (hash ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// A unit-norm vector. Components are stored as `f32` (the on-disk and
/// on-wire width); similarity arithmetic is done in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    norm: f64,
}

impl Embedding {
    /// L2-normalizes `raw` into an embedding.
    pub fn from_raw(raw: &[f64]) -> Result<Self, EmbedError> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EmbedError::DegenerateVector);
        }
        let values: Vec<f32> = raw.iter().map(|v| (v / norm) as f32).collect();
        Ok(Self::with_norm(values))
    }

    /// Accepts already-normalized components (snapshot and wire decoding).
    pub fn from_normalized(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let emb = Self::with_norm(values);
        if (emb.norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(EmbedError::DegenerateVector);
        }
        Ok(emb)
    }

    fn with_norm(values: Vec<f32>) -> Self {
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        Self { values, norm }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }

    /// Bit-level equality of the stored components.
    pub fn bitwise_eq(&self, other: &Embedding) -> bool {
        self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Cosine similarity, clamped to `[-1, 1]`.
///
/// Both inputs are unit-norm up to `f32` rounding, so this is the dot
/// product; dividing by the stored norms removes that rounding.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbedError> {
    if a.dimension() != b.dimension() {
        return Err(EmbedError::DimensionMismatch { expected: a.dimension(), found: b.dimension() });
    }
    let dot: f64 = a.values.iter().zip(&b.values).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    Ok((dot / (a.norm * b.norm)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderBackend {
    #[default]
    Reference,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dimension: usize,
    pub backend: EmbedderBackend,
    pub remote_endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    10_000
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
            backend: EmbedderBackend::Reference,
            remote_endpoint: None,
            timeout_ms: default_timeout_ms(),
        }
    }
}

impl EmbedderConfig {
    pub fn reference(dimension: usize) -> Self {
        Self { dimension, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension < MIN_DIMENSION || self.dimension > usize::from(u16::MAX) {
            return Err(EmbedError::InvalidConfig(format!(
                "dimension must be in {MIN_DIMENSION}..=65535, got {}",
                self.dimension
            )));
        }
        match (self.backend, &self.remote_endpoint) {
            (EmbedderBackend::Remote, None) => {
                Err(EmbedError::InvalidConfig("remote backend requires remote_endpoint".into()))
            }
            (EmbedderBackend::Reference, Some(_)) => {
                Err(EmbedError::InvalidConfig("remote_endpoint is only valid for the remote backend".into()))
            }
            _ => Ok(()),
        }
    }

    /// Builds the configured embedder.
    pub fn build(&self) -> Result<Box<dyn Embedder>, EmbedError> {
        self.validate()?;
        Ok(match self.backend {
            EmbedderBackend::Reference => Box::new(ReferenceEmbedder::new(self.dimension)?),
            EmbedderBackend::Remote => Box::new(RemoteEmbedder::new(
                self.remote_endpoint.as_deref().unwrap_or_default(),
                self.dimension,
                Duration::from_millis(self.timeout_ms),
            )),
        })
    }
}

pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// Embeds `text`; implementations normalize it first.
    fn embed(&self, text: &str) -> Result<Embedding, EmbedError>;

    /// Whether identical input always yields bit-identical output.
    fn is_deterministic(&self) -> bool {
        false
    }
}

/// Character-trigram sign-hashing embedder.
#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    dimension: usize,
}

impl ReferenceEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbedError> {
        EmbedderConfig::reference(dimension).validate()?;
        Ok(Self { dimension })
    }

    /// Bucket index and sign contributed by one trigram.
    pub fn trigram_slot(&self, trigram: &str) -> (usize, f64) {
        let hash = fnv1a64(trigram.as_bytes());
        let bucket = (hash % self.dimension as u64) as usize;
        let sign = if (hash >> 8) & 1 == 0 { 1.0 } else { -1.0 };
        (bucket, sign)
    }
}

impl Default for ReferenceEmbedder {
    fn default() -> Self {
        Self { dimension: DEFAULT_DIMENSION }
    }
}

/// All character trigrams of `text`, in order (overlapping).
pub fn trigrams(text: &str) -> Vec<&str> {
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len())).collect();
    bounds.windows(4).map(|w| &text[w[0]..w[3]]).collect()
}

impl Embedder for ReferenceEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let normalized = normalize_text(text);
        let grams = trigrams(&normalized);
        // Fewer than three characters yields no trigram at all.
        if grams.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut acc = vec![0.0f64; self.dimension];
        for gram in grams {
            let (bucket, sign) = self.trigram_slot(gram);
            acc[bucket] += sign;
        }
        Embedding::from_raw(&acc)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

/// Client for an external embedding service:
/// `POST {"text": ...}` → `{"vector": [...]}`.
pub struct RemoteEmbedder {
    endpoint: HttpEndpoint,
    dimension: usize,
}

impl RemoteEmbedder {
    pub fn new(url: &str, dimension: usize, timeout: Duration) -> Self {
        Self { endpoint: HttpEndpoint::new(url, timeout), dimension }
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Embedding, EmbedError> {
        let normalized = normalize_text(text);
        if normalized.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let reply: EmbedResponse =
            self.endpoint.post_json(&EmbedRequest { text: &normalized }).map_err(EmbedError::RemoteUnavailable)?;
        if reply.vector.len() != self.dimension {
            return Err(EmbedError::DimensionMismatch { expected: self.dimension, found: reply.vector.len() });
        }
        Embedding::from_raw(&reply.vector)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("Hey, Suzume-chan!"), "hey suzume chan");
        assert_eq!(normalize_text("  A  B "), "a b");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("!!!"), "");
        // full-width forms fold to ASCII
        assert_eq!(normalize_text("ＨＥＬＬＯ　１２３"), "hello 123");
    }

    #[test]
    fn fnv_known_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn trigram_windows_follow_chars() {
        assert_eq!(trigrams("abcd"), vec!["abc", "bcd"]);
        assert_eq!(trigrams("ab"), Vec::<&str>::new());
        assert_eq!(trigrams("すずめ"), vec!["すずめ"]);
    }

    #[test]
    fn embed_is_deterministic_and_unit_norm() {
        let e = ReferenceEmbedder::default();
        let a = e.embed("hello world").unwrap();
        let b = e.embed("hello world").unwrap();
        assert!(a.bitwise_eq(&b));
        assert!((a.norm() - 1.0).abs() <= NORM_TOLERANCE);
        assert_eq!(a.dimension(), DEFAULT_DIMENSION);
    }

    #[test]
    fn short_or_empty_text_is_rejected() {
        let e = ReferenceEmbedder::default();
        assert_eq!(e.embed(""), Err(EmbedError::EmptyText));
        assert_eq!(e.embed("?!"), Err(EmbedError::EmptyText));
        assert_eq!(e.embed("ab"), Err(EmbedError::EmptyText));
        assert!(e.embed("abc").is_ok());
    }

    #[test]
    fn disjoint_trigram_texts_are_orthogonal() {
        let e = ReferenceEmbedder::default();
        // FNV-1a("aaa") = 0xe71cbc19053f4da2 -> bucket 162, sign -1
        // FNV-1a("zzz") = 0xce8f061987a72b9d -> bucket 157, sign -1
        assert_eq!(e.trigram_slot("aaa"), (162, -1.0));
        assert_eq!(e.trigram_slot("zzz"), (157, -1.0));
        let c = cosine(&e.embed("aaaa").unwrap(), &e.embed("zzzz").unwrap()).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn cosine_self_and_basis() {
        let e = ReferenceEmbedder::default();
        let v = e.embed("the quick brown fox").unwrap();
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() <= 1e-9);

        let mut e1 = vec![0.0; 16];
        let mut e2 = vec![0.0; 16];
        e1[0] = 1.0;
        e2[1] = 1.0;
        let (e1, e2) = (Embedding::from_raw(&e1).unwrap(), Embedding::from_raw(&e2).unwrap());
        assert_eq!(cosine(&e1, &e2).unwrap(), 0.0);
    }

    #[test]
    fn cosine_dimension_mismatch() {
        let a = Embedding::from_raw(&[1.0; 8]).unwrap();
        let b = Embedding::from_raw(&[1.0; 9]).unwrap();
        assert_eq!(cosine(&a, &b), Err(EmbedError::DimensionMismatch { expected: 8, found: 9 }));
    }

    /// Naive cosine written out longhand, independent of `cosine`.
    fn oracle_cosine(a: &[f32], b: &[f32]) -> f64 {
        let mut dot = 0.0f64;
        let mut aa = 0.0f64;
        let mut bb = 0.0f64;
        for i in 0..a.len() {
            dot += a[i] as f64 * b[i] as f64;
            aa += a[i] as f64 * a[i] as f64;
            bb += b[i] as f64 * b[i] as f64;
        }
        dot / (aa.sqrt() * bb.sqrt())
    }

    #[test]
    fn cosine_matches_oracle_on_random_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a: Vec<f64> = (0..DEFAULT_DIMENSION).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..DEFAULT_DIMENSION).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, b) = (Embedding::from_raw(&a).unwrap(), Embedding::from_raw(&b).unwrap());
            let got = cosine(&a, &b).unwrap();
            assert!((got - oracle_cosine(a.values(), b.values())).abs() <= 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(EmbedderConfig::default().validate().is_ok());
        assert!(EmbedderConfig::reference(4).validate().is_err());
        let remote = EmbedderConfig { backend: EmbedderBackend::Remote, ..EmbedderConfig::default() };
        assert!(remote.validate().is_err());
        let stray = EmbedderConfig { remote_endpoint: Some("http://x".into()), ..EmbedderConfig::default() };
        assert!(stray.validate().is_err());
    }

    #[test]
    fn from_normalized_rejects_off_norm() {
        assert!(Embedding::from_normalized(vec![0.5, 0.5]).is_err());
        assert!(Embedding::from_normalized(vec![1.0, 0.0]).is_ok());
        assert_eq!(Embedding::from_normalized(vec![f32::NAN, 1.0]), Err(EmbedError::NonFinite));
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once.clone());
        }

        #[test]
        fn embeddings_are_unit_norm(s in "[a-zA-Z ,.!?]{3,60}") {
            let e = ReferenceEmbedder::default();
            match e.embed(&s) {
                Ok(v) => prop_assert!((v.norm() - 1.0).abs() <= NORM_TOLERANCE),
                Err(err) => prop_assert!(matches!(err, EmbedError::EmptyText | EmbedError::DegenerateVector)),
            }
        }

        #[test]
        fn cosine_is_symmetric(a in "[a-z ]{3,40}", b in "[a-z ]{3,40}") {
            let e = ReferenceEmbedder::default();
            if let (Ok(x), Ok(y)) = (e.embed(&a), e.embed(&b)) {
                let d = cosine(&x, &y).unwrap() - cosine(&y, &x).unwrap();
                prop_assert!(d.abs() <= 1e-12);
            }
        }
    }
}
