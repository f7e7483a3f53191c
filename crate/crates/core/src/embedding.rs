//! Per-stream embeddings and the composite query vector.
//!
//! Every function is embedded twice: once from its assembly listing and once
//! from its pseudo-C. Each non-zero stream is scaled to unit length, the two
//! are concatenated (assembly first) and the result is scaled to unit length
//! again, so cosine similarity over composites reduces to a dot product and
//! neither stream dominates by raw magnitude.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{FunctionRecord, RecordKey};
use crate::error::{Error, Result};
use crate::http::{self, JsonEndpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Asm,
    Code,
}

impl Stream {
    fn tag(self) -> u8 {
        match self {
            Stream::Asm => 0,
            Stream::Code => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamEmbedding {
    pub vector: Vec<f32>,
    pub stream: Stream,
    /// Set when the stream had no text and the vector is all zeros.
    pub degraded: bool,
}

impl StreamEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn is_zero(&self) -> bool {
        self.vector.iter().all(|&x| x == 0.0)
    }

    pub fn zero(stream: Stream, dim: usize) -> Self {
        Self {
            vector: vec![0.0; dim],
            stream,
            degraded: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeEmbedding {
    pub vector: Vec<f32>,
    pub source: RecordKey,
    /// One of the two streams was missing.
    pub degraded: bool,
}

impl CompositeEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Remote,
    #[default]
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingProviderConfig {
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub dim: usize,
    pub mode: ProviderMode,
    pub timeout_ms: u64,
    pub retries: u32,
    /// Dotted path of the numeric array in the response body.
    pub response_field: String,
    pub max_parallel: usize,
    /// Key for the mock provider's token hashing.
    pub corpus_seed: u64,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        Self {
            endpoint_url: None,
            model_name: "mock-embed".into(),
            dim: 64,
            mode: ProviderMode::Mock,
            timeout_ms: 30_000,
            retries: 2,
            response_field: "embedding".into(),
            max_parallel: 4,
            corpus_seed: 0,
        }
    }
}

impl EmbeddingProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding dim must be positive".into()));
        }
        match self.mode {
            ProviderMode::Remote if self.endpoint_url.as_deref().map_or(true, str::is_empty) => Err(
                Error::Config("remote embedding mode requires endpoint_url".into()),
            ),
            ProviderMode::Mock if self.dim < MOCK_MIN_DIM => Err(Error::Config(format!(
                "mock embedding dim must be at least {MOCK_MIN_DIM}"
            ))),
            _ => Ok(()),
        }
    }
}

/// A source of raw (unnormalized) stream vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str, stream: Stream) -> Result<Vec<f32>>;
}

pub fn provider_from_config(cfg: &EmbeddingProviderConfig) -> Result<Box<dyn EmbeddingProvider>> {
    cfg.validate()?;
    Ok(match cfg.mode {
        ProviderMode::Mock => Box::new(MockProvider::new(cfg.dim, cfg.corpus_seed)?),
        ProviderMode::Remote => Box::new(RemoteProvider::new(cfg)?),
    })
}

/// Embeds both streams of a record and normalizes each non-empty one.
///
/// An empty stream becomes a zero vector flagged `degraded`.
pub fn embed_streams(
    record: &FunctionRecord,
    provider: &dyn EmbeddingProvider,
) -> Result<(StreamEmbedding, StreamEmbedding)> {
    let dim = provider.dim();
    let embed = |text: &str, stream: Stream| -> Result<StreamEmbedding> {
        if text.trim().is_empty() {
            return Ok(StreamEmbedding::zero(stream, dim));
        }
        let raw = provider.embed_text(text, stream)?;
        if raw.len() != dim {
            return Err(Error::Contract(format!(
                "provider returned {} components for {:?} stream, configured dim is {dim}",
                raw.len(),
                stream
            )));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract(format!(
                "provider returned non-finite components for {:?} stream",
                stream
            )));
        }
        let (vector, nonzero) = normalized(&raw);
        Ok(StreamEmbedding {
            vector,
            stream,
            degraded: !nonzero,
        })
    };
    Ok((
        embed(&record.asm_text, Stream::Asm)?,
        embed(&record.pseudo_text, Stream::Code)?,
    ))
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn normalized(v: &[f32]) -> (Vec<f32>, bool) {
    let norm = l2(v);
    if norm == 0.0 {
        return (v.to_vec(), false);
    }
    (v.iter().map(|&x| (f64::from(x) / norm) as f32).collect(), true)
}

/// Builds the composite query vector `normalize(unit(asm) ++ unit(code))`.
pub fn compose_query(
    asm: &StreamEmbedding,
    code: &StreamEmbedding,
    source: RecordKey,
) -> Result<CompositeEmbedding> {
    let asm_norm = l2(&asm.vector);
    let code_norm = l2(&code.vector);
    if asm_norm == 0.0 && code_norm == 0.0 {
        return Err(Error::NoSignal(source.to_string()));
    }
    let live = usize::from(asm_norm > 0.0) + usize::from(code_norm > 0.0);
    let outer = (live as f64).sqrt();
    let scale = |x: f32, norm: f64| -> f32 {
        if norm == 0.0 {
            0.0
        } else {
            (f64::from(x) / norm / outer) as f32
        }
    };
    let mut vector = Vec::with_capacity(asm.dim() + code.dim());
    vector.extend(asm.vector.iter().map(|&x| scale(x, asm_norm)));
    vector.extend(code.vector.iter().map(|&x| scale(x, code_norm)));
    Ok(CompositeEmbedding {
        vector,
        source,
        degraded: live < 2,
    })
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "cosine similarity over vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub const MOCK_MIN_DIM: usize = 8;

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn token_rng(token: &str, stream: Stream, corpus_seed: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"dcfscan/mock-embed/v1");
    hasher.update(corpus_seed.to_le_bytes());
    hasher.update([stream.tag()]);
    hasher.update(token.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

/// Deterministic offline embedding: a bag of keyed token hashes.
///
/// Each token maps to a pseudo-random direction keyed by
/// `(token, stream, corpus_seed)`; the text vector is the normalized sum over
/// its tokens, so texts with overlapping token multisets land close together.
pub fn mock_embed(text: &str, stream: Stream, dim: usize, corpus_seed: u64) -> Result<StreamEmbedding> {
    if dim < MOCK_MIN_DIM {
        return Err(Error::Config(format!(
            "mock embedding dim must be at least {MOCK_MIN_DIM}, got {dim}"
        )));
    }
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    for token in tokens(text) {
        *counts.entry(token).or_default() += 1;
    }
    if counts.is_empty() {
        return Ok(StreamEmbedding::zero(stream, dim));
    }
    let mut acc = vec![0.0f64; dim];
    for (token, count) in &counts {
        let weight = f64::from(*count);
        let mut rng = token_rng(token, stream, corpus_seed);
        for slot in acc.iter_mut() {
            *slot += weight * rng.gen_range(-1.0..1.0);
        }
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(StreamEmbedding {
        vector: acc.iter().map(|x| (x / norm) as f32).collect(),
        stream,
        degraded: false,
    })
}

#[derive(Debug, Clone)]
pub struct MockProvider {
    dim: usize,
    corpus_seed: u64,
}

impl MockProvider {
    pub fn new(dim: usize, corpus_seed: u64) -> Result<Self> {
        if dim < MOCK_MIN_DIM {
            return Err(Error::Config(format!(
                "mock embedding dim must be at least {MOCK_MIN_DIM}, got {dim}"
            )));
        }
        Ok(Self { dim, corpus_seed })
    }
}

impl EmbeddingProvider for MockProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str, stream: Stream) -> Result<Vec<f32>> {
        Ok(mock_embed(text, stream, self.dim, self.corpus_seed)?.vector)
    }
}

/// Counting semaphore bounding in-flight remote requests.
pub(crate) struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard { permits: self }
    }
}

pub(crate) struct PermitGuard<'a> {
    permits: &'a Permits,
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.permits.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.permits.cv.notify_one();
    }
}

/// HTTP embedding backend: `POST {"model", "input"}`, numeric array back.
pub struct RemoteProvider {
    endpoint: JsonEndpoint,
    model_name: String,
    dim: usize,
    response_field: String,
    permits: Permits,
}

impl RemoteProvider {
    pub fn new(cfg: &EmbeddingProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let url = cfg.endpoint_url.clone().unwrap_or_default();
        Ok(Self {
            endpoint: JsonEndpoint::new(url, Duration::from_millis(cfg.timeout_ms), cfg.retries)?,
            model_name: cfg.model_name.clone(),
            dim: cfg.dim,
            response_field: cfg.response_field.clone(),
            permits: Permits::new(cfg.max_parallel),
        })
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str, _stream: Stream) -> Result<Vec<f32>> {
        let _permit = self.permits.acquire();
        let body = serde_json::json!({ "model": self.model_name, "input": text });
        let response = self.endpoint.post(&body)?;
        let field = http::lookup(&response, &self.response_field).ok_or_else(|| {
            Error::Contract(format!(
                "embedding response has no field `{}`",
                self.response_field
            ))
        })?;
        let array = field.as_array().ok_or_else(|| {
            Error::Contract(format!("`{}` is not an array", self.response_field))
        })?;
        array
            .iter()
            .map(|v| {
                v.as_f64().map(|x| x as f32).ok_or_else(|| {
                    Error::Contract("embedding array contains a non-numeric value".into())
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn key() -> RecordKey {
        RecordKey {
            binary_id: "b".into(),
            function_id: "f".into(),
        }
    }

    fn stream(v: &[f32], s: Stream) -> StreamEmbedding {
        StreamEmbedding {
            vector: v.to_vec(),
            stream: s,
            degraded: false,
        }
    }

    #[test]
    fn cosine_examples() {
        let v = [0.3f32, -1.2, 4.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!((c - 0.974_631_846).abs() < 1e-6);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn compose_symmetric_streams() {
        let a = stream(&[1.0, 0.0], Stream::Asm);
        let b = stream(&[1.0, 0.0], Stream::Code);
        let q = compose_query(&a, &b, key()).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert_eq!(q.vector, vec![h, 0.0, h, 0.0]);
        assert!(!q.degraded);
    }

    #[test]
    fn compose_single_stream_fallback() {
        let a = stream(&[0.0, 3.0], Stream::Asm);
        let b = StreamEmbedding::zero(Stream::Code, 2);
        let q = compose_query(&a, &b, key()).unwrap();
        assert_eq!(q.vector, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(q.degraded);
    }

    #[test]
    fn compose_rejects_no_signal() {
        let a = StreamEmbedding::zero(Stream::Asm, 4);
        let b = StreamEmbedding::zero(Stream::Code, 4);
        assert!(matches!(compose_query(&a, &b, key()), Err(Error::NoSignal(_))));
    }

    #[test]
    fn compose_norm_over_random_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a: Vec<f32> = (0..16).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let b: Vec<f32> = (0..24).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let q = compose_query(&stream(&a, Stream::Asm), &stream(&b, Stream::Code), key()).unwrap();
            assert!((l2(&q.vector) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn mock_embed_is_deterministic_and_unit() {
        let a = mock_embed("mov eax, ebx\ncall CreateFileW", Stream::Asm, 32, 11).unwrap();
        let b = mock_embed("mov eax, ebx\ncall CreateFileW", Stream::Asm, 32, 11).unwrap();
        assert_eq!(a, b);
        assert!((l2(&a.vector) - 1.0).abs() < 1e-6);
        let other_seed = mock_embed("mov eax, ebx\ncall CreateFileW", Stream::Asm, 32, 12).unwrap();
        assert_ne!(a.vector, other_seed.vector);
        let other_stream = mock_embed("mov eax, ebx\ncall CreateFileW", Stream::Code, 32, 11).unwrap();
        assert_ne!(a.vector, other_stream.vector);
        assert!(mock_embed("x", Stream::Asm, 4, 0).is_err());
    }

    #[test]
    fn mock_embed_tracks_token_overlap() {
        let base: Vec<String> = (0..40).map(|i| format!("tok{i}")).collect();
        let mut shared = base.clone();
        for (i, t) in shared.iter_mut().take(4).enumerate() {
            *t = format!("other{i}");
        }
        let disjoint: Vec<String> = (0..40).map(|i| format!("zzz{i}")).collect();
        let e = |v: &[String]| mock_embed(&v.join(" "), Stream::Code, 128, 3).unwrap().vector;
        let sim_shared = cosine_similarity(&e(&base), &e(&shared)).unwrap();
        let sim_disjoint = cosine_similarity(&e(&base), &e(&disjoint)).unwrap();
        assert!(sim_shared > sim_disjoint, "{sim_shared} vs {sim_disjoint}");
        assert!(sim_shared > 0.8);
    }

    #[test]
    fn empty_stream_is_degraded_zero() {
        let provider = MockProvider::new(16, 0).unwrap();
        let mut record = crate::corpus::tests::record("b", "f", 20, 6);
        record.asm_text.clear();
        let (asm, code) = embed_streams(&record, &provider).unwrap();
        assert!(asm.is_zero() && asm.degraded);
        assert!(!code.degraded);
        assert!((l2(&code.vector) - 1.0).abs() < 1e-6);
        let q = compose_query(&asm, &code, record.key()).unwrap();
        assert_eq!(q.dim(), 32);
    }

    struct WrongDim;
    impl EmbeddingProvider for WrongDim {
        fn dim(&self) -> usize {
            8
        }
        fn embed_text(&self, _: &str, _: Stream) -> Result<Vec<f32>> {
            Ok(vec![1.0; 5])
        }
    }

    #[test]
    fn provider_dim_mismatch_is_contract_error() {
        let record = crate::corpus::tests::record("b", "f", 20, 6);
        assert!(matches!(embed_streams(&record, &WrongDim), Err(Error::Contract(_))));
    }

    #[test]
    fn remote_mode_requires_endpoint() {
        let cfg = EmbeddingProviderConfig {
            mode: ProviderMode::Remote,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn compose_ignores_positive_rescaling(
            a in prop::collection::vec(-10.0f32..10.0, 8),
            b in prop::collection::vec(-10.0f32..10.0, 8),
            alpha in 0.01f32..100.0,
            beta in 0.01f32..100.0,
        ) {
            prop_assume!(l2(&a) > 1e-3 && l2(&b) > 1e-3);
            let q1 = compose_query(&stream(&a, Stream::Asm), &stream(&b, Stream::Code), key()).unwrap();
            let sa: Vec<f32> = a.iter().map(|x| x * alpha).collect();
            let sb: Vec<f32> = b.iter().map(|x| x * beta).collect();
            let q2 = compose_query(&stream(&sa, Stream::Asm), &stream(&sb, Stream::Code), key()).unwrap();
            for (x, y) in q1.vector.iter().zip(&q2.vector) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn cosine_is_symmetric_and_scale_free(
            a in prop::collection::vec(-10.0f32..10.0, 12),
            b in prop::collection::vec(-10.0f32..10.0, 12),
            alpha in 0.01f32..100.0,
        ) {
            let ab = cosine_similarity(&a, &b).unwrap();
            let ba = cosine_similarity(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            if l2(&a) > 1e-3 {
                let scaled: Vec<f32> = a.iter().map(|x| x * alpha).collect();
                prop_assert!((cosine_similarity(&a, &scaled).unwrap() - 1.0).abs() < 1e-6);
            }
        }
    }
}
