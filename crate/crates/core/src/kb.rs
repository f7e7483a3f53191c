//! Vector knowledge base of analyst-verified functions.
//!
//! The index is an exact brute-force cosine scan. Results are ordered by
//! similarity descending with ties broken by insertion order, which makes the
//! scan its own reference implementation.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::RecordKey;
use crate::embedding::CompositeEmbedding;
use crate::error::{Error, Result};
use crate::label::Label;

pub const DEFAULT_SNIPPET_CAP: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub key: RecordKey,
    pub label: Label,
    pub family: Option<String>,
    /// Truncated pseudo-C (or assembly) shown to agents as evidence.
    pub snippet: String,
    pub vector: Vec<f32>,
}

impl KbEntry {
    pub fn new(
        composite: CompositeEmbedding,
        label: Label,
        family: Option<String>,
        snippet: &str,
        snippet_cap: usize,
    ) -> Result<Self> {
        if !label.is_verified() {
            return Err(Error::Build(format!(
                "{} has no verified label",
                composite.source
            )));
        }
        Ok(Self {
            key: composite.source,
            label,
            family,
            snippet: truncate_utf8(snippet, snippet_cap).to_owned(),
            vector: composite.vector,
        })
    }
}

/// Longest prefix of `s` that fits in `max` bytes without splitting a char.
pub fn truncate_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BuildMeta {
    pub corpus_seed: u64,
    /// Unix seconds; 0 when the builder did not record a timestamp.
    pub created_at: u64,
    pub malicious: u64,
    pub benign: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbIndex {
    entries: Vec<KbEntry>,
    norms: Vec<f64>,
    dim: usize,
    meta: BuildMeta,
}

pub fn build_index(entries: Vec<KbEntry>, corpus_seed: u64, created_at: u64) -> Result<KbIndex> {
    KbIndex::build(entries, corpus_seed, created_at)
}

impl KbIndex {
    pub fn build(entries: Vec<KbEntry>, corpus_seed: u64, created_at: u64) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Build("knowledge base has no entries".into()));
        };
        let dim = first.vector.len();
        if dim == 0 {
            return Err(Error::Build("entries have zero-length vectors".into()));
        }
        let offending: Vec<String> = entries
            .iter()
            .filter(|e| e.vector.len() != dim)
            .map(|e| format!("{} (dim {})", e.key, e.vector.len()))
            .collect();
        if !offending.is_empty() {
            return Err(Error::Build(format!(
                "dimension mismatch against dim {dim}: {}",
                offending.join(", ")
            )));
        }
        if let Some(e) = entries.iter().find(|e| !e.label.is_verified()) {
            return Err(Error::Build(format!("{} has no verified label", e.key)));
        }
        let malicious = entries.iter().filter(|e| e.label == Label::Malicious).count() as u64;
        let meta = BuildMeta {
            corpus_seed,
            created_at,
            malicious,
            benign: entries.len() as u64 - malicious,
        };
        Ok(Self::assemble(entries, dim, meta))
    }

    fn assemble(entries: Vec<KbEntry>, dim: usize, meta: BuildMeta) -> Self {
        let norms = entries.iter().map(|e| sq_norm(&e.vector).sqrt()).collect();
        Self {
            entries,
            norms,
            dim,
            meta,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn meta(&self) -> &BuildMeta {
        &self.meta
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &KbEntry {
        &self.entries[idx]
    }

    pub fn keys(&self) -> impl Iterator<Item = &RecordKey> {
        self.entries.iter().map(|e| &e.key)
    }

    fn similarity(&self, query: &[f32], query_norm: f64, idx: usize) -> f64 {
        let norm = self.norms[idx];
        if query_norm == 0.0 || norm == 0.0 {
            return 0.0;
        }
        let dot: f64 = query
            .iter()
            .zip(&self.entries[idx].vector)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        (dot / (query_norm * norm)).clamp(-1.0, 1.0)
    }
}

fn sq_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub k: usize,
    pub sigma_min: f64,
    pub balance: bool,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k: 10,
            sigma_min: 0.70,
            balance: true,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("retrieval k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.sigma_min) {
            return Err(Error::Config(format!(
                "sigma_min {} outside [0, 1]",
                self.sigma_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbor {
    /// Position of the entry in the index.
    pub entry: usize,
    pub similarity: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalSet {
    pub neighbors: Vec<Neighbor>,
    pub query: RecordKey,
    pub sigma_min: f64,
    pub balanced: bool,
}

impl RetrievalSet {
    pub fn empty(query: RecordKey) -> Self {
        Self {
            neighbors: Vec::new(),
            query,
            sigma_min: 0.0,
            balanced: false,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    /// Malicious share of the summed neighbor similarity, if any neighbors.
    pub fn malicious_share(&self) -> Option<f64> {
        let (mal, total) = self.label_mass();
        (total > 0.0).then(|| mal / total)
    }

    fn label_mass(&self) -> (f64, f64) {
        self.neighbors.iter().fold((0.0, 0.0), |(m, t), n| {
            let s = n.similarity.max(0.0);
            if n.label == Label::Malicious {
                (m + s, t + s)
            } else {
                (m, t + s)
            }
        })
    }
}

fn by_similarity(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then(a.entry.cmp(&b.entry))
}

/// Top-k neighbors with similarity at or above `sigma_min`.
///
/// In balanced mode the top `ceil(k/2)` malicious and top `floor(k/2)` benign
/// neighbors are selected independently; a short label is not backfilled.
pub fn retrieve(index: &KbIndex, query: &CompositeEmbedding, params: &RetrievalParams) -> Result<RetrievalSet> {
    params.validate()?;
    if query.dim() != index.dim {
        return Err(Error::DimensionMismatch {
            expected: index.dim,
            got: query.dim(),
        });
    }
    let query_norm = sq_norm(&query.vector).sqrt();
    let mut candidates: Vec<Neighbor> = (0..index.len())
        .filter_map(|idx| {
            let similarity = index.similarity(&query.vector, query_norm, idx);
            (similarity >= params.sigma_min).then(|| Neighbor {
                entry: idx,
                similarity,
                label: index.entries[idx].label,
            })
        })
        .collect();
    candidates.sort_by(by_similarity);

    let neighbors = if params.balance {
        let mal_quota = params.k.div_ceil(2);
        let ben_quota = params.k / 2;
        let mut mal = 0;
        let mut ben = 0;
        candidates
            .into_iter()
            .filter(|n| {
                let (count, quota) = match n.label {
                    Label::Malicious => (&mut mal, mal_quota),
                    _ => (&mut ben, ben_quota),
                };
                if *count < quota {
                    *count += 1;
                    true
                } else {
                    false
                }
            })
            .collect()
    } else {
        candidates.truncate(params.k);
        candidates
    };

    Ok(RetrievalSet {
        neighbors,
        query: query.source.clone(),
        sigma_min: params.sigma_min,
        balanced: params.balance,
    })
}

/// W(R): mean neighbor similarity, 0 for an empty set.
pub fn context_weight(rs: &RetrievalSet) -> f64 {
    if rs.neighbors.is_empty() {
        return 0.0;
    }
    let sum: f64 = rs.neighbors.iter().map(|n| n.similarity).sum();
    (sum / rs.neighbors.len() as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KnnVote {
    pub label: Label,
    /// Winning label's share of the summed similarity.
    pub confidence: f64,
    pub tie: bool,
}

/// Similarity-weighted label vote. Exact ties go to malicious.
pub fn knn_vote(rs: &RetrievalSet) -> Result<KnnVote> {
    if rs.neighbors.is_empty() {
        return Err(Error::NoEvidence(format!("no neighbors for {}", rs.query)));
    }
    let (mal, total) = rs.label_mass();
    let ben = total - mal;
    if total <= 0.0 {
        return Ok(KnnVote {
            label: Label::Malicious,
            confidence: 0.5,
            tie: true,
        });
    }
    Ok(match mal.partial_cmp(&ben).unwrap_or(Ordering::Equal) {
        Ordering::Greater => KnnVote {
            label: Label::Malicious,
            confidence: mal / total,
            tie: false,
        },
        Ordering::Less => KnnVote {
            label: Label::Benign,
            confidence: ben / total,
            tie: false,
        },
        Ordering::Equal => KnnVote {
            label: Label::Malicious,
            confidence: 0.5,
            tie: true,
        },
    })
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

pub const INDEX_MAGIC: [u8; 8] = *b"DCFSCNKB";
pub const INDEX_VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 2 + 4 + 8 * 5;
const CHECKSUM_LEN: usize = 32;

const LABEL_MALICIOUS: u8 = 1;
const LABEL_BENIGN: u8 = 2;

impl KbIndex {
    /// Serializes to the versioned container:
    ///
    /// ```text
    /// header  magic[8] version:u16 reserved:u16 dim:u32 count:u64
    ///         malicious:u64 benign:u64 corpus_seed:u64 created_at:u64
    /// entry*  label:u8 binary_id function_id family? snippet vector[dim]:f32
    /// footer  sha256 over everything above
    /// ```
    ///
    /// Strings are `u32` length-prefixed UTF-8, the family is preceded by a
    /// presence byte, and all integers and floats are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN + self.entries.len() * (self.dim * 4 + 64));
        buf.extend_from_slice(&INDEX_MAGIC);
        buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        buf.extend_from_slice(&0u16.to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.meta.malicious.to_le_bytes());
        buf.extend_from_slice(&self.meta.benign.to_le_bytes());
        buf.extend_from_slice(&self.meta.corpus_seed.to_le_bytes());
        buf.extend_from_slice(&self.meta.created_at.to_le_bytes());

        for e in &self.entries {
            buf.push(if e.label == Label::Malicious {
                LABEL_MALICIOUS
            } else {
                LABEL_BENIGN
            });
            put_str(&mut buf, &e.key.binary_id);
            put_str(&mut buf, &e.key.function_id);
            match &e.family {
                Some(f) => {
                    buf.push(1);
                    put_str(&mut buf, f);
                }
                None => buf.push(0),
            }
            put_str(&mut buf, &e.snippet);
            for x in &e.vector {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(Error::Integrity(format!(
                "file is {} bytes, shorter than header and footer",
                data.len()
            )));
        }
        if data[..8] != INDEX_MAGIC {
            return Err(Error::Integrity("bad magic: not a knowledge-base index".into()));
        }
        let version = u16::from_le_bytes([data[8], data[9]]);
        if version != INDEX_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: INDEX_VERSION,
            });
        }
        let (body, footer) = data.split_at(data.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != footer {
            return Err(Error::Integrity("checksum mismatch (corrupt or truncated file)".into()));
        }

        let mut r = Reader { data: body, pos: 12 };
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let meta = BuildMeta {
            malicious: r.u64()?,
            benign: r.u64()?,
            corpus_seed: r.u64()?,
            created_at: r.u64()?,
        };
        if dim == 0 {
            return Err(Error::Integrity("header declares dim 0".into()));
        }
        let mut entries = Vec::new();
        for _ in 0..count {
            let label = match r.u8()? {
                LABEL_MALICIOUS => Label::Malicious,
                LABEL_BENIGN => Label::Benign,
                other => return Err(Error::Integrity(format!("unknown label byte {other}"))),
            };
            let binary_id = r.string()?;
            let function_id = r.string()?;
            let family = match r.u8()? {
                0 => None,
                1 => Some(r.string()?),
                other => return Err(Error::Integrity(format!("bad family flag {other}"))),
            };
            let snippet = r.string()?;
            let raw = r.take(dim * 4)?;
            let vector = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(KbEntry {
                key: RecordKey {
                    binary_id,
                    function_id,
                },
                label,
                family,
                snippet,
                vector,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after last entry",
                body.len() - r.pos
            )));
        }
        let malicious = entries.iter().filter(|e| e.label == Label::Malicious).count() as u64;
        if malicious != meta.malicious || entries.len() as u64 - malicious != meta.benign {
            return Err(Error::Integrity("label counts disagree with header".into()));
        }
        if entries.is_empty() {
            return Err(Error::Integrity("index has no entries".into()));
        }
        Ok(Self::assemble(entries, dim, meta))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.data.len())
            .ok_or_else(|| Error::Integrity("entry block runs past end of file".into()))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let mut a = [0u8; 8];
        a.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Integrity("string is not UTF-8".into()))
    }
}

/// Writes the index through a temporary sibling file and renames it into
/// place, so a failed write never leaves a partial index at `path`.
pub fn save_index(index: &KbIndex, path: &Path) -> Result<()> {
    let bytes = index.to_bytes();
    let tmp = path.with_extension("tmp-partial");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_index(path: &Path) -> Result<KbIndex> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    KbIndex::from_bytes(&data)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn key(b: &str, f: &str) -> RecordKey {
        RecordKey {
            binary_id: b.into(),
            function_id: f.into(),
        }
    }

    pub(crate) fn entry(id: usize, label: Label, v: Vec<f32>) -> KbEntry {
        KbEntry {
            key: key(&format!("bin{id}"), &format!("fn{id}")),
            label,
            family: (label == Label::Malicious).then(|| "fam".to_string()),
            snippet: format!("snippet {id}"),
            vector: v,
        }
    }

    fn query(v: Vec<f32>) -> CompositeEmbedding {
        CompositeEmbedding {
            vector: v,
            source: key("q", "q"),
            degraded: false,
        }
    }

    fn rs(sims: &[(Label, f64)]) -> RetrievalSet {
        RetrievalSet {
            neighbors: sims
                .iter()
                .enumerate()
                .map(|(i, &(label, similarity))| Neighbor {
                    entry: i,
                    similarity,
                    label,
                })
                .collect(),
            query: key("q", "q"),
            sigma_min: 0.0,
            balanced: false,
        }
    }

    pub(crate) fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> KbIndex {
        let entries = (0..n)
            .map(|i| {
                let v = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
                let label = if rng.gen_bool(0.5) {
                    Label::Malicious
                } else {
                    Label::Benign
                };
                entry(i, label, v)
            })
            .collect();
        KbIndex::build(entries, 1, 0).unwrap()
    }

    #[test]
    fn single_entry_index() {
        let idx = KbIndex::build(vec![entry(0, Label::Benign, vec![1.0, 0.0])], 0, 0).unwrap();
        assert_eq!(idx.len(), 1);
        let params = RetrievalParams::default();
        let hit = retrieve(&idx, &query(vec![0.8, 0.6]), &params).unwrap();
        assert_eq!(hit.len(), 1);
        let miss = retrieve(&idx, &query(vec![0.6, 0.8]), &params).unwrap();
        assert!(miss.is_empty());
    }

    #[test]
    fn build_rejects_empty_and_mixed_dims() {
        assert!(matches!(KbIndex::build(vec![], 0, 0), Err(Error::Build(_))));
        let err = KbIndex::build(
            vec![
                entry(0, Label::Benign, vec![1.0, 0.0]),
                entry(1, Label::Benign, vec![1.0, 0.0, 0.0]),
            ],
            0,
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bin1::fn1"));
    }

    #[test]
    fn build_meta_counts_match_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let idx = random_index(&mut rng, 500, 8);
        let mal = idx.entries().iter().filter(|e| e.label == Label::Malicious).count() as u64;
        let ben = idx.entries().iter().filter(|e| e.label == Label::Benign).count() as u64;
        assert_eq!((idx.meta().malicious, idx.meta().benign), (mal, ben));
        assert_eq!(mal + ben, 500);
    }

    #[test]
    fn self_retrieval_is_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let idx = random_index(&mut rng, 50, 16);
        let target = idx.entry(17).vector.clone();
        let params = RetrievalParams {
            balance: false,
            ..Default::default()
        };
        let out = retrieve(&idx, &query(target), &params).unwrap();
        assert_eq!(out.neighbors[0].entry, 17);
        assert!((out.neighbors[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dim_mismatch_is_contract_error() {
        let idx = KbIndex::build(vec![entry(0, Label::Benign, vec![1.0, 0.0])], 0, 0).unwrap();
        let err = retrieve(&idx, &query(vec![1.0]), &RetrievalParams::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn balanced_retrieval_does_not_backfill() {
        let entries = vec![
            entry(0, Label::Malicious, vec![1.0, 0.0]),
            entry(1, Label::Malicious, vec![0.99, 0.1]),
            entry(2, Label::Malicious, vec![0.98, 0.2]),
            entry(3, Label::Malicious, vec![0.97, 0.2]),
            entry(4, Label::Benign, vec![0.9, 0.3]),
        ];
        let idx = KbIndex::build(entries, 0, 0).unwrap();
        let params = RetrievalParams {
            k: 4,
            sigma_min: 0.5,
            balance: true,
        };
        let out = retrieve(&idx, &query(vec![1.0, 0.0]), &params).unwrap();
        let ids: Vec<usize> = out.neighbors.iter().map(|n| n.entry).collect();
        assert_eq!(ids, vec![0, 1, 4]);
    }

    #[test]
    fn ties_follow_insertion_order() {
        let entries = vec![
            entry(0, Label::Benign, vec![0.0, 1.0]),
            entry(1, Label::Malicious, vec![1.0, 0.0]),
            entry(2, Label::Benign, vec![1.0, 0.0]),
        ];
        let idx = KbIndex::build(entries, 0, 0).unwrap();
        let params = RetrievalParams {
            k: 5,
            sigma_min: 0.5,
            balance: false,
        };
        let out = retrieve(&idx, &query(vec![2.0, 0.0]), &params).unwrap();
        let ids: Vec<usize> = out.neighbors.iter().map(|n| n.entry).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn context_weight_examples() {
        assert_eq!(context_weight(&rs(&[])), 0.0);
        let w = context_weight(&rs(&[(Label::Benign, 0.9), (Label::Malicious, 0.8)]));
        assert!((w - 0.85).abs() < 1e-12);
    }

    #[test]
    fn knn_vote_examples() {
        let all_mal = knn_vote(&rs(&[(Label::Malicious, 0.9), (Label::Malicious, 0.75)])).unwrap();
        assert_eq!((all_mal.label, all_mal.confidence), (Label::Malicious, 1.0));

        let tie = knn_vote(&rs(&[(Label::Malicious, 0.8), (Label::Benign, 0.8)])).unwrap();
        assert_eq!((tie.label, tie.confidence, tie.tie), (Label::Malicious, 0.5, true));

        let split = knn_vote(&rs(&[
            (Label::Malicious, 0.9),
            (Label::Benign, 0.8),
            (Label::Malicious, 0.7),
        ]))
        .unwrap();
        assert_eq!(split.label, Label::Malicious);
        assert!((split.confidence - 1.6 / 2.4).abs() < 1e-12);

        assert!(matches!(knn_vote(&rs(&[])), Err(Error::NoEvidence(_))));
    }

    #[test]
    fn round_trip_and_resave_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let idx = random_index(&mut rng, 500, 24);
        let bytes = idx.to_bytes();
        let back = KbIndex::from_bytes(&bytes).unwrap();
        assert_eq!(back, idx);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncated_file_is_integrity_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bytes = random_index(&mut rng, 10, 8).to_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, 20] {
            assert!(matches!(
                KbIndex::from_bytes(&bytes[..cut]),
                Err(Error::Integrity(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[HEADER_LEN + 3] ^= 0x40;
        assert!(matches!(KbIndex::from_bytes(&flipped), Err(Error::Integrity(_))));
    }

    #[test]
    fn bumped_version_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bytes = random_index(&mut rng, 3, 8).to_bytes();
        bytes[8] = 2;
        assert!(matches!(
            KbIndex::from_bytes(&bytes),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn save_and_load_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.idx");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let idx = random_index(&mut rng, 20, 8);
        save_index(&idx, &path).unwrap();
        assert_eq!(load_index(&path).unwrap(), idx);
        assert!(!path.with_extension("tmp-partial").exists());
    }

    #[test]
    fn snippet_truncation_respects_char_boundaries() {
        assert_eq!(truncate_utf8("héllo", 2), "h");
        assert_eq!(truncate_utf8("héllo", 3), "hé");
        assert_eq!(truncate_utf8("abc", 10), "abc");
    }
}
