//! Offline stand-in corpus with controllable class structure.
//!
//! Every synthetic function is a bag of tokens. Each class owns several
//! families, each family owns a small token pool, and one pool is shared by
//! everybody. A function draws a `cluster_separation` fraction of its tokens
//! from its family pool and the rest from the shared pool, so under the mock
//! embedding the two classes form tight clusters whose cross-class cosine
//! falls as separation rises; at separation 1 the class means are
//! orthogonal. Ambiguous test points split their family draws evenly between
//! one malicious and one benign family, landing midway between the clusters,
//! and carry a coin-flip truth label.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::FunctionRecord;
use crate::embedding::{compose_query, embed_streams, EmbeddingProvider, MockProvider};
use crate::error::{Error, Result};
use crate::kb::{KbEntry, DEFAULT_SNIPPET_CAP};
use crate::label::Label;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCorpusConfig {
    pub kb_size: usize,
    pub test_size: usize,
    /// Per-stream mock embedding dimension the corpus is meant for.
    pub dim: usize,
    /// Fraction of tokens drawn from the family pool, in `[0, 1]`.
    pub cluster_separation: f64,
    pub ambiguous_fraction: f64,
    pub seed: u64,
    pub families_per_class: usize,
    pub family_pool: usize,
    pub shared_pool: usize,
    pub tokens_per_stream: usize,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            kb_size: 400,
            test_size: 200,
            dim: 64,
            cluster_separation: 0.45,
            ambiguous_fraction: 0.2,
            seed: 7,
            families_per_class: 4,
            family_pool: 8,
            shared_pool: 16,
            tokens_per_stream: 320,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kb_size < 10 || self.test_size < 10 {
            return Err(Error::Config("synthetic kb_size and test_size must be at least 10".into()));
        }
        if !(0.0..=1.0).contains(&self.cluster_separation) {
            return Err(Error::Config("cluster_separation must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config("ambiguous_fraction must lie in [0, 1]".into()));
        }
        if self.families_per_class == 0 || self.family_pool == 0 || self.shared_pool == 0 || self.tokens_per_stream == 0 {
            return Err(Error::Config("synthetic pool sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn provider(&self) -> Result<MockProvider> {
        MockProvider::new(self.dim, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticItem {
    pub record: FunctionRecord,
    /// `mal-2`, `ben-0`, or `mal-1+ben-3` for ambiguous points.
    pub family: String,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticCorpus {
    pub kb: Vec<SyntheticItem>,
    pub test: Vec<SyntheticItem>,
}

impl SyntheticCorpus {
    pub fn kb_records(&self) -> Vec<FunctionRecord> {
        self.kb.iter().map(|i| i.record.clone()).collect()
    }

    pub fn test_records(&self) -> Vec<FunctionRecord> {
        self.test.iter().map(|i| i.record.clone()).collect()
    }

    /// Embeds the knowledge-base half into index entries.
    pub fn kb_entries(&self, provider: &dyn EmbeddingProvider) -> Result<Vec<KbEntry>> {
        self.kb
            .par_iter()
            .map(|item| {
                let (asm, code) = embed_streams(&item.record, provider)?;
                let q = compose_query(&asm, &code, item.record.key())?;
                KbEntry::new(
                    q,
                    item.record.label,
                    Some(item.family.clone()),
                    &item.record.pseudo_text,
                    DEFAULT_SNIPPET_CAP,
                )
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
enum Source {
    Family(Label, usize),
    Mixed(usize, usize),
}

fn class_tag(label: Label) -> &'static str {
    if label == Label::Malicious {
        "mal"
    } else {
        "ben"
    }
}

fn draw_tokens(rng: &mut ChaCha8Rng, cfg: &SyntheticCorpusConfig, prefix: &str, source: Source) -> String {
    let mut words = Vec::with_capacity(cfg.tokens_per_stream);
    for _ in 0..cfg.tokens_per_stream {
        let word = if rng.gen::<f64>() < cfg.cluster_separation {
            let (label, family) = match source {
                Source::Family(label, f) => (label, f),
                Source::Mixed(m, b) => {
                    if rng.gen::<bool>() {
                        (Label::Malicious, m)
                    } else {
                        (Label::Benign, b)
                    }
                }
            };
            format!("{prefix}_{}_{family}_{}", class_tag(label), rng.gen_range(0..cfg.family_pool))
        } else {
            format!("{prefix}_shared_{}", rng.gen_range(0..cfg.shared_pool))
        };
        words.push(word);
    }
    words
        .chunks(8)
        .map(|line| line.join(" "))
        .collect::<Vec<_>>()
        .join("\n")
}

fn item(rng: &mut ChaCha8Rng, cfg: &SyntheticCorpusConfig, binary_id: String, label: Label, source: Source) -> SyntheticItem {
    let asm_text = draw_tokens(rng, cfg, "a", source);
    let pseudo_text = draw_tokens(rng, cfg, "c", source);
    let (family, ambiguous) = match source {
        Source::Family(l, f) => (format!("{}-{f}", class_tag(l)), false),
        Source::Mixed(m, b) => (format!("mal-{m}+ben-{b}"), true),
    };
    SyntheticItem {
        record: FunctionRecord {
            binary_id,
            function_id: "f0".into(),
            asm_text,
            pseudo_text,
            instr_count: rng.gen_range(40..400),
            cyclomatic_complexity: Some(rng.gen_range(5..40)),
            cfg_nodes: None,
            cfg_edges: None,
            label,
        },
        family,
        ambiguous,
    }
}

/// Deterministic under `cfg.seed`. The knowledge base is label-balanced and
/// contains only clean points; the test split has
/// `round(test_size * ambiguous_fraction)` ambiguous points, shuffled in.
pub fn generate_synthetic_corpus(cfg: &SyntheticCorpusConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fam = cfg.families_per_class;

    let kb = (0..cfg.kb_size)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Malicious } else { Label::Benign };
            let f = rng.gen_range(0..fam);
            item(&mut rng, cfg, format!("syn-kb-{i:05}"), label, Source::Family(label, f))
        })
        .collect();

    let n_ambiguous = (cfg.test_size as f64 * cfg.ambiguous_fraction).round() as usize;
    let mut kinds: Vec<bool> = (0..cfg.test_size).map(|i| i < n_ambiguous).collect();
    kinds.shuffle(&mut rng);
    let test = kinds
        .into_iter()
        .enumerate()
        .map(|(i, ambiguous)| {
            let label = if rng.gen::<bool>() { Label::Malicious } else { Label::Benign };
            let source = if ambiguous {
                Source::Mixed(rng.gen_range(0..fam), rng.gen_range(0..fam))
            } else {
                Source::Family(label, rng.gen_range(0..fam))
            };
            item(&mut rng, cfg, format!("syn-test-{i:05}"), label, source)
        })
        .collect();

    Ok(SyntheticCorpus { kb, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::cosine_similarity;

    fn small(separation: f64, ambiguous: f64) -> SyntheticCorpusConfig {
        SyntheticCorpusConfig {
            kb_size: 40,
            test_size: 20,
            cluster_separation: separation,
            ambiguous_fraction: ambiguous,
            ..SyntheticCorpusConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = small(0.45, 0.2);
        let a = serde_json::to_string(&generate_synthetic_corpus(&cfg).unwrap()).unwrap();
        let b = serde_json::to_string(&generate_synthetic_corpus(&cfg).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ambiguous_count_and_validity() {
        let c = generate_synthetic_corpus(&small(0.45, 0.25)).unwrap();
        assert_eq!(c.test.iter().filter(|i| i.ambiguous).count(), 5);
        assert!(c.kb.iter().all(|i| !i.ambiguous && i.record.validate().is_ok()));
        let mal = c.kb.iter().filter(|i| i.record.label == Label::Malicious).count();
        assert_eq!(mal, 20);
    }

    #[test]
    fn separation_controls_cross_class_similarity() {
        let cross = |sep: f64| {
            let cfg = small(sep, 0.0);
            let c = generate_synthetic_corpus(&cfg).unwrap();
            let entries = c.kb_entries(&cfg.provider().unwrap()).unwrap();
            let (mut sum, mut n) = (0.0, 0);
            for a in entries.iter().filter(|e| e.label == Label::Malicious) {
                for b in entries.iter().filter(|e| e.label == Label::Benign) {
                    sum += cosine_similarity(&a.vector, &b.vector).unwrap();
                    n += 1;
                }
            }
            sum / n as f64
        };
        let low = cross(0.2);
        let high = cross(1.0);
        assert!(low > high + 0.3, "{low} vs {high}");
        assert!(high.abs() < 0.2, "{high}");
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate_synthetic_corpus(&small(1.5, 0.0)).is_err());
        assert!(generate_synthetic_corpus(&SyntheticCorpusConfig {
            kb_size: 5,
            ..SyntheticCorpusConfig::default()
        })
        .is_err());
    }
}
