//! End-to-end inference: filter, embed, retrieve, vote, decide, aggregate.
//!
//! Work is split into a preparation pass (DCF selection and embedding) and a
//! scoring pass, so threshold sweeps can re-score cached embeddings without
//! re-embedding.

use std::collections::{BTreeMap, HashMap};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{filter_dcfs, select_top_m, DcfFilterConfig, Exclusion, FunctionRecord};
use crate::embedding::{compose_query, embed_streams, CompositeEmbedding, EmbeddingProvider};
use crate::ensemble::{evidence_items, run_ensemble, AgentResponse, EnsembleConfig, Generator, TEMPLATE_ZERO_SHOT};
use crate::error::{Error, Result};
use crate::evaluation::{OutcomeRecord, Stage};
use crate::kb::{context_weight, knn_vote, retrieve, KbIndex, KnnVote, RetrievalParams, RetrievalSet};
use crate::label::{Label, Verdict};
use crate::verdict::{aggregate_binary, score, DecisionThresholds, Reason, VerdictTuple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    /// Similarity-weighted neighbor vote, no ensemble.
    KnnOnly,
    /// Ensemble over an empty evidence set with `W = 1`.
    ZeroShot,
}

impl Mode {
    pub fn uses_retrieval(self) -> bool {
        !matches!(self, Mode::ZeroShot)
    }

    pub fn uses_ensemble(self) -> bool {
        !matches!(self, Mode::KnnOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineParams {
    pub filter: DcfFilterConfig,
    pub retrieval: RetrievalParams,
    pub ensemble: EnsembleConfig,
    pub thresholds: DecisionThresholds,
    pub mode: Mode,
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        self.filter.validate()?;
        self.retrieval.validate()?;
        self.ensemble.validate()?;
        self.thresholds.validate()
    }
}

/// One selected DCF with its query vector. `query` is `None` when neither
/// stream carried signal or the mode never needed one.
#[derive(Debug, Clone)]
pub struct PreparedFunction {
    pub record: FunctionRecord,
    pub query: Option<CompositeEmbedding>,
    pub lift_parse: Duration,
    pub embed: Duration,
}

#[derive(Debug, Clone)]
pub struct PreparedBinary {
    pub binary_id: String,
    pub functions: Vec<PreparedFunction>,
}

#[derive(Debug, Clone, Default)]
pub struct Prepared {
    pub binaries: Vec<PreparedBinary>,
    pub exclusions: Vec<Exclusion>,
}

impl Prepared {
    pub fn function_count(&self) -> usize {
        self.binaries.iter().map(|b| b.functions.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborReport {
    pub id: String,
    pub label: Label,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    pub similarity: f64,
}

/// The full evidence chain for one scored function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunctionReport {
    pub binary_id: String,
    pub function_id: String,
    pub truth: Label,
    #[serde(flatten)]
    pub tuple: VerdictTuple,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub knn: Option<KnnVote>,
    pub neighbors: Vec<NeighborReport>,
    pub responses: Vec<AgentResponse>,
    #[serde(skip)]
    pub latencies: BTreeMap<Stage, Duration>,
}

impl FunctionReport {
    pub fn outcome(&self) -> OutcomeRecord {
        OutcomeRecord {
            truth: self.truth,
            tuple: self.tuple.clone(),
            knn: self.knn.map(|k| (k.label, k.confidence)),
            stage_latencies: self.latencies.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinarySummary {
    pub binary_id: String,
    pub verdict: Verdict,
    pub max_fes: f64,
    pub max_ecs: f64,
    pub functions: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub binaries: Vec<BinarySummary>,
    pub functions: Vec<FunctionReport>,
    pub exclusions: Vec<Exclusion>,
}

impl RunOutput {
    pub fn outcomes(&self) -> Vec<OutcomeRecord> {
        self.functions.iter().map(FunctionReport::outcome).collect()
    }
}

pub struct Pipeline<'a> {
    pub index: Option<&'a KbIndex>,
    pub provider: &'a dyn EmbeddingProvider,
    pub generator: &'a dyn Generator,
    pub workers: usize,
}

/// Groups records by binary in order of first appearance.
fn group_by_binary(records: &[FunctionRecord]) -> Vec<(String, Vec<FunctionRecord>)> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(String, Vec<FunctionRecord>)> = Vec::new();
    for r in records {
        let i = *slot.entry(r.binary_id.as_str()).or_insert_with(|| {
            groups.push((r.binary_id.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[i].1.push(r.clone());
    }
    groups
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    if workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs `f` on a dedicated pool of `workers` threads. A single-worker call
/// made from inside an existing pool runs inline on that pool instead, so
/// outer sweeps can parallelize over configurations.
fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 1 && rayon::current_thread_index().is_some() {
        return Ok(f());
    }
    Ok(pool(workers)?.install(f))
}

fn prepare_binary(
    binary_id: &str,
    group: &[FunctionRecord],
    filter: &DcfFilterConfig,
    provider: Option<&dyn EmbeddingProvider>,
) -> Result<(PreparedBinary, Vec<Exclusion>)> {
    let started = Instant::now();
    let outcome = filter_dcfs(group, filter);
    let selected = select_top_m(&outcome.retained, filter.top_m)?;
    let lift = started.elapsed() / selected.len().max(1) as u32;
    let functions = selected
        .into_iter()
        .map(|record| {
            let started = Instant::now();
            let query = match provider {
                Some(provider) => {
                    let (asm, code) = embed_streams(&record, provider)?;
                    match compose_query(&asm, &code, record.key()) {
                        Ok(q) => Some(q),
                        Err(Error::NoSignal(_)) => None,
                        Err(e) => return Err(e),
                    }
                }
                None => None,
            };
            Ok(PreparedFunction {
                record,
                query,
                lift_parse: lift,
                embed: started.elapsed(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        PreparedBinary {
            binary_id: binary_id.to_owned(),
            functions,
        },
        outcome.excluded,
    ))
}

/// DCF selection per binary, then embedding of every selected function
/// when a provider is given. Binaries are processed concurrently; output
/// keeps input order.
pub fn prepare_records(
    records: &[FunctionRecord],
    filter: &DcfFilterConfig,
    provider: Option<&dyn EmbeddingProvider>,
    workers: usize,
) -> Result<Prepared> {
    filter.validate()?;
    let groups = group_by_binary(records);
    let per_binary = with_workers(workers, || {
        groups
            .par_iter()
            .map(|(binary_id, group)| prepare_binary(binary_id, group, filter, provider))
            .collect::<Result<Vec<_>>>()
    })??;
    let mut prepared = Prepared::default();
    for (binary, excluded) in per_binary {
        prepared.binaries.push(binary);
        prepared.exclusions.extend(excluded);
    }
    Ok(prepared)
}

impl<'a> Pipeline<'a> {
    fn check_index(&self, mode: Mode) -> Result<Option<&'a KbIndex>> {
        if !mode.uses_retrieval() {
            return Ok(None);
        }
        let index = self
            .index
            .ok_or_else(|| Error::Config(format!("mode {mode:?} needs a knowledge-base index")))?;
        let expected = 2 * self.provider.dim();
        if index.dim() != expected {
            return Err(Error::DimensionMismatch {
                expected: index.dim(),
                got: expected,
            });
        }
        Ok(Some(index))
    }

    pub fn prepare(&self, records: &[FunctionRecord], filter: &DcfFilterConfig, mode: Mode) -> Result<Prepared> {
        self.check_index(mode)?;
        let provider = mode.uses_retrieval().then_some(self.provider);
        prepare_records(records, filter, provider, self.workers)
    }

    /// Scores every prepared function and aggregates per binary. Output
    /// order follows input order regardless of worker count.
    pub fn run(&self, prepared: &Prepared, params: &PipelineParams) -> Result<RunOutput> {
        params.validate()?;
        let index = self.check_index(params.mode)?;
        let mut ensemble = params.ensemble.clone();
        if params.mode == Mode::ZeroShot {
            ensemble.prompt_template_id = TEMPLATE_ZERO_SHOT.into();
        }
        let scored: Vec<Vec<FunctionReport>> = with_workers(self.workers, || {
            prepared
                .binaries
                .par_iter()
                .map(|b| {
                    b.functions
                        .iter()
                        .map(|f| self.score_function(f, index, params, &ensemble))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })??;

        let mut out = RunOutput {
            exclusions: prepared.exclusions.clone(),
            ..RunOutput::default()
        };
        for (binary, reports) in prepared.binaries.iter().zip(scored) {
            let started = Instant::now();
            let agg = aggregate_binary(
                &binary.binary_id,
                reports
                    .iter()
                    .map(|r| (r.function_id.clone(), r.tuple.clone()))
                    .collect(),
            );
            let share = started.elapsed() / reports.len().max(1) as u32;
            out.binaries.push(BinarySummary {
                binary_id: agg.binary_id,
                verdict: agg.verdict,
                max_fes: agg.max_fes,
                max_ecs: agg.max_ecs,
                functions: reports.len(),
            });
            out.functions.extend(reports.into_iter().map(|mut r| {
                *r.latencies.entry(Stage::Decide).or_default() += share;
                r
            }));
        }
        Ok(out)
    }

    pub fn classify(&self, records: &[FunctionRecord], params: &PipelineParams) -> Result<RunOutput> {
        let prepared = self.prepare(records, &params.filter, params.mode)?;
        self.run(&prepared, params)
    }

    fn score_function(
        &self,
        f: &PreparedFunction,
        index: Option<&KbIndex>,
        params: &PipelineParams,
        ensemble: &EnsembleConfig,
    ) -> Result<FunctionReport> {
        let mut latencies = BTreeMap::new();
        latencies.insert(Stage::LiftParse, f.lift_parse);
        if params.mode.uses_retrieval() {
            latencies.insert(Stage::Embed, f.embed);
        }
        let mut report = FunctionReport {
            binary_id: f.record.binary_id.clone(),
            function_id: f.record.function_id.clone(),
            truth: f.record.label,
            tuple: VerdictTuple::rejected(Reason::NoEvidence, 0.0),
            knn: None,
            neighbors: Vec::new(),
            responses: Vec::new(),
            latencies,
        };

        let rs = match (index, &f.query) {
            (Some(index), Some(query)) => {
                let started = Instant::now();
                let rs = retrieve(index, query, &params.retrieval)?;
                report.latencies.insert(Stage::Retrieve, started.elapsed());
                rs
            }
            (Some(_), None) => {
                report.latencies.insert(Stage::Retrieve, Duration::ZERO);
                RetrievalSet::empty(f.record.key())
            }
            (None, _) => RetrievalSet::empty(f.record.key()),
        };
        if let Some(index) = index {
            report.neighbors = rs
                .neighbors
                .iter()
                .map(|n| {
                    let e = index.entry(n.entry);
                    NeighborReport {
                        id: e.key.to_string(),
                        label: e.label,
                        family: e.family.clone(),
                        similarity: n.similarity,
                    }
                })
                .collect();
        }
        let neighbor_ids: Vec<String> = report.neighbors.iter().map(|n| n.id.clone()).collect();
        if params.mode.uses_retrieval() && rs.is_empty() {
            report.tuple.neighbor_ids = neighbor_ids;
            return Ok(report);
        }
        report.knn = knn_vote(&rs).ok();
        let w = if params.mode == Mode::ZeroShot { 1.0 } else { context_weight(&rs) };

        let started = Instant::now();
        let mut tuple = match params.mode {
            Mode::KnnOnly => {
                let vote = report.knn.expect("non-empty retrieval has a k-NN vote");
                let share = rs.malicious_share().unwrap_or(0.5);
                let fes = share * w;
                let verdict = Verdict::from(vote.label);
                VerdictTuple {
                    verdict,
                    fes,
                    ecs: 0.0,
                    p_hat: share,
                    context_w: w,
                    reason: Reason::Consensus,
                    agent_votes: Vec::new(),
                    neighbor_ids: Vec::new(),
                }
            }
            Mode::Full | Mode::ZeroShot => {
                let evidence = index.map(|i| evidence_items(&rs, i)).unwrap_or_default();
                let votes = run_ensemble(&f.record, &evidence, ensemble, self.generator)?;
                report.latencies.insert(Stage::Ensemble, started.elapsed());
                report.responses = votes.responses.clone();
                let decide_started = Instant::now();
                let t = score(&votes, w, &params.thresholds);
                report.latencies.insert(Stage::Decide, decide_started.elapsed());
                t
            }
        };
        if params.mode == Mode::KnnOnly {
            report.latencies.insert(Stage::Decide, started.elapsed());
        }
        tuple.neighbor_ids = neighbor_ids;
        report.tuple = tuple;
        Ok(report)
    }
}
