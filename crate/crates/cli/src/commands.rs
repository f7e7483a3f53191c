use std::collections::BTreeSet;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use dcfscan::corpus::{parse_function_records, Exclusion, LineError};
use dcfscan::embedding::{compose_query, embed_streams, provider_from_config, EmbeddingProvider};
use dcfscan::ensemble::generator_from_config;
use dcfscan::evaluation::{
    calibrate_thresholds, compute_metrics, confidence_margin_report, diagnostics_by_outcome, latency_report,
    rejection_tradeoff, ConfidenceReport, Diagnostics, Metrics, Outcome, RankedConfig, Scope, TradeoffRow,
    DEFAULT_C_MIN,
};
use dcfscan::kb::{load_index, save_index, KbEntry, KbIndex, DEFAULT_SNIPPET_CAP};
use dcfscan::pipeline::{prepare_records, BinarySummary, FunctionReport, RunOutput};
use dcfscan::simulate::{simulate, Scenario, ScenarioReport};
use dcfscan::synthetic::generate_synthetic_corpus;
use dcfscan::{FunctionRecord, Mode, Pipeline};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::PipelineConfig;
use crate::report::{header, opt, write_csv, write_json, write_text};
use crate::CliError;

/// Reads a JSONL corpus. Malformed lines are returned, not fatal.
pub fn read_corpus(path: &Path) -> Result<(Vec<FunctionRecord>, Vec<LineError>), CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let report = parse_function_records(BufReader::new(file))?;
    for w in &report.warnings {
        tracing::warn!("{}:{}: {}", path.display(), w.line, w.message);
    }
    Ok((report.records, report.errors))
}

fn strict_corpus(path: &Path) -> Result<Vec<FunctionRecord>, CliError> {
    let (records, errors) = read_corpus(path)?;
    if !errors.is_empty() {
        let listed: Vec<String> = errors.iter().map(|e| format!("line {}: {}", e.line, e.reason)).collect();
        return Err(CliError::Data(format!(
            "{} has {} malformed record(s): {}",
            path.display(),
            errors.len(),
            listed.join("; ")
        )));
    }
    Ok(records)
}

/// `SOURCE_DATE_EPOCH` when set, else 0, so rebuilt indexes are identical.
fn build_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

fn provider(cfg: &PipelineConfig) -> Result<Box<dyn EmbeddingProvider>, CliError> {
    Ok(provider_from_config(&cfg.embedding)?)
}

fn kb_path<'a>(cfg: &'a PipelineConfig, explicit: Option<&'a Path>) -> &'a Path {
    explicit.unwrap_or(&cfg.paths.kb_index)
}

#[derive(Debug, Clone, Serialize)]
pub struct BuildKbReport {
    pub corpus: PathBuf,
    pub index: PathBuf,
    pub parsed: usize,
    pub excluded_by_filter: usize,
    pub selected: usize,
    /// Selected functions skipped because neither stream carried signal.
    pub no_signal: Vec<String>,
    pub entries: usize,
    pub malicious: usize,
    pub benign: usize,
    pub dim: usize,
    pub exclusions: Vec<Exclusion>,
}

impl BuildKbReport {
    pub fn summary(&self) -> String {
        format!(
            "built {} with {} entries ({} malicious, {} benign) from {} records; {} excluded by filter, {} without signal",
            self.index.display(),
            self.entries,
            self.malicious,
            self.benign,
            self.parsed,
            self.excluded_by_filter,
            self.no_signal.len()
        )
    }
}

/// filter → top-M → embed → build → save. Any failure leaves no index file.
pub fn cmd_build_kb(cfg: &PipelineConfig, corpus: &Path, out: Option<&Path>) -> Result<BuildKbReport, CliError> {
    cfg.validate()?;
    let records = strict_corpus(corpus)?;
    let unlabeled: Vec<String> = records
        .iter()
        .filter(|r| !r.label.is_verified())
        .map(|r| r.key().to_string())
        .collect();
    if !unlabeled.is_empty() {
        return Err(CliError::Data(format!(
            "knowledge-base records need a malicious or benign label; unlabeled: {}",
            unlabeled.join(", ")
        )));
    }
    let provider = provider(cfg)?;
    let prepared = prepare_records(&records, &cfg.filter, Some(provider.as_ref()), cfg.workers)?;
    let mut entries = Vec::new();
    let mut no_signal = Vec::new();
    for f in prepared.binaries.iter().flat_map(|b| &b.functions) {
        let Some(q) = f.query.clone() else {
            no_signal.push(f.record.key().to_string());
            continue;
        };
        let snippet = if f.record.pseudo_text.trim().is_empty() {
            &f.record.asm_text
        } else {
            &f.record.pseudo_text
        };
        entries.push(KbEntry::new(q, f.record.label, None, snippet, DEFAULT_SNIPPET_CAP)?);
    }
    let index = KbIndex::build(entries, cfg.embedding.corpus_seed, build_timestamp())?;
    let path = kb_path(cfg, out).to_path_buf();
    save_index(&index, &path)?;
    let report = BuildKbReport {
        corpus: corpus.to_path_buf(),
        index: path,
        parsed: records.len(),
        excluded_by_filter: prepared.exclusions.len(),
        selected: prepared.function_count(),
        no_signal,
        entries: index.len(),
        malicious: index.meta().malicious as usize,
        benign: index.meta().benign as usize,
        dim: index.dim(),
        exclusions: prepared.exclusions,
    };
    write_json(&cfg.paths.report_dir, "build_report.json", &report)?;
    info!("{}", report.summary());
    Ok(report)
}

fn load_kb(cfg: &PipelineConfig) -> Result<Option<KbIndex>, CliError> {
    if cfg.mode.uses_retrieval() {
        Ok(Some(load_index(&cfg.paths.kb_index)?))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, Serialize)]
struct ClassifyDocument<'a> {
    mode: Mode,
    parse_errors: &'a [LineError],
    binaries: &'a [BinarySummary],
    functions: &'a [FunctionReport],
    exclusions: &'a [Exclusion],
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifyReport {
    pub binaries: Vec<BinarySummary>,
    pub functions: usize,
    pub parse_errors: usize,
    pub report_dir: PathBuf,
}

impl ClassifyReport {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} binaries, {} functions scored, {} malformed lines; reports in {}",
            self.binaries.len(),
            self.functions,
            self.parse_errors,
            self.report_dir.display()
        );
        for b in &self.binaries {
            out.push_str(&format!(
                "\n{}\t{}\tmax_fes={:.4}\tmax_ecs={:.4}",
                b.binary_id, b.verdict, b.max_fes, b.max_ecs
            ));
        }
        out
    }
}

fn run_pipeline(cfg: &PipelineConfig, records: &[FunctionRecord]) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let index = load_kb(cfg)?;
    let provider = provider(cfg)?;
    let generator = generator_from_config(&cfg.ensemble)?;
    let pipeline = Pipeline {
        index: index.as_ref(),
        provider: provider.as_ref(),
        generator: generator.as_ref(),
        workers: cfg.workers,
    };
    Ok(pipeline.classify(records, &cfg.params())?)
}

/// The serde name of a unit enum variant.
fn tag<T: Serialize>(value: &T) -> String {
    match serde_json::to_value(value) {
        Ok(serde_json::Value::String(s)) => s,
        _ => String::new(),
    }
}

fn function_rows(functions: &[FunctionReport]) -> impl Iterator<Item = Vec<String>> + '_ {
    functions.iter().map(|f| {
        vec![
            f.binary_id.clone(),
            f.function_id.clone(),
            f.truth.to_string(),
            f.tuple.verdict.to_string(),
            tag(&f.tuple.reason),
            f.tuple.fes.to_string(),
            f.tuple.ecs.to_string(),
            f.tuple.p_hat.to_string(),
            f.tuple.context_w.to_string(),
            opt(f.knn.map(|k| k.confidence)),
            f.tuple.neighbor_ids.join(" "),
            f.tuple
                .agent_votes
                .iter()
                .map(tag)
                .collect::<Vec<_>>()
                .join(" "),
        ]
    })
}

const FUNCTION_HEADER: &[&str] = &[
    "binary_id",
    "function_id",
    "truth",
    "verdict",
    "reason",
    "fes",
    "ecs",
    "p_hat",
    "context_w",
    "knn_confidence",
    "neighbors",
    "votes",
];

/// Wall-clock latencies live in their own file; every other report is
/// byte-reproducible.
fn write_latency(dir: &Path, output: &RunOutput) -> Result<(), CliError> {
    let rep = latency_report(&output.outcomes());
    write_csv(
        &dir.join("latency.csv"),
        &header(&["stage", "samples", "mean_s", "p50_s", "p95_s", "total_s", "share_pct"]),
        rep.rows.iter().map(|r| {
            vec![
                r.stage.to_string(),
                r.samples.to_string(),
                r.mean_s.to_string(),
                r.p50_s.to_string(),
                r.p95_s.to_string(),
                r.total_s.to_string(),
                r.share_pct.to_string(),
            ]
        }),
    )
}

fn write_run(cfg: &PipelineConfig, parse_errors: &[LineError], output: &RunOutput) -> Result<(), CliError> {
    let dir = &cfg.paths.report_dir;
    write_json(
        dir,
        "verdicts.json",
        &ClassifyDocument {
            mode: cfg.mode,
            parse_errors,
            binaries: &output.binaries,
            functions: &output.functions,
            exclusions: &output.exclusions,
        },
    )?;
    write_csv(
        &dir.join("binaries.csv"),
        &header(&["binary_id", "verdict", "max_fes", "max_ecs", "functions"]),
        output.binaries.iter().map(|b| {
            vec![
                b.binary_id.clone(),
                b.verdict.to_string(),
                b.max_fes.to_string(),
                b.max_ecs.to_string(),
                b.functions.to_string(),
            ]
        }),
    )?;
    write_csv(&dir.join("functions.csv"), &header(FUNCTION_HEADER), function_rows(&output.functions))?;
    write_latency(dir, output)
}

pub fn cmd_classify(cfg: &PipelineConfig, input: &Path) -> Result<ClassifyReport, CliError> {
    let (records, parse_errors) = read_corpus(input)?;
    let output = run_pipeline(cfg, &records)?;
    write_run(cfg, &parse_errors, &output)?;
    Ok(ClassifyReport {
        binaries: output.binaries,
        functions: output.functions.len(),
        parse_errors: parse_errors.len(),
        report_dir: cfg.paths.report_dir.clone(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub mode: Mode,
    pub records: usize,
    pub accepted_only: Metrics,
    pub all: Metrics,
    pub diagnostics: Diagnostics,
    pub tradeoff: Vec<TradeoffRow>,
    pub confidence: ConfidenceReport,
}

impl EvaluationReport {
    pub fn summary(&self) -> String {
        let m = &self.accepted_only;
        let mut out = format!(
            "{} functions: accuracy {:.4}, precision {:.4}, recall {:.4}, f1 {:.4}, fpr {:.4}, fnr {:.4}, rejection {:.4}",
            self.records, m.accuracy, m.precision, m.recall, m.f1, m.fpr, m.fnr, m.rejection_rate
        );
        if let Some(gap) = self.diagnostics.ecs_gap {
            out.push_str(&format!("\nECS gap (errors - correct): {gap:.4}"));
        }
        out
    }
}

/// Classifies a labelled corpus and writes metrics, diagnostics, the τ
/// trade-off table, k-NN confidence margins, and plot-ready CSVs.
pub fn cmd_evaluate(cfg: &PipelineConfig, input: &Path) -> Result<EvaluationReport, CliError> {
    let (records, parse_errors) = read_corpus(input)?;
    let output = run_pipeline(cfg, &records)?;
    write_run(cfg, &parse_errors, &output)?;
    let outcomes = output.outcomes();
    let report = EvaluationReport {
        mode: cfg.mode,
        records: outcomes.len(),
        accepted_only: compute_metrics(&outcomes, Scope::AcceptedOnly),
        all: compute_metrics(&outcomes, Scope::All),
        diagnostics: diagnostics_by_outcome(&outcomes),
        tradeoff: rejection_tradeoff(&outcomes, &cfg.tradeoff_taus, &cfg.thresholds),
        confidence: confidence_margin_report(&outcomes, DEFAULT_C_MIN),
    };
    let dir = &cfg.paths.report_dir;
    write_json(dir, "evaluation.json", &report)?;
    write_csv(
        &dir.join("tradeoff.csv"),
        &header(&["tau", "fpr", "fnr", "rejection_rate", "accuracy"]),
        report.tradeoff.iter().map(|r| {
            vec![
                r.tau.to_string(),
                r.fpr.to_string(),
                r.fnr.to_string(),
                r.rejection_rate.to_string(),
                r.accuracy.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("scatter.csv"),
        &header(&["binary_id", "function_id", "outcome", "fes", "ecs"]),
        output.functions.iter().map(|f| {
            vec![
                f.binary_id.clone(),
                f.function_id.clone(),
                Outcome::of(f.truth, f.tuple.verdict)
                    .map(|o| o.as_str().to_string())
                    .unwrap_or_else(|| "rejected".into()),
                f.tuple.fes.to_string(),
                f.tuple.ecs.to_string(),
            ]
        }),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChosenRetrieval {
    k: usize,
    sigma_min: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChosenEnsemble {
    n_agents: usize,
    temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChosenThresholds {
    delta_high: f64,
    delta_low: f64,
    tau_stable: f64,
}

/// Top-ranked configuration as TOML tables that merge into the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChosenConfig {
    retrieval: ChosenRetrieval,
    ensemble: ChosenEnsemble,
    thresholds: ChosenThresholds,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub configurations: usize,
    pub top: Vec<RankedConfig>,
    pub report_dir: PathBuf,
}

impl CalibrationReport {
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{} configurations ranked; reports in {}",
            self.configurations,
            self.report_dir.display()
        );
        for c in &self.top {
            let p = &c.point;
            out.push_str(&format!(
                "\n#{} k={} sigma={} N={} T={} dh={} dl={} tau={} objective={:.4} rejection={:.4}{}",
                c.rank,
                p.k,
                p.sigma_min,
                p.n_agents,
                p.temperature,
                p.delta_high,
                p.delta_low,
                p.tau_stable,
                c.objective_value,
                c.metrics.rejection_rate,
                if c.feasible { "" } else { " (infeasible)" }
            ));
        }
        out
    }
}

/// Functions of validation binaries that also appear in the knowledge base.
fn overlap(records: &[FunctionRecord], index: &KbIndex) -> Vec<String> {
    let kb: BTreeSet<&str> = index.keys().map(|k| k.binary_id.as_str()).collect();
    records
        .iter()
        .map(|r| r.binary_id.as_str())
        .filter(|b| kb.contains(b))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_owned)
        .collect()
}

/// Exhaustive sweep over the configured grid on a validation corpus whose
/// binaries must not appear in the knowledge base.
pub fn cmd_calibrate(cfg: &PipelineConfig, validation: &Path) -> Result<CalibrationReport, CliError> {
    cfg.validate()?;
    let records = strict_corpus(validation)?;
    let index = load_kb(cfg)?;
    if let Some(index) = &index {
        let shared = overlap(&records, index);
        if !shared.is_empty() {
            return Err(CliError::Data(format!(
                "validation binaries overlap the knowledge base: {}",
                shared.join(", ")
            )));
        }
    }
    let provider = provider(cfg)?;
    let embed = cfg.mode.uses_retrieval().then_some(provider.as_ref());
    let prepared = prepare_records(&records, &cfg.filter, embed, cfg.workers)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    let grid = &cfg.calibration.grid;
    let ranked = pool.install(|| {
        calibrate_thresholds(grid, cfg.calibration.objective, |run| {
            let mut params = cfg.params();
            params.retrieval.k = run.k;
            params.retrieval.sigma_min = run.sigma_min;
            params.ensemble.n_agents = run.n_agents;
            params.ensemble.temperature = run.temperature;
            params.ensemble.max_parallel = 1;
            let generator = generator_from_config(&params.ensemble)?;
            let pipeline = Pipeline {
                index: index.as_ref(),
                provider: provider.as_ref(),
                generator: generator.as_ref(),
                workers: 1,
            };
            Ok(pipeline.run(&prepared, &params)?.outcomes())
        })
    })?;

    let dir = &cfg.paths.report_dir;
    write_csv(
        &dir.join("calibration.csv"),
        &header(&[
            "rank",
            "k",
            "sigma_min",
            "n_agents",
            "temperature",
            "delta_high",
            "delta_low",
            "tau_stable",
            "objective",
            "feasible",
            "accuracy",
            "f1",
            "fpr",
            "fnr",
            "rejection_rate",
        ]),
        ranked.iter().map(|c| {
            let p = &c.point;
            let m = &c.metrics;
            vec![
                c.rank.to_string(),
                p.k.to_string(),
                p.sigma_min.to_string(),
                p.n_agents.to_string(),
                p.temperature.to_string(),
                p.delta_high.to_string(),
                p.delta_low.to_string(),
                p.tau_stable.to_string(),
                c.objective_value.to_string(),
                c.feasible.to_string(),
                m.accuracy.to_string(),
                m.f1.to_string(),
                m.fpr.to_string(),
                m.fnr.to_string(),
                m.rejection_rate.to_string(),
            ]
        }),
    )?;
    if let Some(best) = ranked.first() {
        let p = &best.point;
        let chosen = ChosenConfig {
            retrieval: ChosenRetrieval {
                k: p.k,
                sigma_min: p.sigma_min,
            },
            ensemble: ChosenEnsemble {
                n_agents: p.n_agents,
                temperature: p.temperature,
            },
            thresholds: ChosenThresholds {
                delta_high: p.delta_high,
                delta_low: p.delta_low,
                tau_stable: p.tau_stable,
            },
        };
        let text = toml::to_string(&chosen).map_err(|e| CliError::Report(e.to_string()))?;
        write_text(dir, "chosen.toml", &text)?;
    }
    Ok(CalibrationReport {
        configurations: ranked.len(),
        top: ranked.into_iter().take(cfg.calibration.show).collect(),
        report_dir: dir.clone(),
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    scenario: Vec<Scenario>,
}

pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file: ScenarioFile = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
    };
    Ok(file.scenario)
}

/// Monte-Carlo FES/ECS distributions over synthetic agents, one row per
/// scenario. Agents default to the configured ensemble size and seed.
pub fn cmd_simulate(cfg: &PipelineConfig, scenarios: &[Scenario]) -> Result<Vec<ScenarioReport>, CliError> {
    let reports = simulate(scenarios, cfg.ensemble.n_agents, &cfg.thresholds, cfg.ensemble.seed)?;
    let dir = &cfg.paths.report_dir;
    write_json(dir, "simulate.json", &reports)?;
    write_csv(
        &dir.join("simulate.csv"),
        &header(&[
            "p_malicious",
            "w",
            "n_agents",
            "reps",
            "mean_fes",
            "mean_ecs",
            "malicious",
            "benign",
            "uncertain",
            "entropy_reject",
            "gray_zone",
        ]),
        reports.iter().map(|r| {
            vec![
                r.p_malicious.to_string(),
                r.w.to_string(),
                r.n_agents.to_string(),
                r.reps.to_string(),
                r.mean_fes.to_string(),
                r.mean_ecs.to_string(),
                r.malicious.to_string(),
                r.benign.to_string(),
                r.uncertain.to_string(),
                r.entropy_reject.to_string(),
                r.gray_zone.to_string(),
            ]
        }),
    )?;
    Ok(reports)
}

/// One row per parsed record: ids, label, then the composite vector. Records
/// with no signal in either stream export a zero vector.
pub fn cmd_export_embeddings(cfg: &PipelineConfig, corpus: &Path, out: Option<&Path>) -> Result<(PathBuf, usize), CliError> {
    cfg.embedding.validate()?;
    let records = strict_corpus(corpus)?;
    let provider = provider(cfg)?;
    let dim = 2 * provider.dim();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start worker pool: {e}")))?;
    let vectors: Vec<Vec<f32>> = pool.install(|| {
        records
            .par_iter()
            .map(|r| {
                let (asm, code) = embed_streams(r, provider.as_ref())?;
                Ok(match compose_query(&asm, &code, r.key()) {
                    Ok(q) => q.vector,
                    Err(dcfscan::Error::NoSignal(_)) => vec![0.0; dim],
                    Err(e) => return Err(e),
                })
            })
            .collect::<dcfscan::Result<Vec<_>>>()
    })?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.report_dir.join("embeddings.csv"));
    let mut head = header(&["binary_id", "function_id", "label"]);
    head.extend((0..dim).map(|i| format!("v{i}")));
    write_csv(
        &path,
        &head,
        records.iter().zip(&vectors).map(|(r, v)| {
            let mut row = vec![r.binary_id.clone(), r.function_id.clone(), r.label.to_string()];
            row.extend(v.iter().map(|x| x.to_string()));
            row
        }),
    )?;
    Ok((path, records.len()))
}

#[derive(Debug, Clone, Serialize)]
pub struct SyntheticReport {
    pub kb: PathBuf,
    pub test: PathBuf,
    pub kb_records: usize,
    pub test_records: usize,
    pub ambiguous: Vec<String>,
}

fn write_jsonl(path: &Path, records: impl Iterator<Item = FunctionRecord>) -> Result<(), CliError> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes `kb.jsonl`, `test.jsonl`, and `synthetic.json` (ambiguous ids and
/// the generating config) into `out_dir`.
pub fn cmd_generate_synthetic(cfg: &PipelineConfig, out_dir: &Path) -> Result<SyntheticReport, CliError> {
    let corpus = generate_synthetic_corpus(&cfg.synthetic)?;
    crate::report::ensure_dir(out_dir)?;
    let kb = out_dir.join("kb.jsonl");
    let test = out_dir.join("test.jsonl");
    write_jsonl(&kb, corpus.kb.iter().map(|i| i.record.clone()))?;
    write_jsonl(&test, corpus.test.iter().map(|i| i.record.clone()))?;
    let report = SyntheticReport {
        kb,
        test,
        kb_records: corpus.kb.len(),
        test_records: corpus.test.len(),
        ambiguous: corpus
            .test
            .iter()
            .filter(|i| i.ambiguous)
            .map(|i| i.record.key().to_string())
            .collect(),
    };
    #[derive(Serialize)]
    struct Manifest<'a> {
        config: &'a dcfscan::synthetic::SyntheticCorpusConfig,
        ambiguous: &'a [String],
    }
    write_json(
        out_dir,
        "synthetic.json",
        &Manifest {
            config: &cfg.synthetic,
            ambiguous: &report.ambiguous,
        },
    )?;
    Ok(report)
}
