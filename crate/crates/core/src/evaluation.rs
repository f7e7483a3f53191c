//! Metrics and calibration over scored outcomes.
//!
//! Uncertain verdicts are a reject option: they are excluded from the
//! confusion matrix and reported as the rejection rate instead.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Label, Verdict};
use crate::verdict::{DecisionThresholds, Reason, VerdictTuple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    LiftParse,
    Embed,
    Retrieve,
    Ensemble,
    Decide,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::LiftParse,
        Stage::Embed,
        Stage::Retrieve,
        Stage::Ensemble,
        Stage::Decide,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::LiftParse => "lift-parse",
            Stage::Embed => "embed",
            Stage::Retrieve => "retrieve",
            Stage::Ensemble => "ensemble",
            Stage::Decide => "decide",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One scored function with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeRecord {
    pub truth: Label,
    pub tuple: VerdictTuple,
    /// Label and confidence of the similarity-weighted k-NN vote, when the
    /// retrieval set was non-empty.
    pub knn: Option<(Label, f64)>,
    pub stage_latencies: BTreeMap<Stage, Duration>,
}

impl OutcomeRecord {
    pub fn new(truth: Label, tuple: VerdictTuple) -> Self {
        Self {
            truth,
            tuple,
            knn: None,
            stage_latencies: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "TP")]
    TruePositive,
    #[serde(rename = "TN")]
    TrueNegative,
    #[serde(rename = "FP")]
    FalsePositive,
    #[serde(rename = "FN")]
    FalseNegative,
}

impl Outcome {
    pub const ALL: [Outcome; 4] = [
        Outcome::TruePositive,
        Outcome::TrueNegative,
        Outcome::FalsePositive,
        Outcome::FalseNegative,
    ];

    /// `None` for uncertain predictions or unknown truth.
    pub fn of(truth: Label, predicted: Verdict) -> Option<Self> {
        match (truth, predicted) {
            (Label::Malicious, Verdict::Malicious) => Some(Outcome::TruePositive),
            (Label::Benign, Verdict::Benign) => Some(Outcome::TrueNegative),
            (Label::Benign, Verdict::Malicious) => Some(Outcome::FalsePositive),
            (Label::Malicious, Verdict::Benign) => Some(Outcome::FalseNegative),
            _ => None,
        }
    }

    pub fn is_error(self) -> bool {
        matches!(self, Outcome::FalsePositive | Outcome::FalseNegative)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::TruePositive => "TP",
            Outcome::TrueNegative => "TN",
            Outcome::FalsePositive => "FP",
            Outcome::FalseNegative => "FN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Confusion matrix over accepted verdicts only.
    AcceptedOnly,
    /// Every record counts; an uncertain verdict is scored as wrong
    /// (FN on malicious truth, FP on benign truth).
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Metrics {
    pub total: usize,
    pub rejected: usize,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub rejection_rate: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn metrics_from(tuples: &mut dyn Iterator<Item = (Label, Verdict)>, scope: Scope) -> Metrics {
    let mut m = Metrics::default();
    for (truth, verdict) in tuples {
        if !truth.is_verified() {
            continue;
        }
        m.total += 1;
        let verdict = if verdict == Verdict::Uncertain {
            m.rejected += 1;
            match scope {
                Scope::AcceptedOnly => continue,
                Scope::All if truth == Label::Malicious => Verdict::Benign,
                Scope::All => Verdict::Malicious,
            }
        } else {
            verdict
        };
        match Outcome::of(truth, verdict) {
            Some(Outcome::TruePositive) => m.tp += 1,
            Some(Outcome::TrueNegative) => m.tn += 1,
            Some(Outcome::FalsePositive) => m.fp += 1,
            Some(Outcome::FalseNegative) => m.fn_ += 1,
            None => {}
        }
    }
    let scored = m.tp + m.tn + m.fp + m.fn_;
    m.accuracy = ratio(m.tp + m.tn, scored);
    m.precision = ratio(m.tp, m.tp + m.fp);
    m.recall = ratio(m.tp, m.tp + m.fn_);
    m.f1 = if m.precision + m.recall == 0.0 {
        0.0
    } else {
        2.0 * m.precision * m.recall / (m.precision + m.recall)
    };
    m.fpr = ratio(m.fp, m.fp + m.tn);
    m.fnr = ratio(m.fn_, m.fn_ + m.tp);
    m.rejection_rate = ratio(m.rejected, m.total);
    m
}

pub fn compute_metrics(records: &[OutcomeRecord], scope: Scope) -> Metrics {
    metrics_from(&mut records.iter().map(|r| (r.truth, r.tuple.verdict)), scope)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticRow {
    pub outcome: Outcome,
    pub count: usize,
    /// `None` when no record fell in this cell.
    pub mean_fes: Option<f64>,
    pub mean_ecs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub rows: Vec<DiagnosticRow>,
    /// Mean ECS over accepted errors minus mean ECS over accepted correct
    /// verdicts, when both groups are non-empty.
    pub ecs_gap: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean FES and ECS per confusion cell over accepted verdicts.
pub fn diagnostics_by_outcome(records: &[OutcomeRecord]) -> Diagnostics {
    let labelled: Vec<(Outcome, &VerdictTuple)> = records
        .iter()
        .filter_map(|r| Outcome::of(r.truth, r.tuple.verdict).map(|o| (o, &r.tuple)))
        .collect();
    let rows = Outcome::ALL
        .iter()
        .map(|&outcome| {
            let cell = || labelled.iter().filter(move |(o, _)| *o == outcome);
            DiagnosticRow {
                outcome,
                count: cell().count(),
                mean_fes: mean(cell().map(|(_, t)| t.fes)),
                mean_ecs: mean(cell().map(|(_, t)| t.ecs)),
            }
        })
        .collect();
    let errors = mean(labelled.iter().filter(|(o, _)| o.is_error()).map(|(_, t)| t.ecs));
    let correct = mean(labelled.iter().filter(|(o, _)| !o.is_error()).map(|(_, t)| t.ecs));
    Diagnostics {
        rows,
        ecs_gap: errors.zip(correct).map(|(e, c)| e - c),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub tau: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub rejection_rate: f64,
    pub accuracy: f64,
}

/// Re-decides every record at each `tau` (FES bounds from `base`) and
/// recomputes accepted-set metrics. Rows come back in ascending `tau`.
pub fn rejection_tradeoff(
    records: &[OutcomeRecord],
    tau_values: &[f64],
    base: &DecisionThresholds,
) -> Vec<TradeoffRow> {
    let mut taus = tau_values.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.into_iter()
        .map(|tau| {
            let th = DecisionThresholds {
                tau_stable: tau,
                ..*base
            };
            let m = metrics_from(
                &mut records
                    .iter()
                    .map(|r| (r.truth, r.tuple.redecide(&th).verdict)),
                Scope::AcceptedOnly,
            );
            TradeoffRow {
                tau,
                fpr: m.fpr,
                fnr: m.fnr,
                rejection_rate: m.rejection_rate,
                accuracy: m.accuracy,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k_values: Vec<usize>,
    pub sigma_values: Vec<f64>,
    pub n_values: Vec<usize>,
    pub t_values: Vec<f64>,
    pub delta_high_values: Vec<f64>,
    pub delta_low_values: Vec<f64>,
    pub tau_values: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            k_values: vec![5, 10, 20, 30],
            sigma_values: vec![0.5, 0.6, 0.7, 0.8],
            n_values: vec![1, 2, 5, 7, 10],
            t_values: vec![0.3, 0.5, 0.7, 0.9, 1.0],
            delta_high_values: vec![0.55, 0.60, 0.65, 0.70],
            delta_low_values: vec![0.30, 0.35, 0.40, 0.45],
            tau_values: vec![0.50, 0.70, 0.80, 0.90],
        }
    }
}

impl SweepGrid {
    pub fn singleton(point: &SweepPoint) -> Self {
        Self {
            k_values: vec![point.k],
            sigma_values: vec![point.sigma_min],
            n_values: vec![point.n_agents],
            t_values: vec![point.temperature],
            delta_high_values: vec![point.delta_high],
            delta_low_values: vec![point.delta_low],
            tau_values: vec![point.tau_stable],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lens = [
            ("k_values", self.k_values.len()),
            ("sigma_values", self.sigma_values.len()),
            ("n_values", self.n_values.len()),
            ("t_values", self.t_values.len()),
            ("delta_high_values", self.delta_high_values.len()),
            ("delta_low_values", self.delta_low_values.len()),
            ("tau_values", self.tau_values.len()),
        ];
        if let Some((name, _)) = lens.iter().find(|(_, n)| *n == 0) {
            return Err(Error::Config(format!("sweep grid `{name}` is empty")));
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.run_points().len()
            * self.delta_high_values.len()
            * self.delta_low_values.len()
            * self.tau_values.len()
    }

    /// The (k, sigma, N, T) combinations, each of which needs a pipeline run.
    pub fn run_points(&self) -> Vec<RunPoint> {
        let mut out = Vec::new();
        for &k in &self.k_values {
            for &sigma_min in &self.sigma_values {
                for &n_agents in &self.n_values {
                    for &temperature in &self.t_values {
                        out.push(RunPoint {
                            k,
                            sigma_min,
                            n_agents,
                            temperature,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunPoint {
    pub k: usize,
    pub sigma_min: f64,
    pub n_agents: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub sigma_min: f64,
    pub n_agents: usize,
    pub temperature: f64,
    pub delta_high: f64,
    pub delta_low: f64,
    pub tau_stable: f64,
}

impl SweepPoint {
    pub fn thresholds(&self) -> DecisionThresholds {
        DecisionThresholds {
            delta_high: self.delta_high,
            delta_low: self.delta_low,
            tau_stable: self.tau_stable,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// Minimize FPR + FNR among configurations whose rejection rate is at
    /// most `cap`; the rest rank after every feasible one.
    MinErrorWithRejectionCap { cap: f64 },
    MaxF1,
}

impl Default for Objective {
    fn default() -> Self {
        Objective::MinErrorWithRejectionCap { cap: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedConfig {
    pub rank: usize,
    pub point: SweepPoint,
    pub metrics: Metrics,
    /// FPR + FNR or F1, depending on the objective.
    pub objective_value: f64,
    pub feasible: bool,
}

/// Exhaustive grid evaluation.
///
/// `observe` runs the pipeline for one (k, sigma, N, T) combination and
/// returns scored records; FES/ECS thresholds are then re-applied for every
/// threshold triple without re-running it. Ranking is best objective first,
/// then lower rejection rate, then grid order.
pub fn calibrate_thresholds<F>(grid: &SweepGrid, objective: Objective, observe: F) -> Result<Vec<RankedConfig>>
where
    F: Fn(&RunPoint) -> Result<Vec<OutcomeRecord>> + Sync,
{
    grid.validate()?;
    let per_run: Vec<Vec<(SweepPoint, Metrics)>> = grid
        .run_points()
        .par_iter()
        .map(|run| {
            let records = observe(run)?;
            let mut rows = Vec::new();
            for &delta_high in &grid.delta_high_values {
                for &delta_low in &grid.delta_low_values {
                    for &tau_stable in &grid.tau_values {
                        let point = SweepPoint {
                            k: run.k,
                            sigma_min: run.sigma_min,
                            n_agents: run.n_agents,
                            temperature: run.temperature,
                            delta_high,
                            delta_low,
                            tau_stable,
                        };
                        let th = point.thresholds();
                        let m = metrics_from(
                            &mut records
                                .iter()
                                .map(|r| (r.truth, r.tuple.redecide(&th).verdict)),
                            Scope::AcceptedOnly,
                        );
                        rows.push((point, m));
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let mut scored: Vec<(usize, RankedConfig)> = per_run
        .into_iter()
        .flatten()
        .enumerate()
        .map(|(order, (point, metrics))| {
            let (objective_value, feasible) = match objective {
                Objective::MinErrorWithRejectionCap { cap } => {
                    (metrics.fpr + metrics.fnr, metrics.rejection_rate <= cap)
                }
                Objective::MaxF1 => (metrics.f1, true),
            };
            (
                order,
                RankedConfig {
                    rank: 0,
                    point,
                    metrics,
                    objective_value,
                    feasible,
                },
            )
        })
        .collect();

    let better = |a: &RankedConfig, b: &RankedConfig| match objective {
        Objective::MinErrorWithRejectionCap { .. } => a.objective_value.total_cmp(&b.objective_value),
        Objective::MaxF1 => b.objective_value.total_cmp(&a.objective_value),
    };
    scored.sort_by(|(oa, a), (ob, b)| {
        b.feasible
            .cmp(&a.feasible)
            .then_with(|| better(a, b))
            .then_with(|| a.metrics.rejection_rate.total_cmp(&b.metrics.rejection_rate))
            .then_with(|| oa.cmp(ob))
    });
    Ok(scored
        .into_iter()
        .enumerate()
        .map(|(i, (_, mut c))| {
            c.rank = i + 1;
            c
        })
        .collect())
}

pub const DEFAULT_C_MIN: f64 = 0.52;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceRow {
    pub outcome: Outcome,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    /// Mean confidence minus the 0.50 decision boundary.
    pub margin: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfidenceReport {
    /// False when no record carried a k-NN confidence.
    pub applicable: bool,
    pub c_min: f64,
    pub rows: Vec<ConfidenceRow>,
    /// Fraction of misclassified k-NN votes with confidence below `c_min`.
    pub error_flag_rate: Option<f64>,
    /// Fraction of correct k-NN votes with confidence below `c_min`.
    pub correct_flag_rate: Option<f64>,
}

/// k-NN vote confidence per outcome of the k-NN vote itself.
pub fn confidence_margin_report(records: &[OutcomeRecord], c_min: f64) -> ConfidenceReport {
    let votes: Vec<(Outcome, f64)> = records
        .iter()
        .filter_map(|r| {
            let (label, c) = r.knn?;
            Outcome::of(r.truth, label.into()).map(|o| (o, c))
        })
        .collect();
    let rows = Outcome::ALL
        .iter()
        .map(|&outcome| {
            let cs: Vec<f64> = votes.iter().filter(|(o, _)| *o == outcome).map(|(_, c)| *c).collect();
            let m = mean(cs.iter().copied());
            ConfidenceRow {
                outcome,
                count: cs.len(),
                mean_confidence: m,
                margin: m.map(|m| m - 0.5),
                min: cs.iter().copied().reduce(f64::min),
                max: cs.iter().copied().reduce(f64::max),
            }
        })
        .collect();
    let flag_rate = |errors: bool| {
        let group: Vec<f64> = votes
            .iter()
            .filter(|(o, _)| o.is_error() == errors)
            .map(|(_, c)| *c)
            .collect();
        (!group.is_empty())
            .then(|| group.iter().filter(|&&c| c < c_min).count() as f64 / group.len() as f64)
    };
    ConfidenceReport {
        applicable: !votes.is_empty(),
        c_min,
        rows,
        error_flag_rate: flag_rate(true),
        correct_flag_rate: flag_rate(false),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub stage: Stage,
    pub samples: usize,
    pub mean_s: f64,
    pub p50_s: f64,
    pub p95_s: f64,
    pub total_s: f64,
    /// Percentage of summed wall-clock time across all stages.
    pub share_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    pub total_s: f64,
}

fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Per-stage latency table; stages no record touched are omitted.
pub fn latency_report(records: &[OutcomeRecord]) -> LatencyReport {
    let mut per_stage: BTreeMap<Stage, Vec<f64>> = BTreeMap::new();
    for r in records {
        for (stage, d) in &r.stage_latencies {
            per_stage.entry(*stage).or_default().push(d.as_secs_f64());
        }
    }
    let total_s: f64 = per_stage.values().flatten().sum();
    let rows = per_stage
        .into_iter()
        .map(|(stage, mut xs)| {
            xs.sort_by(f64::total_cmp);
            let total: f64 = xs.iter().sum();
            LatencyRow {
                stage,
                samples: xs.len(),
                mean_s: total / xs.len() as f64,
                p50_s: nearest_rank(&xs, 0.50),
                p95_s: nearest_rank(&xs, 0.95),
                total_s: total,
                share_pct: if total_s > 0.0 { 100.0 * total / total_s } else { 0.0 },
            }
        })
        .collect();
    LatencyReport { rows, total_s }
}

/// Keeps reasons stable when tuples are rebuilt for a threshold sweep.
pub fn is_hard_reject(reason: Reason) -> bool {
    matches!(reason, Reason::NoEvidence | Reason::QuorumFailed)
}
