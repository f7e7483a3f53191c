//! Function-record ingestion and Decision-Critical Function (DCF) selection.
//!
//! Lifters export one JSON object per function, one object per line. Each
//! record carries the normalized assembly listing, the decompiled pseudo-C,
//! and enough control-flow metadata to resolve a cyclomatic complexity.
//! Filtering keeps only functions that are large and branchy enough to carry
//! discriminative logic; sampling then keeps the `m` most complex per binary.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

/// One lifted function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionRecord {
    pub binary_id: String,
    pub function_id: String,
    #[serde(default)]
    pub asm_text: String,
    #[serde(default)]
    pub pseudo_text: String,
    pub instr_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cyclomatic_complexity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfg_nodes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfg_edges: Option<u32>,
    #[serde(default)]
    pub label: Label,
}

const KNOWN_FIELDS: &[&str] = &[
    "binary_id",
    "function_id",
    "asm_text",
    "pseudo_text",
    "instr_count",
    "cyclomatic_complexity",
    "cfg_nodes",
    "cfg_edges",
    "label",
];

impl FunctionRecord {
    /// Lifter-supplied complexity wins; otherwise it is derived from the CFG
    /// counts of a single connected function graph.
    pub fn complexity(&self) -> Result<u32> {
        if let Some(cc) = self.cyclomatic_complexity {
            return Ok(cc);
        }
        match (self.cfg_nodes, self.cfg_edges) {
            (Some(nodes), Some(edges)) => cyclomatic_complexity(nodes, edges, 1),
            _ => Err(Error::Data(format!(
                "{}: no cyclomatic_complexity and incomplete cfg counts",
                self.key()
            ))),
        }
    }

    pub fn key(&self) -> RecordKey {
        RecordKey {
            binary_id: self.binary_id.clone(),
            function_id: self.function_id.clone(),
        }
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.binary_id.is_empty() {
            return Err("binary_id is empty".into());
        }
        if self.function_id.is_empty() {
            return Err("function_id is empty".into());
        }
        if self.asm_text.is_empty() && self.pseudo_text.is_empty() {
            return Err("both asm_text and pseudo_text are empty".into());
        }
        match self.cyclomatic_complexity {
            Some(0) => return Err("cyclomatic_complexity must be positive".into()),
            Some(_) => {}
            None => {
                if self.cfg_nodes.is_none() || self.cfg_edges.is_none() {
                    return Err(
                        "cyclomatic_complexity absent and cfg_nodes/cfg_edges incomplete".into(),
                    );
                }
                if self.cfg_nodes == Some(0) {
                    return Err("cfg_nodes must be at least 1".into());
                }
            }
        }
        Ok(())
    }
}

/// `(binary_id, function_id)` pair identifying a record within a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordKey {
    pub binary_id: String,
    pub function_id: String,
}

impl fmt::Display for RecordKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}::{}", self.binary_id, self.function_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineError {
    /// 1-based line number in the input stream.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LineWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParseReport {
    pub records: Vec<FunctionRecord>,
    pub errors: Vec<LineError>,
    pub warnings: Vec<LineWarning>,
}

/// Parses a JSONL stream of function records.
///
/// Blank lines are skipped. Malformed or invariant-violating lines and
/// duplicate `(binary_id, function_id)` pairs end up in `errors`; unknown
/// fields only produce a warning.
pub fn parse_function_records<R: BufRead>(reader: R) -> Result<ParseReport> {
    let mut report = ParseReport::default();
    let mut seen: HashSet<RecordKey> = HashSet::new();

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Data(format!("line {line_no}: read failed: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }

        let value: serde_json::Value = match serde_json::from_str(trimmed) {
            Ok(v) => v,
            Err(e) => {
                report.errors.push(LineError {
                    line: line_no,
                    reason: format!("malformed JSON: {e}"),
                });
                continue;
            }
        };
        if let Some(obj) = value.as_object() {
            for field in obj.keys().filter(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
                tracing::warn!(line = line_no, field = %field, "ignoring unknown field");
                report.warnings.push(LineWarning {
                    line: line_no,
                    message: format!("unknown field `{field}` ignored"),
                });
            }
        }
        let record: FunctionRecord = match serde_json::from_value(value) {
            Ok(r) => r,
            Err(e) => {
                report.errors.push(LineError {
                    line: line_no,
                    reason: format!("invalid record: {e}"),
                });
                continue;
            }
        };
        if let Err(reason) = record.validate() {
            report.errors.push(LineError {
                line: line_no,
                reason,
            });
            continue;
        }
        if !seen.insert(record.key()) {
            report.errors.push(LineError {
                line: line_no,
                reason: format!("duplicate record {}", record.key()),
            });
            continue;
        }
        report.records.push(record);
    }
    Ok(report)
}

/// McCabe complexity `E - N + 2P`, floored at 1.
pub fn cyclomatic_complexity(nodes: u32, edges: u32, components: u32) -> Result<u32> {
    if nodes == 0 {
        return Err(Error::InvalidGraph("graph has no nodes".into()));
    }
    if components == 0 {
        return Err(Error::InvalidGraph("graph has no components".into()));
    }
    let m = i64::from(edges) - i64::from(nodes) + 2 * i64::from(components);
    Ok(m.max(1) as u32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DcfFilterConfig {
    pub min_instr: u64,
    pub min_cc: u32,
    pub top_m: usize,
}

impl Default for DcfFilterConfig {
    fn default() -> Self {
        Self {
            min_instr: 10,
            min_cc: 5,
            top_m: 5,
        }
    }
}

impl DcfFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_instr == 0 || self.min_cc == 0 || self.top_m == 0 {
            return Err(Error::Config(
                "DCF filter thresholds (min_instr, min_cc, top_m) must all be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn admits(&self, instr_count: u64, cc: u32) -> bool {
        instr_count >= self.min_instr && cc >= self.min_cc
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExclusionReason {
    BelowInstructionFloor { instr_count: u64, min_instr: u64 },
    BelowComplexityFloor { cc: u32, min_cc: u32 },
    UnresolvableComplexity { detail: String },
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExclusionReason::BelowInstructionFloor {
                instr_count,
                min_instr,
            } => write!(f, "instr_count {instr_count} < {min_instr}"),
            ExclusionReason::BelowComplexityFloor { cc, min_cc } => {
                write!(f, "cyclomatic complexity {cc} < {min_cc}")
            }
            ExclusionReason::UnresolvableComplexity { detail } => {
                write!(f, "unresolvable complexity: {detail}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Exclusion {
    pub key: RecordKey,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub retained: Vec<FunctionRecord>,
    pub excluded: Vec<Exclusion>,
}

/// Keeps records with `instr_count >= min_instr` and `cc >= min_cc`, in input
/// order. Everything else is reported with the first failing reason.
pub fn filter_dcfs(records: &[FunctionRecord], cfg: &DcfFilterConfig) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for record in records {
        let cc = match record.complexity() {
            Ok(cc) => cc,
            Err(e) => {
                out.excluded.push(Exclusion {
                    key: record.key(),
                    reason: ExclusionReason::UnresolvableComplexity {
                        detail: e.to_string(),
                    },
                });
                continue;
            }
        };
        if record.instr_count < cfg.min_instr {
            out.excluded.push(Exclusion {
                key: record.key(),
                reason: ExclusionReason::BelowInstructionFloor {
                    instr_count: record.instr_count,
                    min_instr: cfg.min_instr,
                },
            });
        } else if cc < cfg.min_cc {
            out.excluded.push(Exclusion {
                key: record.key(),
                reason: ExclusionReason::BelowComplexityFloor {
                    cc,
                    min_cc: cfg.min_cc,
                },
            });
        } else {
            out.retained.push(record.clone());
        }
    }
    out
}

fn rank(a: &(u32, &FunctionRecord), b: &(u32, &FunctionRecord)) -> Ordering {
    b.0.cmp(&a.0)
        .then_with(|| b.1.instr_count.cmp(&a.1.instr_count))
        .then_with(|| a.1.function_id.cmp(&b.1.function_id))
}

/// Keeps the `m` most complex records of every binary.
///
/// Ranking is by complexity descending, then `instr_count` descending, then
/// `function_id` ascending. Binaries appear in order of first occurrence.
pub fn select_top_m(records: &[FunctionRecord], m: usize) -> Result<Vec<FunctionRecord>> {
    if m == 0 {
        return Err(Error::Config("top-M sample size must be positive".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<(u32, &FunctionRecord)>> = HashMap::new();
    for record in records {
        let cc = record.complexity()?;
        let bucket = groups.entry(record.binary_id.as_str()).or_insert_with(|| {
            order.push(record.binary_id.as_str());
            Vec::new()
        });
        bucket.push((cc, record));
    }

    let mut out = Vec::with_capacity(records.len().min(order.len() * m));
    for binary in order {
        let mut bucket = groups.remove(binary).unwrap_or_default();
        bucket.sort_by(rank);
        out.extend(bucket.into_iter().take(m).map(|(_, r)| r.clone()));
    }
    Ok(out)
}
