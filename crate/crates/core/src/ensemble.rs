//! Homogeneous stochastic agent ensemble.
//!
//! Every agent receives the same prompt, samples independently at a non-zero
//! temperature, and ends its answer with a `VERDICT:` line. Agreement across
//! agents is the stability signal; divergence is what the conflict score
//! measures downstream.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{FunctionRecord, RecordKey};
use crate::error::{Error, Result};
use crate::http::{self, JsonEndpoint};
use crate::kb::{KbIndex, RetrievalSet};
use crate::label::{Label, Vote};

pub const TEMPLATE_EVIDENCE: &str = "evidence-v1";
pub const TEMPLATE_ZERO_SHOT: &str = "zero-shot-v1";
pub const TRUNCATION_MARKER: &str = "\n[...truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Remote,
    #[default]
    Synthetic,
}

/// Where a synthetic agent's malicious probability comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticPolicy {
    /// Malicious share of the retrieved similarity mass (0.5 with no
    /// evidence): clean inputs get near-unanimous agents, inputs whose
    /// neighborhood mixes both labels get split agents.
    #[default]
    EvidenceCoupled,
    Fixed { p_malicious: f64 },
}

impl SyntheticPolicy {
    pub fn p_malicious(&self, evidence_share: Option<f64>) -> f64 {
        match *self {
            SyntheticPolicy::EvidenceCoupled => evidence_share.unwrap_or(0.5),
            SyntheticPolicy::Fixed { p_malicious } => p_malicious,
        }
        .clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub n_agents: usize,
    pub temperature: f64,
    pub generator: GeneratorKind,
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub prompt_template_id: String,
    /// Seeds the synthetic generator only; remote sampling is never seeded.
    pub seed: u64,
    pub per_agent_timeout_ms: u64,
    pub retries: u32,
    pub max_parallel: usize,
    /// Dotted path of the completion text in the generation response.
    pub response_field: String,
    pub prompt_budget_bytes: usize,
    pub synthetic_policy: SyntheticPolicy,
    /// Artificial per-agent latency for the synthetic generator.
    pub synthetic_delay_ms: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            n_agents: 5,
            temperature: 0.7,
            generator: GeneratorKind::Synthetic,
            endpoint_url: None,
            model_name: "local-model".into(),
            prompt_template_id: TEMPLATE_EVIDENCE.into(),
            seed: 0,
            per_agent_timeout_ms: 120_000,
            retries: 0,
            max_parallel: 5,
            response_field: "response".into(),
            prompt_budget_bytes: 16 * 1024,
            synthetic_policy: SyntheticPolicy::EvidenceCoupled,
            synthetic_delay_ms: 0,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::Config("n_agents must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        if self.generator == GeneratorKind::Remote
            && self.endpoint_url.as_deref().map_or(true, str::is_empty)
        {
            return Err(Error::Config("remote generator requires endpoint_url".into()));
        }
        if let SyntheticPolicy::Fixed { p_malicious } = self.synthetic_policy {
            if !(0.0..=1.0).contains(&p_malicious) {
                return Err(Error::Config("synthetic p_malicious outside [0, 1]".into()));
            }
        }
        template(&self.prompt_template_id)?;
        Ok(())
    }
}

/// One retrieved neighbor, resolved against the index for prompting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvidenceItem {
    pub key: RecordKey,
    pub label: Label,
    pub family: Option<String>,
    pub similarity: f64,
    pub snippet: String,
}

pub fn evidence_items(rs: &RetrievalSet, index: &KbIndex) -> Vec<EvidenceItem> {
    rs.neighbors
        .iter()
        .map(|n| {
            let e = index.entry(n.entry);
            EvidenceItem {
                key: e.key.clone(),
                label: e.label,
                family: e.family.clone(),
                similarity: n.similarity,
                snippet: e.snippet.clone(),
            }
        })
        .collect()
}

/// Malicious share of the summed evidence similarity.
pub fn evidence_share(evidence: &[EvidenceItem]) -> Option<f64> {
    let (mal, total) = evidence.iter().fold((0.0, 0.0), |(m, t), e| {
        let s = e.similarity.max(0.0);
        if e.label == Label::Malicious {
            (m + s, t + s)
        } else {
            (m, t + s)
        }
    });
    (total > 0.0).then(|| mal / total)
}

#[derive(Clone, Copy)]
enum Template {
    Evidence,
    ZeroShot,
}

fn template(id: &str) -> Result<Template> {
    match id {
        TEMPLATE_EVIDENCE => Ok(Template::Evidence),
        TEMPLATE_ZERO_SHOT => Ok(Template::ZeroShot),
        other => Err(Error::Config(format!("unknown prompt template `{other}`"))),
    }
}

fn render(record: &FunctionRecord, evidence: &[EvidenceItem], t: Template, bodies: &[Cow<'_, str>]) -> String {
    let mut out = String::new();
    match t {
        Template::Evidence => out.push_str(
            "You are a malware analyst. Decide whether the TARGET function is malicious or benign. \
             Ground your reasoning in the verified REFERENCE functions below; do not rely on \
             guesses about code you cannot see.\n\n",
        ),
        Template::ZeroShot => out.push_str(
            "You are a malware analyst. Decide whether the TARGET function is malicious or benign.\n\n",
        ),
    }
    let _ = writeln!(out, "## TARGET FUNCTION {}::{}", record.binary_id, record.function_id);
    out.push_str("### Assembly\n");
    out.push_str(&bodies[0]);
    out.push_str("\n### Pseudo-C\n");
    out.push_str(&bodies[1]);
    out.push('\n');
    if matches!(t, Template::Evidence) {
        let _ = writeln!(
            out,
            "\n## REFERENCE EVIDENCE ({} verified functions, most similar first)",
            evidence.len()
        );
        for (i, e) in evidence.iter().enumerate() {
            let _ = writeln!(
                out,
                "### Evidence {}: label={} family={} similarity={:.4} id={}",
                i + 1,
                e.label.as_str().to_uppercase(),
                e.family.as_deref().unwrap_or("-"),
                e.similarity,
                e.key
            );
            out.push_str(&bodies[2 + i]);
            out.push('\n');
        }
    }
    out.push_str(
        "\nReason step by step. Finish with a final line that is exactly \
         `VERDICT: MALICIOUS` or `VERDICT: BENIGN`.\n",
    );
    out
}

/// Splits `budget` bytes across bodies, smallest first, each capped at an
/// equal share of what is left.
fn allocate(lengths: &[usize], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| lengths[i]);
    let mut allowance = vec![0; lengths.len()];
    let mut left = budget;
    for (pos, &i) in order.iter().enumerate() {
        let share = left / (lengths.len() - pos);
        allowance[i] = lengths[i].min(share);
        left -= allowance[i];
    }
    allowance
}

fn clip(body: &str, allowance: usize) -> Cow<'_, str> {
    if body.len() <= allowance {
        return Cow::Borrowed(body);
    }
    if allowance < TRUNCATION_MARKER.len() {
        return Cow::Borrowed("");
    }
    let kept = crate::kb::truncate_utf8(body, allowance - TRUNCATION_MARKER.len());
    Cow::Owned(format!("{kept}{TRUNCATION_MARKER}"))
}

/// Renders the shared agent prompt, truncating the target streams and
/// evidence snippets so the whole prompt fits in `budget_bytes`.
pub fn build_prompt(
    record: &FunctionRecord,
    evidence: &[EvidenceItem],
    template_id: &str,
    budget_bytes: usize,
) -> Result<String> {
    let t = template(template_id)?;
    let evidence = match t {
        Template::Evidence => evidence,
        Template::ZeroShot => &[],
    };
    let mut raw: Vec<&str> = vec![&record.asm_text, &record.pseudo_text];
    raw.extend(evidence.iter().map(|e| e.snippet.as_str()));

    let empty: Vec<Cow<'_, str>> = raw.iter().map(|_| Cow::Borrowed("")).collect();
    let fixed = render(record, evidence, t, &empty).len();
    if fixed > budget_bytes {
        return Err(Error::Config(format!(
            "prompt budget of {budget_bytes} bytes cannot hold the {fixed}-byte prompt frame"
        )));
    }
    let lengths: Vec<usize> = raw.iter().map(|s| s.len()).collect();
    let allowance = allocate(&lengths, budget_bytes - fixed);
    let bodies: Vec<Cow<'_, str>> = raw.iter().zip(&allowance).map(|(s, &a)| clip(s, a)).collect();
    Ok(render(record, evidence, t, &bodies))
}

/// Extracts the vote from the last `VERDICT:` marker (case-insensitive).
/// `SUSPICIOUS` counts as malicious; anything else abstains.
pub fn parse_verdict(raw_text: &str) -> Vote {
    const MARKER: &str = "verdict:";
    let lower = raw_text.to_ascii_lowercase();
    let Some(at) = lower.rfind(MARKER) else {
        return Vote::Abstain;
    };
    let rest = &lower[at + MARKER.len()..];
    let line = rest.lines().next().unwrap_or("");
    let words: Vec<&str> = line
        .split(|c: char| !c.is_ascii_alphabetic())
        .filter(|w| !w.is_empty())
        .collect();
    let classify = |w: &str| match w {
        "malicious" | "suspicious" => Some(Vote::Malicious),
        "benign" => Some(Vote::Benign),
        _ => None,
    };
    let Some(vote) = words.first().and_then(|w| classify(w)) else {
        return Vote::Abstain;
    };
    // "VERDICT: MALICIOUS or BENIGN" names both classes
    if words[1..].iter().filter_map(|w| classify(w)).any(|v| v != vote) {
        return Vote::Abstain;
    }
    vote
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentResponse {
    pub agent_index: usize,
    pub raw_text: String,
    pub vote: Vote,
    #[serde(skip)]
    pub latency: Duration,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VoteSet {
    pub responses: Vec<AgentResponse>,
    pub counted_votes: usize,
    pub malicious_votes: usize,
    /// More than half of the agents abstained.
    pub quorum_failed: bool,
}

impl VoteSet {
    pub fn from_responses(mut responses: Vec<AgentResponse>) -> Self {
        responses.sort_by_key(|r| r.agent_index);
        let counted_votes = responses.iter().filter(|r| r.vote != Vote::Abstain).count();
        let malicious_votes = responses.iter().filter(|r| r.vote == Vote::Malicious).count();
        let abstains = responses.len() - counted_votes;
        Self {
            quorum_failed: abstains * 2 > responses.len(),
            responses,
            counted_votes,
            malicious_votes,
        }
    }

    /// Vote counts only, for callers that do not keep the response texts.
    pub fn from_counts(malicious_votes: usize, benign_votes: usize, abstains: usize) -> Self {
        let counted_votes = malicious_votes + benign_votes;
        Self {
            responses: Vec::new(),
            counted_votes,
            malicious_votes,
            quorum_failed: abstains * 2 > counted_votes + abstains,
        }
    }

    pub fn votes(&self) -> Vec<Vote> {
        self.responses.iter().map(|r| r.vote).collect()
    }

    /// p̂ over counted (non-abstaining) votes.
    pub fn p_hat(&self) -> Option<f64> {
        (self.counted_votes > 0).then(|| self.malicious_votes as f64 / self.counted_votes as f64)
    }
}

/// Per-call generation input. `seed` and `evidence_share` only matter to the
/// synthetic backend.
#[derive(Debug, Clone, Copy)]
pub struct AgentRequest<'a> {
    pub prompt: &'a str,
    pub agent_index: usize,
    pub seed: u64,
    pub evidence_share: Option<f64>,
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &AgentRequest<'_>) -> Result<String>;
}

pub fn generator_from_config(cfg: &EnsembleConfig) -> Result<Box<dyn Generator>> {
    cfg.validate()?;
    Ok(match cfg.generator {
        GeneratorKind::Synthetic => Box::new(SyntheticGenerator::from_config(cfg)),
        GeneratorKind::Remote => Box::new(RemoteGenerator::new(cfg)?),
    })
}

/// Sharpens (`T < 1`) or flattens (`T > 1`) a Bernoulli probability the way
/// softmax temperature acts on two logits. `T = 0` is greedy.
pub fn temper(p: f64, temperature: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 || p == 0.5 {
        return p.clamp(0.0, 1.0);
    }
    if temperature == 0.0 {
        return if p > 0.5 { 1.0 } else { 0.0 };
    }
    let logit = (p / (1.0 - p)).ln() / temperature;
    1.0 / (1.0 + (-logit).exp())
}

/// Offline agent: one seeded Bernoulli draw keyed by `(seed, agent_index)`,
/// rendered as text that `parse_verdict` understands.
pub fn synthetic_agent(p_malicious: f64, seed: u64, agent_index: usize) -> AgentResponse {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(agent_index as u64);
    let malicious = rng.gen::<f64>() < p_malicious;
    let (vote, word) = if malicious {
        (Vote::Malicious, "MALICIOUS")
    } else {
        (Vote::Benign, "BENIGN")
    };
    AgentResponse {
        agent_index,
        raw_text: format!(
            "Agent {agent_index} weighed the retrieved evidence (p_malicious={p_malicious:.4}).\nVERDICT: {word}"
        ),
        vote,
        latency: Duration::ZERO,
        failure: None,
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    pub policy: SyntheticPolicy,
    pub temperature: f64,
    pub delay: Duration,
}

impl SyntheticGenerator {
    pub fn from_config(cfg: &EnsembleConfig) -> Self {
        Self {
            policy: cfg.synthetic_policy,
            temperature: cfg.temperature,
            delay: Duration::from_millis(cfg.synthetic_delay_ms),
        }
    }
}

impl Generator for SyntheticGenerator {
    fn generate(&self, request: &AgentRequest<'_>) -> Result<String> {
        if !self.delay.is_zero() {
            thread::sleep(self.delay);
        }
        let p = temper(self.policy.p_malicious(request.evidence_share), self.temperature);
        Ok(synthetic_agent(p, request.seed, request.agent_index).raw_text)
    }
}

/// HTTP generation backend speaking the common local-model-server shape:
/// `{"model", "prompt", "stream": false, "options": {"temperature"}}`.
pub struct RemoteGenerator {
    endpoint: JsonEndpoint,
    model_name: String,
    temperature: f64,
    response_field: String,
}

impl RemoteGenerator {
    pub fn new(cfg: &EnsembleConfig) -> Result<Self> {
        let url = cfg
            .endpoint_url
            .clone()
            .ok_or_else(|| Error::Config("remote generator requires endpoint_url".into()))?;
        Ok(Self {
            endpoint: JsonEndpoint::new(url, Duration::from_millis(cfg.per_agent_timeout_ms), cfg.retries)?,
            model_name: cfg.model_name.clone(),
            temperature: cfg.temperature,
            response_field: cfg.response_field.clone(),
        })
    }
}

impl Generator for RemoteGenerator {
    fn generate(&self, request: &AgentRequest<'_>) -> Result<String> {
        let body = serde_json::json!({
            "model": self.model_name,
            "prompt": request.prompt,
            "stream": false,
            "options": { "temperature": self.temperature },
        });
        let response = self.endpoint.post(&body)?;
        http::lookup(&response, &self.response_field)
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "generation response has no string field `{}`",
                    self.response_field
                ))
            })
    }
}

/// Stable per-function seed for synthetic agents.
pub fn function_seed(base: u64, key: &RecordKey) -> u64 {
    let mut h = Sha256::new();
    h.update(b"dcfscan/agent-seed/v1");
    h.update(base.to_le_bytes());
    h.update((key.binary_id.len() as u64).to_le_bytes());
    h.update(key.binary_id.as_bytes());
    h.update(key.function_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

fn run_agent(generator: &dyn Generator, request: AgentRequest<'_>) -> AgentResponse {
    let started = Instant::now();
    let result = generator.generate(&request);
    let latency = started.elapsed();
    match result {
        Ok(raw_text) => {
            let vote = parse_verdict(&raw_text);
            let failure = (vote == Vote::Abstain).then(|| "no parseable verdict".to_string());
            AgentResponse {
                agent_index: request.agent_index,
                raw_text,
                vote,
                latency,
                failure,
            }
        }
        Err(e) => AgentResponse {
            agent_index: request.agent_index,
            raw_text: String::new(),
            vote: Vote::Abstain,
            latency,
            failure: Some(e.to_string()),
        },
    }
}

/// Runs `n_agents` independent generate-and-parse cycles over one prompt.
///
/// Agent failures become abstentions; they never abort the ensemble.
pub fn run_prompt(
    prompt: &str,
    seed: u64,
    evidence_share: Option<f64>,
    cfg: &EnsembleConfig,
    generator: &dyn Generator,
) -> VoteSet {
    let request = |agent_index| AgentRequest {
        prompt,
        agent_index,
        seed,
        evidence_share,
    };
    let parallel = cfg.max_parallel.max(1).min(cfg.n_agents);
    let responses: Vec<AgentResponse> = if parallel <= 1 {
        (0..cfg.n_agents).map(|j| run_agent(generator, request(j))).collect()
    } else {
        let indices: Vec<usize> = (0..cfg.n_agents).collect();
        let mut out = Vec::with_capacity(cfg.n_agents);
        for chunk in indices.chunks(parallel) {
            thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&j| s.spawn(move || run_agent(generator, request(j))))
                    .collect();
                for h in handles {
                    out.push(h.join().expect("agent thread panicked"));
                }
            });
        }
        out
    };
    VoteSet::from_responses(responses)
}

/// Builds the shared prompt for `record` and runs the ensemble over it.
pub fn run_ensemble(
    record: &FunctionRecord,
    evidence: &[EvidenceItem],
    cfg: &EnsembleConfig,
    generator: &dyn Generator,
) -> Result<VoteSet> {
    cfg.validate()?;
    let prompt = build_prompt(record, evidence, &cfg.prompt_template_id, cfg.prompt_budget_bytes)?;
    let seed = function_seed(cfg.seed, &record.key());
    Ok(run_prompt(&prompt, seed, evidence_share(evidence), cfg, generator))
}
