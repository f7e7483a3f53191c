//! Monte-Carlo study of the scoring layer over synthetic agents alone.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{synthetic_agent, VoteSet};
use crate::error::{Error, Result};
use crate::label::Verdict;
use crate::verdict::{score, DecisionThresholds, Reason};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub p_malicious: f64,
    /// Context weight fed to FES.
    pub w: f64,
    pub reps: usize,
    /// Overrides the default agent count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_agents: Option<usize>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_malicious) || !(0.0..=1.0).contains(&self.w) {
            return Err(Error::Config("scenario p_malicious and w must lie in [0, 1]".into()));
        }
        if self.reps == 0 || self.n_agents == Some(0) {
            return Err(Error::Config("scenario reps and n_agents must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub p_malicious: f64,
    pub w: f64,
    pub n_agents: usize,
    pub reps: usize,
    pub mean_fes: f64,
    pub mean_ecs: f64,
    pub malicious: usize,
    pub benign: usize,
    pub uncertain: usize,
    pub entropy_reject: usize,
    pub gray_zone: usize,
}

fn rep_seed(seed: u64, scenario: usize, rep: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(b"dcfscan/simulate/v1");
    h.update(seed.to_le_bytes());
    h.update((scenario as u64).to_le_bytes());
    h.update((rep as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes([d[0], d[1], d[2], d[3], d[4], d[5], d[6], d[7]])
}

/// Each repetition draws one fresh ensemble of Bernoulli(`p_malicious`)
/// agents and scores it at context weight `w`.
pub fn simulate(
    scenarios: &[Scenario],
    default_agents: usize,
    th: &DecisionThresholds,
    seed: u64,
) -> Result<Vec<ScenarioReport>> {
    th.validate()?;
    scenarios
        .iter()
        .enumerate()
        .map(|(si, s)| {
            s.validate()?;
            let n = s.n_agents.unwrap_or(default_agents);
            if n == 0 {
                return Err(Error::Config("n_agents must be positive".into()));
            }
            let mut r = ScenarioReport {
                p_malicious: s.p_malicious,
                w: s.w,
                n_agents: n,
                reps: s.reps,
                mean_fes: 0.0,
                mean_ecs: 0.0,
                malicious: 0,
                benign: 0,
                uncertain: 0,
                entropy_reject: 0,
                gray_zone: 0,
            };
            let (mut fes_sum, mut ecs_sum) = (0.0, 0.0);
            for rep in 0..s.reps {
                let seed = rep_seed(seed, si, rep);
                let votes = VoteSet::from_responses((0..n).map(|j| synthetic_agent(s.p_malicious, seed, j)).collect());
                let t = score(&votes, s.w, th);
                fes_sum += t.fes;
                ecs_sum += t.ecs;
                match t.verdict {
                    Verdict::Malicious => r.malicious += 1,
                    Verdict::Benign => r.benign += 1,
                    Verdict::Uncertain => r.uncertain += 1,
                }
                match t.reason {
                    Reason::EntropyReject => r.entropy_reject += 1,
                    Reason::GrayZone => r.gray_zone += 1,
                    _ => {}
                }
            }
            r.mean_fes = fes_sum / s.reps as f64;
            r.mean_ecs = ecs_sum / s.reps as f64;
            Ok(r)
        })
        .collect()
}
