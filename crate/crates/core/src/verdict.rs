//! Evidence strength, evidence conflict and the tri-state decision.
//!
//! * FES = (malicious votes / counted votes) × W(R)
//! * ECS = binary Shannon entropy (base 2) of the malicious vote fraction
//!
//! The decision checks conflict first: ECS at or above `tau_stable` rejects
//! regardless of strength. Otherwise FES strictly above `delta_high` is
//! malicious, strictly below `delta_low` is benign, and the band in between
//! is left to an analyst.

use serde::{Deserialize, Serialize};

use crate::ensemble::VoteSet;
use crate::error::{Error, Result};
use crate::label::{Verdict, Vote};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionThresholds {
    pub delta_high: f64,
    pub delta_low: f64,
    pub tau_stable: f64,
}

impl Default for DecisionThresholds {
    fn default() -> Self {
        Self {
            delta_high: 0.60,
            delta_low: 0.40,
            tau_stable: 0.80,
        }
    }
}

impl DecisionThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.delta_low && self.delta_low < self.delta_high && self.delta_high <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= delta_low < delta_high <= 1, got delta_low={} delta_high={}",
                self.delta_low, self.delta_high
            )));
        }
        // tau may exceed 1 to switch entropy rejection off entirely
        if !(self.tau_stable > 0.0) {
            return Err(Error::Config(format!(
                "tau_stable must be positive, got {}",
                self.tau_stable
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reason {
    Consensus,
    EntropyReject,
    GrayZone,
    NoEvidence,
    QuorumFailed,
}

/// The auditable per-function output, including its evidence chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictTuple {
    pub verdict: Verdict,
    pub fes: f64,
    pub ecs: f64,
    pub p_hat: f64,
    pub context_w: f64,
    pub reason: Reason,
    #[serde(default)]
    pub agent_votes: Vec<Vote>,
    #[serde(default)]
    pub neighbor_ids: Vec<String>,
}

impl VerdictTuple {
    /// Uncertain with zeroed scores, for inputs that never reached a vote.
    pub fn rejected(reason: Reason, context_w: f64) -> Self {
        Self {
            verdict: Verdict::Uncertain,
            fes: 0.0,
            ecs: 0.0,
            p_hat: 0.0,
            context_w,
            reason,
            agent_votes: Vec::new(),
            neighbor_ids: Vec::new(),
        }
    }

    /// Re-applies the policy under other thresholds. Tuples rejected for
    /// missing evidence or a failed quorum stay rejected.
    pub fn redecide(&self, th: &DecisionThresholds) -> Self {
        let mut out = self.clone();
        if !matches!(self.reason, Reason::NoEvidence | Reason::QuorumFailed) {
            let (verdict, reason) = decide(self.fes, self.ecs, th);
            out.verdict = verdict;
            out.reason = reason;
        }
        out
    }
}

/// Vote fraction scaled by context weight; 0 when nobody voted.
pub fn fes(votes: &VoteSet, context_w: f64) -> f64 {
    match votes.p_hat() {
        Some(p) => p * context_w.clamp(0.0, 1.0),
        None => 0.0,
    }
}

/// Binary entropy in bits with `0 log 0 = 0`.
pub fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

pub fn ecs(votes: &VoteSet) -> Result<f64> {
    votes
        .p_hat()
        .map(binary_entropy)
        .ok_or_else(|| Error::NoEvidence("no counted votes".into()))
}

pub fn decide(fes: f64, ecs: f64, th: &DecisionThresholds) -> (Verdict, Reason) {
    if ecs >= th.tau_stable {
        (Verdict::Uncertain, Reason::EntropyReject)
    } else if fes > th.delta_high {
        (Verdict::Malicious, Reason::Consensus)
    } else if fes < th.delta_low {
        (Verdict::Benign, Reason::Consensus)
    } else {
        (Verdict::Uncertain, Reason::GrayZone)
    }
}

/// Scores a finished ensemble run and applies the decision policy.
pub fn score(votes: &VoteSet, context_w: f64, th: &DecisionThresholds) -> VerdictTuple {
    let agent_votes = votes.votes();
    if votes.quorum_failed || votes.counted_votes == 0 {
        let mut t = VerdictTuple::rejected(Reason::QuorumFailed, context_w);
        t.p_hat = votes.p_hat().unwrap_or(0.0);
        t.fes = fes(votes, context_w);
        t.ecs = ecs(votes).unwrap_or(0.0);
        t.agent_votes = agent_votes;
        return t;
    }
    let f = fes(votes, context_w);
    let e = ecs(votes).unwrap_or(0.0);
    let (verdict, reason) = decide(f, e, th);
    VerdictTuple {
        verdict,
        fes: f,
        ecs: e,
        p_hat: votes.p_hat().unwrap_or(0.0),
        context_w,
        reason,
        agent_votes,
        neighbor_ids: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryVerdict {
    pub binary_id: String,
    pub verdict: Verdict,
    pub per_function: Vec<(String, VerdictTuple)>,
    pub max_fes: f64,
    pub max_ecs: f64,
}

/// Any malicious function makes the binary malicious; otherwise any
/// uncertain function makes it uncertain; otherwise benign. A binary with no
/// scored functions is uncertain.
pub fn aggregate_binary(binary_id: &str, per_function: Vec<(String, VerdictTuple)>) -> BinaryVerdict {
    let any = |v: Verdict| per_function.iter().any(|(_, t)| t.verdict == v);
    let verdict = if per_function.is_empty() {
        Verdict::Uncertain
    } else if any(Verdict::Malicious) {
        Verdict::Malicious
    } else if any(Verdict::Uncertain) {
        Verdict::Uncertain
    } else {
        Verdict::Benign
    };
    let max_fes = per_function.iter().map(|(_, t)| t.fes).fold(0.0, f64::max);
    let max_ecs = per_function.iter().map(|(_, t)| t.ecs).fold(0.0, f64::max);
    BinaryVerdict {
        binary_id: binary_id.to_owned(),
        verdict,
        per_function,
        max_fes,
        max_ecs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn votes(mal: usize, n: usize) -> VoteSet {
        VoteSet::from_counts(mal, n - mal, 0)
    }

    fn tuple(verdict: Verdict) -> VerdictTuple {
        VerdictTuple {
            verdict,
            ..VerdictTuple::rejected(Reason::Consensus, 0.9)
        }
    }

    #[test]
    fn fes_examples() {
        assert_eq!(fes(&votes(5, 5), 1.0), 1.0);
        assert_eq!(fes(&votes(0, 5), 0.93), 0.0);
        assert!((fes(&votes(5, 5), 0.847) - 0.847).abs() < 1e-12);
        assert_eq!(fes(&VoteSet::from_counts(0, 0, 5), 0.9), 0.0);
    }

    #[test]
    fn ecs_examples() {
        assert_eq!(ecs(&votes(5, 5)).unwrap(), 0.0);
        assert_eq!(ecs(&votes(0, 5)).unwrap(), 0.0);
        assert!((ecs(&votes(3, 5)).unwrap() - 0.970_950_594).abs() < 1e-6);
        assert_eq!(ecs(&votes(1, 2)).unwrap(), 1.0);
        assert!(matches!(ecs(&VoteSet::from_counts(0, 0, 3)), Err(Error::NoEvidence(_))));
    }

    #[test]
    fn decide_examples() {
        let th = DecisionThresholds::default();
        assert_eq!(decide(0.87, 0.12, &th), (Verdict::Malicious, Reason::Consensus));
        assert_eq!(decide(0.14, 0.14, &th), (Verdict::Benign, Reason::Consensus));
        assert_eq!(decide(0.87, 0.85, &th), (Verdict::Uncertain, Reason::EntropyReject));
        assert_eq!(decide(0.50, 0.10, &th), (Verdict::Uncertain, Reason::GrayZone));
        // boundaries
        assert_eq!(decide(0.60, 0.0, &th).1, Reason::GrayZone);
        assert_eq!(decide(0.40, 0.0, &th).1, Reason::GrayZone);
        assert_eq!(decide(0.99, 0.80, &th).1, Reason::EntropyReject);
    }

    #[test]
    fn thresholds_validation() {
        assert!(DecisionThresholds::default().validate().is_ok());
        let bad = DecisionThresholds {
            delta_low: 0.7,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn unanimous_with_adequate_context_is_malicious() {
        let t = score(&votes(5, 5), 0.7, &DecisionThresholds::default());
        assert_eq!((t.verdict, t.ecs), (Verdict::Malicious, 0.0));
        assert!((t.fes - 0.7).abs() < 1e-12);
    }

    #[test]
    fn quorum_failure_forces_uncertain() {
        let v = VoteSet::from_counts(2, 0, 3);
        let t = score(&v, 0.95, &DecisionThresholds::default());
        assert_eq!((t.verdict, t.reason), (Verdict::Uncertain, Reason::QuorumFailed));
        assert_eq!(t.redecide(&DecisionThresholds::default()).reason, Reason::QuorumFailed);
    }

    #[test]
    fn aggregation_examples() {
        let b = |vs: &[Verdict]| {
            aggregate_binary(
                "bin",
                vs.iter().enumerate().map(|(i, v)| (format!("f{i}"), tuple(*v))).collect(),
            )
            .verdict
        };
        assert_eq!(b(&[Verdict::Benign, Verdict::Benign]), Verdict::Benign);
        assert_eq!(
            b(&[Verdict::Benign, Verdict::Malicious, Verdict::Uncertain]),
            Verdict::Malicious
        );
        assert_eq!(b(&[Verdict::Benign, Verdict::Uncertain]), Verdict::Uncertain);
        assert_eq!(b(&[]), Verdict::Uncertain);
    }

    #[test]
    fn tuple_json_field_names() {
        let json = serde_json::to_value(tuple(Verdict::Benign)).unwrap();
        let mut keys: Vec<_> = json.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            ["agent_votes", "context_w", "ecs", "fes", "neighbor_ids", "p_hat", "reason", "verdict"]
        );
    }

    proptest! {
        #[test]
        fn ecs_symmetric(n in 1usize..30, m in 0usize..30) {
            prop_assume!(m <= n);
            let a = ecs(&votes(m, n)).unwrap();
            let b = ecs(&votes(n - m, n)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn fes_monotone_and_bounded(n in 1usize..20, m in 0usize..20, w in 0.0f64..=1.0, w2 in 0.0f64..=1.0) {
            prop_assume!(m < n);
            let lo = fes(&votes(m, n), w);
            let hi = fes(&votes(m + 1, n), w);
            prop_assert!(hi >= lo);
            prop_assert!(hi <= w + 1e-12);
            let (wa, wb) = if w <= w2 { (w, w2) } else { (w2, w) };
            prop_assert!(fes(&votes(m, n), wb) >= fes(&votes(m, n), wa));
        }

        #[test]
        fn raising_tau_never_rejects_more(f in 0.0f64..=1.0, e in 0.0f64..=1.0, t1 in 0.05f64..=1.0, t2 in 0.05f64..=1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let base = DecisionThresholds::default();
            let at_lo = decide(f, e, &DecisionThresholds { tau_stable: lo, ..base });
            let at_hi = decide(f, e, &DecisionThresholds { tau_stable: hi, ..base });
            if at_lo.0 != Verdict::Uncertain {
                prop_assert_eq!(at_lo, at_hi);
            }
            if at_hi.1 == Reason::EntropyReject {
                prop_assert_eq!(at_lo.1, Reason::EntropyReject);
            }
        }

        #[test]
        fn aggregation_permutation_invariant(vs in prop::collection::vec(0u8..3, 1..10), rot in 0usize..10) {
            let mk = |v: u8| tuple([Verdict::Malicious, Verdict::Benign, Verdict::Uncertain][v as usize]);
            let list: Vec<_> = vs.iter().enumerate().map(|(i, v)| (format!("f{i}"), mk(*v))).collect();
            let mut perm = list.clone();
            let n = perm.len();
            perm.rotate_left(rot % n);
            perm.reverse();
            prop_assert_eq!(aggregate_binary("b", list).verdict, aggregate_binary("b", perm).verdict);
        }
    }
}
