//! Likelihood-based decoding: greedy, beam, sampling, stochastic beams,
//! and beam search under heuristics or output constraints.

mod beam;
mod constraint;
mod greedy;
mod processors;
mod sample;
mod stochastic;

pub use beam::{beam_decode, constrained_beam_decode};
pub use constraint::{Constraint, ConstraintSpec, PrefixTrie};
pub use greedy::greedy_decode;
pub use processors::{process_logits, LogitsProcessorSpec};
pub use sample::{sample_decode, sampling_support, SamplerParams};
pub use stochastic::{gumbel_condition, stochastic_beam_decode};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::types::{CallCounters, ScoredHypothesis, Sequence, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub best: ScoredHypothesis,
    /// Final pool, sorted by log-likelihood (descending).
    pub candidates: Vec<ScoredHypothesis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_traces: Option<Vec<StepTrace>>,
    pub counters: CallCounters,
    pub seed_used: u64,
}

/// Snapshot of what a decoder kept after one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub selected: Vec<TraceEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expansions: Vec<Expansion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub seq: Sequence,
    pub logprob: f64,
    /// The decoder's selection score (log-likelihood, VGBS score, perturbed score, ...).
    pub score: f64,
}

/// Parent score and the maximum conditioned child score of one
/// stochastic-beam expansion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Expansion {
    pub parent_score: f64,
    pub max_child_score: f64,
}

/// Higher score first; ties go to the lexicographically smaller token
/// sequence (lower ids, then shorter).
pub(crate) fn rank_cmp(a_score: f64, a_seq: &[TokenId], b_score: f64, b_seq: &[TokenId]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_seq.cmp(b_seq))
}

pub(crate) fn sort_by_logprob(hyps: &mut [ScoredHypothesis]) {
    hyps.sort_by(|a, b| rank_cmp(a.logprob, &a.seq, b.logprob, &b.seq));
}

/// The `k` best finite entries of `scores`, ties broken by lower id.
pub(crate) fn top_tokens(scores: &[f64], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..scores.len()).filter(|&i| scores[i] > f64::NEG_INFINITY).collect();
    ids.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

pub(crate) fn trace_of(step: usize, hyps: &[ScoredHypothesis]) -> StepTrace {
    StepTrace {
        step,
        selected: hyps
            .iter()
            .map(|h| TraceEntry {
                seq: h.seq.clone(),
                logprob: h.logprob,
                score: h.logprob,
            })
            .collect(),
        expansions: Vec::new(),
    }
}
