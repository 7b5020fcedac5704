use serde::{Deserialize, Serialize};

use crate::decoders::{process_logits, rank_cmp, sort_by_logprob, top_tokens, DecodeResult, StepTrace, TraceEntry};
use crate::error::{Error, Result};
use crate::models::{next_token_logprobs, LanguageModel};
use crate::types::{CallCounters, DecodeParams, ScoredHypothesis, TokenId};
use crate::value::{value_estimate, ValueModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VgbsParams {
    pub decode: DecodeParams,
    /// Tokens per beam pre-selected by likelihood before value scoring.
    pub candidates_per_beam: usize,
    /// Weight on length-averaged log-likelihood; `1 - alpha` goes to the value.
    pub alpha: f64,
}

impl Default for VgbsParams {
    fn default() -> Self {
        Self {
            decode: DecodeParams::default(),
            candidates_per_beam: 10,
            alpha: 0.5,
        }
    }
}

impl VgbsParams {
    pub fn validate(&self) -> Result<()> {
        self.decode.validate()?;
        if self.candidates_per_beam < self.decode.num_beams {
            return Err(Error::InvalidParameter(format!(
                "candidates_per_beam ({}) must be at least num_beams ({})",
                self.candidates_per_beam, self.decode.num_beams
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

struct Scored {
    hyp: ScoredHypothesis,
    score: f64,
}

/// Beam search over `alpha / i * logprob + (1 - alpha) * value`, where `i`
/// is the generated length including the candidate token.
///
/// Finished hypotheses keep the score they had when they ended. The search
/// stops once `B` hypotheses have finished, or at `max_len`.
pub fn vgbs_decode<M, V>(model: &M, vm: &V, context: &[TokenId], params: &VgbsParams) -> Result<DecodeResult>
where
    M: LanguageModel + ?Sized,
    V: ValueModel + ?Sized,
{
    params.validate()?;
    let d = &params.decode;
    let width = d.num_beams;
    let eos = model.vocab().eos();
    let mut counters = CallCounters::default();
    let mut traces: Option<Vec<StepTrace>> = d.trace.then(Vec::new);
    let mut live = vec![ScoredHypothesis::root()];
    let mut completed: Vec<Scored> = Vec::new();
    let mut processing_error = None;

    for step in 0..d.max_len {
        if live.is_empty() || completed.len() >= width {
            break;
        }
        let mut candidates = Vec::new();
        for hyp in &live {
            let lp = next_token_logprobs(model, context, &hyp.seq, &mut counters)?;
            let processed = match process_logits(context, &hyp.seq, &lp, &d.heuristics, eos) {
                Ok(p) => p,
                Err(e) => {
                    processing_error = Some(e);
                    continue;
                }
            };
            for tok in top_tokens(&processed, params.candidates_per_beam) {
                let child = hyp.extend(tok, lp[tok], eos, d.max_len);
                let v = value_estimate(vm, context, &child.seq, &mut counters);
                let score = params.alpha / child.len() as f64 * child.logprob + (1.0 - params.alpha) * v;
                candidates.push(Scored { hyp: child, score });
            }
        }
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| rank_cmp(a.score, &a.hyp.seq, b.score, &b.hyp.seq));
        candidates.truncate(width);
        if let Some(t) = traces.as_mut() {
            t.push(StepTrace {
                step,
                selected: candidates
                    .iter()
                    .map(|c| TraceEntry {
                        seq: c.hyp.seq.clone(),
                        logprob: c.hyp.logprob,
                        score: c.score,
                    })
                    .collect(),
                expansions: Vec::new(),
            });
        }
        live.clear();
        for c in candidates {
            if c.hyp.finished {
                completed.push(c);
            } else {
                live.push(c.hyp);
            }
        }
    }

    if completed.is_empty() {
        return Err(processing_error.unwrap_or(Error::EmptySupport));
    }
    completed.sort_by(|a, b| rank_cmp(a.score, &a.hyp.seq, b.score, &b.hyp.seq));
    completed.truncate(width);
    let best = completed[0].hyp.clone();
    let mut candidates: Vec<ScoredHypothesis> = completed.into_iter().map(|c| c.hyp).collect();
    sort_by_logprob(&mut candidates);
    Ok(DecodeResult {
        best,
        candidates,
        step_traces: traces,
        counters,
        seed_used: d.seed,
    })
}
