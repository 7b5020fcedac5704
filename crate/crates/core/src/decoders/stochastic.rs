use rand::Rng;
use rand_distr::Gumbel;

use super::{process_logits, rank_cmp, sort_by_logprob, DecodeResult, Expansion, StepTrace, TraceEntry};
use crate::error::{Error, Result};
use crate::models::{next_token_logprobs, LanguageModel};
use crate::rng::decode_rng;
use crate::types::{validate_distribution, CallCounters, DecodeParams, ScoredHypothesis, TokenId};

/// `ln(1 - exp(a))` for `a <= 0`.
fn log1mexp(a: f64) -> f64 {
    if a >= 0.0 {
        f64::NEG_INFINITY
    } else if a > -std::f64::consts::LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

/// Gumbel score of a child conditioned on the maximum of its siblings
/// being `sibling_max` and on that maximum equalling `parent`:
/// `-ln(exp(-parent) - exp(-sibling_max) + exp(-child))`, evaluated in
/// a form that cannot overflow. The argmax child maps to `parent` exactly.
pub fn gumbel_condition(parent: f64, child: f64, sibling_max: f64) -> f64 {
    let v = parent - child + log1mexp(child - sibling_max);
    parent - v.max(0.0) - (-v.abs()).exp().ln_1p()
}

struct Node {
    hyp: ScoredHypothesis,
    /// Cumulative log-probability under the processed, renormalized model.
    phi: f64,
    score: f64,
}

/// Draws `num_beams` distinct complete sequences without replacement,
/// by top-k search over Gumbel-perturbed log-likelihoods with
/// max-conditioning down the tree.
pub fn stochastic_beam_decode<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    params: &DecodeParams,
) -> Result<DecodeResult> {
    params.validate()?;
    let k = params.num_beams;
    let eos = model.vocab().eos();
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    let mut rng = decode_rng(params.seed);
    let mut counters = CallCounters::default();
    let mut traces: Option<Vec<StepTrace>> = params.trace.then(Vec::new);
    let mut beam = vec![Node {
        hyp: ScoredHypothesis::root(),
        phi: 0.0,
        score: 0.0,
    }];

    for step in 0..params.max_len {
        if beam.iter().all(|n| n.hyp.finished) {
            break;
        }
        let mut next = Vec::with_capacity(k * k);
        let mut expansions = Vec::new();
        for node in beam {
            if node.hyp.finished {
                next.push(node);
                continue;
            }
            let lp = next_token_logprobs(model, context, &node.hyp.seq, &mut counters)?;
            let processed = match process_logits(context, &node.hyp.seq, &lp, &params.heuristics, eos) {
                Ok(p) => validate_distribution(&p)?,
                Err(_) => continue,
            };
            let mut children: Vec<(TokenId, f64, f64)> = Vec::new();
            for (tok, &l) in processed.iter().enumerate() {
                if l.is_finite() {
                    let phi = node.phi + l;
                    children.push((tok, phi, phi + rng.sample(gumbel)));
                }
            }
            let z = children.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
            let mut conditioned: Vec<Node> = children
                .into_iter()
                .map(|(tok, phi, g)| Node {
                    hyp: node.hyp.extend(tok, lp[tok], eos, params.max_len),
                    phi,
                    score: gumbel_condition(node.score, g, z),
                })
                .collect();
            expansions.push(Expansion {
                parent_score: node.score,
                max_child_score: conditioned.iter().map(|n| n.score).fold(f64::NEG_INFINITY, f64::max),
            });
            conditioned.sort_by(|a, b| rank_cmp(a.score, &a.hyp.seq, b.score, &b.hyp.seq));
            conditioned.truncate(k);
            next.extend(conditioned);
        }
        if next.is_empty() {
            return Err(Error::EmptySupportAfterProcessing { step });
        }
        next.sort_by(|a, b| rank_cmp(a.score, &a.hyp.seq, b.score, &b.hyp.seq));
        next.truncate(k);
        if let Some(t) = traces.as_mut() {
            t.push(StepTrace {
                step,
                selected: next
                    .iter()
                    .map(|n| TraceEntry {
                        seq: n.hyp.seq.clone(),
                        logprob: n.hyp.logprob,
                        score: n.score,
                    })
                    .collect(),
                expansions,
            });
        }
        beam = next;
    }

    let mut candidates: Vec<ScoredHypothesis> = beam.into_iter().map(|n| n.hyp).collect();
    sort_by_logprob(&mut candidates);
    Ok(DecodeResult {
        best: candidates[0].clone(),
        candidates,
        step_traces: traces,
        counters,
        seed_used: params.seed,
    })
}
