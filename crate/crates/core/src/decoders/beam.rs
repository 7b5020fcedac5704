use super::{process_logits, rank_cmp, sort_by_logprob, top_tokens, trace_of, Constraint, DecodeResult};
use crate::error::{Error, Result};
use crate::models::{next_token_logprobs, LanguageModel};
use crate::types::{CallCounters, DecodeParams, ScoredHypothesis, TokenId};

/// Beam search over cumulative log-likelihood.
///
/// Each live beam proposes its `B` best tokens; the global best `B`
/// candidates survive. Finished candidates move to a completed pool. The
/// search stops once `B` completed hypotheses exist and no live beam can
/// still beat the worst of them (increments are never positive).
pub fn beam_decode<M: LanguageModel + ?Sized>(model: &M, context: &[TokenId], params: &DecodeParams) -> Result<DecodeResult> {
    beam_search(model, context, params, None)
}

/// [`beam_decode`] with every step's support intersected with the tokens
/// the constraint allows. Only constraint-valid hypotheses are returned.
pub fn constrained_beam_decode<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    params: &DecodeParams,
    constraint: &dyn Constraint,
) -> Result<DecodeResult> {
    beam_search(model, context, params, Some(constraint))
}

fn beam_search<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    params: &DecodeParams,
    constraint: Option<&dyn Constraint>,
) -> Result<DecodeResult> {
    params.validate()?;
    let width = params.num_beams;
    let eos = model.vocab().eos();
    let mut counters = CallCounters::default();
    let mut traces = params.trace.then(Vec::new);
    let mut live = vec![ScoredHypothesis::root()];
    let mut completed: Vec<ScoredHypothesis> = Vec::new();
    let mut processing_error = None;

    for step in 0..params.max_len {
        if live.is_empty() {
            break;
        }
        let mut candidates = Vec::with_capacity(live.len() * width);
        for hyp in &live {
            let lp = next_token_logprobs(model, context, &hyp.seq, &mut counters)?;
            let mut processed = match process_logits(context, &hyp.seq, &lp, &params.heuristics, eos) {
                Ok(p) => p,
                Err(e) => {
                    processing_error = Some(e);
                    continue;
                }
            };
            if let Some(c) = constraint {
                let allowed = c.allowed(&hyp.seq);
                for (tok, l) in processed.iter_mut().enumerate() {
                    if !allowed.contains(&tok) {
                        *l = f64::NEG_INFINITY;
                    }
                }
            }
            for tok in top_tokens(&processed, width) {
                candidates.push(hyp.extend(tok, lp[tok], eos, params.max_len));
            }
        }
        if candidates.is_empty() {
            break;
        }
        sort_by_logprob(&mut candidates);
        candidates.truncate(width);
        if let Some(t) = traces.as_mut() {
            t.push(trace_of(step, &candidates));
        }
        live.clear();
        for c in candidates {
            if !c.finished {
                live.push(c);
            } else if constraint.is_none_or(|k| k.accepts(&c.seq)) {
                completed.push(c);
            }
        }
        if completed.len() >= width {
            sort_by_logprob(&mut completed);
            let worst_kept = completed[width - 1].logprob;
            let best_live = live.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
            if best_live <= worst_kept {
                break;
            }
        }
    }

    if completed.is_empty() {
        return Err(match (constraint, processing_error) {
            (Some(_), _) => Error::ConstraintDeadEnd,
            (None, Some(e)) => e,
            (None, None) => Error::EmptySupport,
        });
    }
    let normalize = params.length_normalize_final;
    completed.sort_by(|a, b| rank_cmp(a.final_score(normalize), &a.seq, b.final_score(normalize), &b.seq));
    completed.truncate(width);
    let best = completed[0].clone();
    sort_by_logprob(&mut completed);
    Ok(DecodeResult {
        best,
        candidates: completed,
        step_traces: traces,
        counters,
        seed_used: params.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::{greedy_decode, ConstraintSpec, PrefixTrie};
    use crate::models::fixtures::{figure_one, two_level};
    use crate::models::{enumerate_sequences, sequence_logprob, TabularLm, TabularRow};
    use crate::types::Vocabulary;

    fn params(max_len: usize, b: usize) -> DecodeParams {
        DecodeParams {
            max_len,
            num_beams: b,
            ..Default::default()
        }
    }

    #[test]
    fn beam_two_finds_global_argmax() {
        let r = beam_decode(&figure_one(), &[], &params(2, 2)).unwrap();
        assert_eq!(r.best.seq.0, vec![1, 2]);
        assert!((r.best.logprob.exp() - 0.405).abs() < 1e-12);
        assert!(r.counters.lm_calls <= 2 * 2);
    }

    #[test]
    fn beam_one_matches_greedy() {
        for lm in [figure_one(), two_level()] {
            let g = greedy_decode(&lm, &[], &params(4, 1)).unwrap();
            let b = beam_decode(&lm, &[], &params(4, 1)).unwrap();
            assert_eq!(g.best, b.best);
            assert_eq!(g.counters, b.counters);
        }
    }

    #[test]
    fn wide_beam_equals_enumeration() {
        let lm = figure_one();
        let all = enumerate_sequences(&lm, &[], 2).unwrap();
        let r = beam_decode(&lm, &[], &params(2, all.len())).unwrap();
        assert_eq!(r.candidates.len(), all.len());
        let best = all.iter().max_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap();
        assert_eq!(r.best.seq, best.0);
    }

    #[test]
    fn candidates_are_sorted_and_rescorable() {
        let lm = figure_one();
        let r = beam_decode(&lm, &[], &params(2, 3)).unwrap();
        assert!(r.candidates.windows(2).all(|w| w[0].logprob >= w[1].logprob));
        for h in &r.candidates {
            let mut c = CallCounters::default();
            let lp = sequence_logprob(&lm, &[], &h.seq, &mut c).unwrap();
            assert!((lp - h.logprob).abs() < 1e-9);
        }
    }

    fn prefers_aa() -> TabularLm {
        let vocab = Vocabulary::with_eos_token(vec!["a".into(), "b".into(), "</s>".into()], "</s>").unwrap();
        TabularLm::new(
            vocab,
            vec![
                TabularRow::new(vec![], vec![], vec![0.7, 0.2, 0.1]),
                TabularRow::new(vec![], vec![0], vec![0.8, 0.15, 0.05]),
                TabularRow::new(vec![], vec![1], vec![0.6, 0.3, 0.1]),
                TabularRow::new(vec![], vec![0, 1], vec![0.3, 0.3, 0.4]),
                TabularRow::new(vec![], vec![1, 0], vec![0.2, 0.2, 0.6]),
            ],
            Some(vec![0.8, 0.1, 0.1]),
        )
        .unwrap()
    }

    #[test]
    fn trie_constraint_picks_likelier_member() {
        let lm = prefers_aa();
        let trie = PrefixTrie::new([vec![0, 1, 2], vec![1, 0, 2]], 2).unwrap();
        let r = constrained_beam_decode(&lm, &[], &params(4, 2), &trie).unwrap();
        let score = |s: &[usize]| sequence_logprob(&lm, &[], s, &mut CallCounters::default()).unwrap();
        // a b </s>: .7*.15*.4 = .042; b a </s>: .2*.6*.6 = .072
        assert!((score(&[0, 1, 2]).exp() - 0.042).abs() < 1e-12);
        assert!((score(&[1, 0, 2]).exp() - 0.072).abs() < 1e-12);
        assert_eq!(r.best.seq.0, vec![1, 0, 2]);
        assert!(r.candidates.iter().all(|h| trie.accepts(&h.seq)));
    }

    #[test]
    fn single_member_trie_is_forced() {
        let lm = prefers_aa();
        let trie = PrefixTrie::new([vec![1, 1, 1, 2]], 2).unwrap();
        let r = constrained_beam_decode(&lm, &[], &params(4, 3), &trie).unwrap();
        assert_eq!(r.best.seq.0, vec![1, 1, 1, 2]);
    }

    #[test]
    fn full_vocabulary_predicate_is_identity() {
        let lm = prefers_aa();
        let all = ConstraintSpec::predicate(|_| vec![0, 1, 2]);
        let p = params(4, 3);
        let a = constrained_beam_decode(&lm, &[], &p, &all).unwrap();
        let b = beam_decode(&lm, &[], &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predicate_dead_end_is_reported() {
        let lm = prefers_aa();
        let dead = ConstraintSpec::predicate(|prefix| if prefix.is_empty() { vec![0] } else { vec![] });
        assert!(matches!(
            constrained_beam_decode(&lm, &[], &params(4, 2), &dead),
            Err(Error::ConstraintDeadEnd)
        ));
    }

    #[test]
    fn length_normalization_changes_final_ranking() {
        // </s> has p = .55 (ln/len = -0.598); a a a has p = .324 (ln/len = -0.376).
        let vocab = Vocabulary::with_eos_token(vec!["a".into(), "b".into(), "</s>".into()], "</s>").unwrap();
        let lm = TabularLm::new(
            vocab,
            vec![TabularRow::new(vec![], vec![], vec![0.4, 0.05, 0.55])],
            Some(vec![0.9, 0.0, 0.1]),
        )
        .unwrap();
        let mut p = params(3, 3);
        let raw = beam_decode(&lm, &[], &p).unwrap();
        assert_eq!(raw.best.seq.0, vec![2]);
        p.length_normalize_final = true;
        let norm = beam_decode(&lm, &[], &p).unwrap();
        assert_eq!(norm.best.seq.0, vec![0, 0, 0]);
    }
}
