use super::{process_logits, top_tokens, trace_of, DecodeResult};
use crate::error::Result;
use crate::models::{next_token_logprobs, LanguageModel};
use crate::types::{CallCounters, DecodeParams, ScoredHypothesis, TokenId};

/// Picks the most likely processed token at every step (ties: lowest id).
/// `params.num_beams` is ignored.
pub fn greedy_decode<M: LanguageModel + ?Sized>(model: &M, context: &[TokenId], params: &DecodeParams) -> Result<DecodeResult> {
    params.validate()?;
    let eos = model.vocab().eos();
    let mut counters = CallCounters::default();
    let mut traces = params.trace.then(Vec::new);
    let mut hyp = ScoredHypothesis::root();
    while !hyp.finished {
        let lp = next_token_logprobs(model, context, &hyp.seq, &mut counters)?;
        let processed = process_logits(context, &hyp.seq, &lp, &params.heuristics, eos)?;
        let tok = top_tokens(&processed, 1)[0];
        hyp = hyp.extend(tok, lp[tok], eos, params.max_len);
        if let Some(t) = traces.as_mut() {
            t.push(trace_of(hyp.len() - 1, std::slice::from_ref(&hyp)));
        }
    }
    Ok(DecodeResult {
        candidates: vec![hyp.clone()],
        best: hyp,
        step_traces: traces,
        counters,
        seed_used: params.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::LogitsProcessorSpec;
    use crate::error::Error;
    use crate::models::fixtures::{figure_one, two_level};
    use crate::models::{TabularLm, TabularRow};
    use crate::types::Vocabulary;

    fn params(max_len: usize) -> DecodeParams {
        DecodeParams {
            max_len,
            ..Default::default()
        }
    }

    #[test]
    fn two_level_argmax_path() {
        let r = greedy_decode(&two_level(), &[], &params(5)).unwrap();
        assert_eq!(r.best.seq.0, vec![0, 2]);
        assert!((r.best.logprob + 0.8675).abs() < 1e-4);
        assert_eq!(r.counters.lm_calls, 2);
    }

    #[test]
    fn greedy_misses_global_argmax() {
        let r = greedy_decode(&figure_one(), &[], &params(2)).unwrap();
        assert_eq!(r.best.seq.0, vec![0, 2]);
        assert!((r.best.logprob.exp() - 0.40).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let vocab = Vocabulary::with_eos_token(vec!["a".into(), "b".into(), "</s>".into()], "</s>").unwrap();
        let lm = TabularLm::new(
            vocab,
            vec![TabularRow::new(vec![], vec![], vec![1.0 / 3.0; 3])],
            Some(vec![0.0, 0.0, 1.0]),
        )
        .unwrap();
        let r = greedy_decode(&lm, &[], &params(3)).unwrap();
        assert_eq!(r.best.seq.0, vec![0, 2]);
    }

    #[test]
    fn min_length_changes_the_path() {
        // EOS has .9 after any first token; min_length 3 forces two more tokens.
        let vocab = Vocabulary::with_eos_token(vec!["a".into(), "b".into(), "</s>".into()], "</s>").unwrap();
        let lm = TabularLm::new(
            vocab,
            vec![TabularRow::new(vec![], vec![], vec![0.7, 0.2, 0.1])],
            Some(vec![0.03, 0.07, 0.9]),
        )
        .unwrap();
        let plain = greedy_decode(&lm, &[], &params(5)).unwrap();
        assert_eq!(plain.best.seq.0, vec![0, 2]);
        let mut p = params(5);
        p.heuristics = vec![LogitsProcessorSpec::MinLength { min_len: 3 }];
        let forced = greedy_decode(&lm, &[], &p).unwrap();
        assert_eq!(forced.best.seq.0, vec![0, 1, 1, 2]);
        assert_eq!(forced.counters.lm_calls, 4);
    }

    #[test]
    fn banning_everything_errors() {
        let mut p = params(3);
        p.heuristics = vec![LogitsProcessorSpec::BanTokens { tokens: vec![0, 1, 2] }];
        assert!(matches!(
            greedy_decode(&two_level(), &[], &p),
            Err(Error::EmptySupportAfterProcessing { .. })
        ));
    }

    #[test]
    fn stops_at_max_len() {
        let r = greedy_decode(&figure_one(), &[], &params(1)).unwrap();
        assert_eq!(r.best.seq.0, vec![0]);
        assert!(r.best.finished);
        assert_eq!(r.counters.lm_calls, 1);
    }
}
