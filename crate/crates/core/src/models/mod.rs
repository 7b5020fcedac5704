//! Autoregressive next-token models and the helpers every decoder goes through.

mod ngram;
pub mod remote;
mod tabular;

pub use ngram::{ngram_train, NgramLm};
pub use remote::{remote_connect, RemoteLm, RemoteOptions};
pub use tabular::{tabular_lm_load, TabularDocument, TabularLm, TabularRow};

use crate::error::{Error, Result};
use crate::types::{CallCounters, Sequence, TokenId, Vocabulary};

/// Default refusal threshold for [`enumerate_sequences`].
pub const ENUMERATION_CAP: usize = 1_000_000;

/// A conditional next-token distribution `p(. | prefix, context)`.
///
/// Implementations return natural-log probabilities over the whole
/// vocabulary that exp-sum to one. Callers should go through
/// [`next_token_logprobs`], which enforces the prefix contract and counts calls.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;

    fn logprobs(&self, context: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>>;
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn logprobs(&self, context: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).logprobs(context, prefix)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for Box<M> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn logprobs(&self, context: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).logprobs(context, prefix)
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<M> {
    fn vocab(&self) -> &Vocabulary {
        (**self).vocab()
    }
    fn logprobs(&self, context: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        (**self).logprobs(context, prefix)
    }
}

/// Queries `log p(. | prefix, context)` and bumps `counters.lm_calls`.
pub fn next_token_logprobs<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    prefix: &[TokenId],
    counters: &mut CallCounters,
) -> Result<Vec<f64>> {
    let vocab = model.vocab();
    if prefix.last() == Some(&vocab.eos()) {
        return Err(Error::ClosedHypothesis);
    }
    counters.lm_calls += 1;
    let lp = model.logprobs(context, prefix)?;
    if lp.len() != vocab.len() {
        return Err(Error::LengthMismatch {
            expected: vocab.len(),
            got: lp.len(),
        });
    }
    Ok(lp)
}

/// Chain-rule log-likelihood of `seq` given `context`; one LM call per token.
pub fn sequence_logprob<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    seq: &[TokenId],
    counters: &mut CallCounters,
) -> Result<f64> {
    model.vocab().check_sequence(seq)?;
    let mut total = 0.0;
    for i in 0..seq.len() {
        let lp = next_token_logprobs(model, context, &seq[..i], counters)?;
        total += lp[seq[i]];
    }
    Ok(total)
}

/// Every EOS-terminated sequence of length `<= max_len` plus every
/// unterminated sequence of length exactly `max_len`, with exact
/// log-likelihoods, in lexicographic token-id order.
///
/// Zero-probability branches are skipped.
pub fn enumerate_sequences<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    max_len: usize,
) -> Result<Vec<(Sequence, f64)>> {
    enumerate_sequences_capped(model, context, max_len, ENUMERATION_CAP)
}

pub fn enumerate_sequences_capped<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    max_len: usize,
    cap: usize,
) -> Result<Vec<(Sequence, f64)>> {
    let v = model.vocab().len();
    let bound = u32::try_from(max_len)
        .ok()
        .and_then(|n| v.checked_pow(n))
        .unwrap_or(usize::MAX);
    if bound > cap {
        return Err(Error::EnumerationCap { cap });
    }
    let eos = model.vocab().eos();
    let mut out = Vec::new();
    let mut counters = CallCounters::default();
    let mut stack: Vec<TokenId> = Vec::with_capacity(max_len);
    enumerate_rec(model, context, max_len, eos, &mut stack, 0.0, &mut out, &mut counters)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn enumerate_rec<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    max_len: usize,
    eos: TokenId,
    prefix: &mut Vec<TokenId>,
    logprob: f64,
    out: &mut Vec<(Sequence, f64)>,
    counters: &mut CallCounters,
) -> Result<()> {
    let lp = next_token_logprobs(model, context, prefix, counters)?;
    for (tok, &l) in lp.iter().enumerate() {
        if !l.is_finite() {
            continue;
        }
        prefix.push(tok);
        let total = logprob + l;
        if tok == eos || prefix.len() == max_len {
            out.push((Sequence(prefix.clone()), total));
        } else {
            enumerate_rec(model, context, max_len, eos, prefix, total, out, counters)?;
        }
        prefix.pop();
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn sequence_logprob_two_level() {
        let lm = two_level();
        let mut c = CallCounters::default();
        let lp = sequence_logprob(&lm, &[], &[0, 2], &mut c).unwrap();
        assert!((lp - (0.6f64.ln() + 0.7f64.ln())).abs() < 1e-12);
        assert!((lp + 0.8675).abs() < 1e-4);
        assert_eq!(c.lm_calls, 2);
    }

    #[test]
    fn sequence_logprob_empty_and_eos_only() {
        let lm = two_level();
        let mut c = CallCounters::default();
        assert_eq!(sequence_logprob(&lm, &[], &[], &mut c).unwrap(), 0.0);
        assert_eq!(c.lm_calls, 0);
        let lp = sequence_logprob(&lm, &[], &[2], &mut c).unwrap();
        assert!((lp - 0.1f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sequence_logprob_rejects_token_after_eos() {
        let lm = two_level();
        let mut c = CallCounters::default();
        assert!(matches!(
            sequence_logprob(&lm, &[], &[2, 0], &mut c),
            Err(Error::InvalidSequence(_))
        ));
    }

    #[test]
    fn closed_prefix_is_rejected() {
        let lm = two_level();
        let mut c = CallCounters::default();
        assert!(matches!(
            next_token_logprobs(&lm, &[], &[0, 2], &mut c),
            Err(Error::ClosedHypothesis)
        ));
        assert_eq!(c.lm_calls, 0);
    }

    #[test]
    fn enumerate_figure_one() {
        let lm = figure_one();
        let all = enumerate_sequences(&lm, &[], 2).unwrap();
        let find = |ids: &[TokenId]| all.iter().find(|(s, _)| s.0 == ids).map(|(_, lp)| lp.exp());
        assert!((find(&[1, 2]).unwrap() - 0.405).abs() < 1e-12);
        assert!((find(&[0, 2]).unwrap() - 0.40).abs() < 1e-12);
        let mass: f64 = all.iter().map(|(_, lp)| lp.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-9);
    }

    #[test]
    fn enumerate_forced_path() {
        let vocab = Vocabulary::new(vec!["</s>".into()], 0).unwrap();
        let lm = TabularLm::new(vocab, vec![TabularRow::new(vec![], vec![], vec![1.0])], None).unwrap();
        let all = enumerate_sequences(&lm, &[], 4).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].0 .0, vec![0]);
        assert_eq!(all[0].1, 0.0);
    }

    #[test]
    fn enumerate_refuses_over_cap() {
        let lm = two_level();
        let err = enumerate_sequences_capped(&lm, &[], 10, 1000).unwrap_err();
        assert!(err.to_string().contains("1000"));
    }
}
