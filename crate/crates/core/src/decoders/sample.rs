use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{process_logits, trace_of, DecodeResult};
use crate::error::{Error, Result};
use crate::models::{next_token_logprobs, LanguageModel};
use crate::rng::decode_rng;
use crate::types::{CallCounters, DecodeParams, ScoredHypothesis, TokenId};

/// Ancestral sampling knobs. `top_k = 0` and `top_p = 1` disable truncation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerParams {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// The truncated, renormalized sampling distribution for one step, as
/// `(token, probability)` pairs sorted by probability (ties: lower id).
///
/// Logits are divided by the temperature, cut to the `top_k` most likely
/// tokens, then to the smallest probability-sorted prefix whose mass
/// reaches `top_p` (the boundary token is kept).
pub fn sampling_support(processed: &[f64], sampler: &SamplerParams) -> Vec<(TokenId, f64)> {
    let max = processed
        .iter()
        .copied()
        .filter(|l| l.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Vec::new();
    }
    let mut probs: Vec<(TokenId, f64)> = processed
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .map(|(t, &l)| (t, ((l - max) / sampler.temperature).exp()))
        .filter(|(_, p)| *p > 0.0)
        .collect();
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    if sampler.top_k > 0 {
        probs.truncate(sampler.top_k);
    }
    let z: f64 = probs.iter().map(|p| p.1).sum();
    for p in &mut probs {
        p.1 /= z;
    }
    if sampler.top_p < 1.0 {
        let mut mass = 0.0;
        let mut keep = probs.len();
        for (i, p) in probs.iter().enumerate() {
            mass += p.1;
            if mass >= sampler.top_p - 1e-12 {
                keep = i + 1;
                break;
            }
        }
        probs.truncate(keep);
        let z: f64 = probs.iter().map(|p| p.1).sum();
        for p in &mut probs {
            p.1 /= z;
        }
    }
    probs
}

/// Samples one sequence token by token from the truncated distribution.
/// The reported log-likelihood is the model's, not the truncated one.
pub fn sample_decode<M: LanguageModel + ?Sized>(
    model: &M,
    context: &[TokenId],
    params: &DecodeParams,
    sampler: &SamplerParams,
) -> Result<DecodeResult> {
    params.validate()?;
    sampler.validate()?;
    let eos = model.vocab().eos();
    let mut rng = decode_rng(params.seed);
    let mut counters = CallCounters::default();
    let mut traces = params.trace.then(Vec::new);
    let mut hyp = ScoredHypothesis::root();
    while !hyp.finished {
        let lp = next_token_logprobs(model, context, &hyp.seq, &mut counters)?;
        let processed = process_logits(context, &hyp.seq, &lp, &params.heuristics, eos)?;
        let support = sampling_support(&processed, sampler);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut tok = support
            .last()
            .map(|p| p.0)
            .ok_or(Error::EmptySupportAfterProcessing { step: hyp.len() })?;
        for &(t, p) in &support {
            acc += p;
            if u < acc {
                tok = t;
                break;
            }
        }
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
    use crate::decoders::greedy_decode;
    use crate::models::fixtures::figure_one;
    use crate::models::{sequence_logprob, TabularLm};
    use crate::types::Vocabulary;

    fn ln(v: &[f64]) -> Vec<f64> {
        v.iter().map(|p| p.ln()).collect()
    }

    fn support_ids(s: &[(TokenId, f64)]) -> Vec<TokenId> {
        let mut ids: Vec<_> = s.iter().map(|p| p.0).collect();
        ids.sort();
        ids
    }

    #[test]
    fn top_p_keeps_boundary_token() {
        let d = ln(&[0.5, 0.3, 0.15, 0.05]);
        let s = sampling_support(
            &d,
            &SamplerParams {
                top_p: 0.8,
                ..Default::default()
            },
        );
        assert_eq!(support_ids(&s), vec![0, 1]);
        let s = sampling_support(
            &d,
            &SamplerParams {
                top_p: 0.81,
                ..Default::default()
            },
        );
        assert_eq!(support_ids(&s), vec![0, 1, 2]);
    }

    #[test]
    fn top_k_truncates() {
        let d = ln(&[0.5, 0.3, 0.15, 0.05]);
        let s = sampling_support(
            &d,
            &SamplerParams {
                top_k: 2,
                ..Default::default()
            },
        );
        assert_eq!(support_ids(&s), vec![0, 1]);
        assert!((s[0].1 - 0.625).abs() < 1e-12);
    }

    #[test]
    fn temperature_sharpens() {
        let d = ln(&[0.5, 0.3, 0.2]);
        let s = sampling_support(
            &d,
            &SamplerParams {
                temperature: 0.5,
                ..Default::default()
            },
        );
        // p^2 normalized: .25/.38
        assert!((s[0].1 - 0.25 / 0.38).abs() < 1e-12);
    }

    #[test]
    fn near_zero_temperature_is_greedy() {
        let lm = figure_one();
        let p = DecodeParams {
            max_len: 2,
            ..Default::default()
        };
        let g = greedy_decode(&lm, &[], &p).unwrap();
        for seed in 0..20 {
            let sp = DecodeParams { seed, ..p.clone() };
            for sampler in [
                SamplerParams {
                    temperature: 1e-6,
                    ..Default::default()
                },
                SamplerParams {
                    temperature: 1e-6,
                    top_k: 2,
                    top_p: 0.9,
                },
            ] {
                assert_eq!(sample_decode(&lm, &[], &sp, &sampler).unwrap().best, g.best);
            }
        }
    }

    #[test]
    fn same_seed_same_output() {
        let lm = figure_one();
        let p = DecodeParams {
            max_len: 2,
            seed: 42,
            ..Default::default()
        };
        let a = sample_decode(&lm, &[], &p, &SamplerParams::default()).unwrap();
        let b = sample_decode(&lm, &[], &p, &SamplerParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn emitted_tokens_stay_in_support_by_replay() {
        let vocab = Vocabulary::with_eos_token((0..5).map(|i| format!("t{i}")).chain(["</s>".into()]).collect(), "</s>").unwrap();
        let lm = TabularLm::new(vocab, vec![], Some(vec![0.3, 0.25, 0.2, 0.1, 0.1, 0.05])).unwrap();
        let sampler = SamplerParams {
            temperature: 0.9,
            top_k: 3,
            top_p: 0.7,
        };
        for seed in 0..200 {
            let p = DecodeParams {
                max_len: 6,
                seed,
                ..Default::default()
            };
            let r = sample_decode(&lm, &[], &p, &sampler).unwrap();
            for i in 0..r.best.len() {
                let lp = lm.logprobs(&[], &r.best.seq[..i]).unwrap();
                let support = sampling_support(&lp, &sampler);
                assert!(support.iter().any(|s| s.0 == r.best.seq[i]));
            }
            let mut c = CallCounters::default();
            let lp = sequence_logprob(&lm, &[], &r.best.seq, &mut c).unwrap();
            assert!((lp - r.best.logprob).abs() < 1e-9);
        }
    }
}
