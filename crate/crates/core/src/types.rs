//! Shared domain types: vocabulary, token sequences, scored hypotheses,
//! decoding parameters and call counters.

use std::collections::HashMap;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::decoders::LogitsProcessorSpec;
use crate::error::{Error, Result};

pub type TokenId = usize;

/// Ordered set of distinct token strings with a mandatory end-of-sequence token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos: TokenId,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>, eos: TokenId) -> Result<Self> {
        if eos >= tokens.len() {
            return Err(Error::InvalidVocabulary(format!(
                "eos id {eos} out of range for {} tokens",
                tokens.len()
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::InvalidVocabulary(format!("token {id} is empty")));
            }
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Self { tokens, eos, index })
    }

    /// Builds a vocabulary from token strings, looking the EOS token up by name.
    pub fn with_eos_token(tokens: Vec<String>, eos: &str) -> Result<Self> {
        let eos_id = tokens
            .iter()
            .position(|t| t == eos)
            .ok_or_else(|| Error::InvalidVocabulary(format!("eos token {eos:?} not in vocabulary")))?;
        Self::new(tokens, eos_id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<TokenId>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::InvalidSequence(format!("unknown token {:?}", t.as_ref())))
            })
            .collect()
    }

    /// Space-joined token strings; unknown ids render as `<id>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).map(str::to_owned).unwrap_or_else(|| format!("<{id}>")))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Checks that every id is in range and that EOS only appears last.
    pub fn check_sequence(&self, ids: &[TokenId]) -> Result<()> {
        self.check_ids(ids)?;
        if let Some(pos) = ids.iter().position(|&t| t == self.eos) {
            if pos + 1 != ids.len() {
                return Err(Error::InvalidSequence(format!("token after EOS at position {}", pos + 1)));
            }
        }
        Ok(())
    }

    pub fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.tokens.len()) {
            Some(bad) => Err(Error::InvalidSequence(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.tokens.len()
            ))),
            None => Ok(()),
        }
    }

    pub fn sequence(&self, ids: Vec<TokenId>) -> Result<Sequence> {
        self.check_sequence(&ids)?;
        Ok(Sequence(ids))
    }

    pub fn context(&self, ids: Vec<TokenId>) -> Result<Context> {
        self.check_ids(&ids)?;
        Ok(Context(ids))
    }
}

/// Generated token ids. EOS, when present, is the final element.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence(pub Vec<TokenId>);

impl Deref for Sequence {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for Sequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// Conditioning input (source sentence, prompt prefix, ...). May be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Context(pub Vec<TokenId>);

impl Deref for Context {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for Context {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

/// A token sequence with its cumulative natural-log likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub seq: Sequence,
    pub logprob: f64,
    pub finished: bool,
}

impl ScoredHypothesis {
    pub fn root() -> Self {
        Self {
            seq: Sequence::default(),
            logprob: 0.0,
            finished: false,
        }
    }

    pub fn len(&self) -> usize {
        self.seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seq.is_empty()
    }

    /// Extends by one token. `finished` is set when the token is EOS or
    /// the new length reaches `max_len`.
    pub fn extend(&self, token: TokenId, token_logprob: f64, eos: TokenId, max_len: usize) -> Self {
        let mut ids = Vec::with_capacity(self.seq.len() + 1);
        ids.extend_from_slice(&self.seq);
        ids.push(token);
        let finished = token == eos || ids.len() >= max_len;
        Self {
            seq: Sequence(ids),
            logprob: self.logprob + token_logprob,
            finished,
        }
    }

    /// Score used for final ranking: raw cumulative log-likelihood, or
    /// divided by generated length when `length_normalize` is set.
    pub fn final_score(&self, length_normalize: bool) -> f64 {
        if length_normalize && !self.seq.is_empty() {
            self.logprob / self.seq.len() as f64
        } else {
            self.logprob
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeParams {
    pub max_len: usize,
    pub num_beams: usize,
    pub seed: u64,
    pub heuristics: Vec<LogitsProcessorSpec>,
    pub length_normalize_final: bool,
    /// Record per-step candidate snapshots in [`crate::decoders::DecodeResult::step_traces`].
    pub trace: bool,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            max_len: 20,
            num_beams: 5,
            seed: 0,
            heuristics: Vec::new(),
            length_normalize_final: false,
            trace: false,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::InvalidParameter("max_len must be at least 1".into()));
        }
        if self.num_beams == 0 {
            return Err(Error::InvalidParameter("num_beams must be at least 1".into()));
        }
        for h in &self.heuristics {
            h.validate(self.max_len)?;
        }
        Ok(())
    }
}

/// LM and value-model calls made during one decode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounters {
    pub lm_calls: u64,
    pub value_calls: u64,
}

/// Log-softmax of `logits`.
///
/// Entries equal to `-inf` stay `-inf`. Fails when no entry is finite.
pub fn validate_distribution(logits: &[f64]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::EmptySupport);
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::InvalidParameter("logits contain NaN or +inf".into()));
    }
    let log_z = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(logits.iter().map(|&x| x - log_z).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_sum(v: &[f64]) -> f64 {
        v.iter().map(|x| x.exp()).sum()
    }

    #[test]
    fn uniform_from_zeros() {
        let out = validate_distribution(&[0.0, 0.0]).unwrap();
        for x in out {
            assert!((x - 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_input_is_unchanged() {
        let input = [0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()];
        let out = validate_distribution(&input).unwrap();
        for (a, b) in input.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_one_zero() {
        let out = validate_distribution(&[1.0, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((out[0] - (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((out[1] - (1.0 / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((out[0] + 0.3133).abs() < 1e-4);
        assert!((out[1] + 1.3133).abs() < 1e-4);
    }

    #[test]
    fn all_neg_inf_is_empty_support() {
        let err = validate_distribution(&[f64::NEG_INFINITY; 3]).unwrap_err();
        assert!(matches!(err, Error::EmptySupport));
    }

    #[test]
    fn masked_entries_stay_masked() {
        let out = validate_distribution(&[0.0, f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(out[1], f64::NEG_INFINITY);
        assert!((exp_sum(&out) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_bad_eos() {
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(Vocabulary::new(toks(&["a", "a", "</s>"]), 2).is_err());
        assert!(Vocabulary::new(toks(&["a", "</s>"]), 2).is_err());
        assert!(Vocabulary::new(toks(&["a", ""]), 0).is_err());
        let v = Vocabulary::with_eos_token(toks(&["a", "b", "</s>"]), "</s>").unwrap();
        assert_eq!(v.eos(), 2);
        assert!(v.check_sequence(&[0, 2]).is_ok());
        assert!(v.check_sequence(&[2, 0]).is_err());
        assert!(v.check_sequence(&[3]).is_err());
        assert_eq!(v.decode(&[1, 2]), "b </s>");
    }

    #[test]
    fn extend_marks_finished() {
        let h = ScoredHypothesis::root().extend(0, -0.5, 2, 3);
        assert!(!h.finished);
        assert!(h.extend(2, -0.1, 2, 3).finished);
        assert!(h.extend(0, -0.1, 2, 2).finished);
    }

    proptest::proptest! {
        #[test]
        fn log_softmax_sums_to_one(xs in proptest::collection::vec(-50.0f64..50.0, 1..40)) {
            let out = validate_distribution(&xs).unwrap();
            let s = exp_sum(&out);
            proptest::prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }
}
