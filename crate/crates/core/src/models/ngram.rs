use std::collections::{BTreeSet, HashMap};

use super::LanguageModel;
use crate::error::{Error, Result};
use crate::types::{TokenId, Vocabulary};

/// `None` marks a BOS padding slot in a history.
type History = Vec<Option<TokenId>>;

/// Count-based n-gram model with additive smoothing:
/// `P(t | h) = (count(h, t) + alpha) / (count(h) + alpha * |V|)`.
///
/// Histories are the last `order - 1` tokens of `context ++ prefix`,
/// left-padded with BOS.
#[derive(Debug, Clone)]
pub struct NgramLm {
    vocab: Vocabulary,
    order: usize,
    alpha: f64,
    counts: HashMap<History, Vec<u64>>,
}

impl NgramLm {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn history(&self, context: &[TokenId], prefix: &[TokenId]) -> History {
        let width = self.order - 1;
        let mut h: History = vec![None; width];
        h.extend(context.iter().chain(prefix).map(|&t| Some(t)));
        h.split_off(h.len() - width)
    }
}

/// Trains an n-gram model on whitespace-tokenized lines.
///
/// Without an explicit vocabulary, the vocabulary is the sorted set of
/// corpus tokens followed by `</s>`, so it does not depend on line order.
pub fn ngram_train(corpus: &str, order: usize, alpha: f64, vocab: Option<Vocabulary>) -> Result<NgramLm> {
    if order == 0 {
        return Err(Error::InvalidParameter("n-gram order must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("smoothing must be positive, got {alpha}")));
    }
    let lines: Vec<Vec<&str>> = corpus
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>())
        .filter(|l| !l.is_empty())
        .collect();
    let vocab = match vocab {
        Some(v) => v,
        None => {
            let set: BTreeSet<&str> = lines.iter().flatten().copied().filter(|t| *t != "</s>").collect();
            let mut tokens: Vec<String> = set.into_iter().map(str::to_owned).collect();
            tokens.push("</s>".into());
            let eos = tokens.len() - 1;
            Vocabulary::new(tokens, eos)?
        }
    };
    let eos = vocab.eos();
    let mut model = NgramLm {
        vocab,
        order,
        alpha,
        counts: HashMap::new(),
    };
    for line in &lines {
        let ids = model.vocab.encode(line).map_err(|e| Error::Load(e.to_string()))?;
        if ids.contains(&eos) {
            return Err(Error::Load("corpus line contains the EOS token".into()));
        }
        for i in 0..=ids.len() {
            let target = if i == ids.len() { eos } else { ids[i] };
            let h = model.history(&[], &ids[..i]);
            let row = model.counts.entry(h).or_insert_with(|| vec![0; model.vocab.len()]);
            row[target] += 1;
        }
    }
    Ok(model)
}

impl LanguageModel for NgramLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logprobs(&self, context: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        let v = self.vocab.len() as f64;
        let h = self.history(context, prefix);
        Ok(match self.counts.get(&h) {
            Some(row) => {
                let total: u64 = row.iter().sum();
                let denom = (total as f64 + self.alpha * v).ln();
                row.iter().map(|&c| (c as f64 + self.alpha).ln() - denom).collect()
            }
            None => vec![-v.ln(); self.vocab.len()],
        })
    }
}
