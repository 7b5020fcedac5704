use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LanguageModel;
use crate::error::{Error, Result};
use crate::types::{TokenId, Vocabulary};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// One explicit row of a tabular model, probabilities in linear domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularRow {
    pub context: Vec<TokenId>,
    pub prefix: Vec<TokenId>,
    pub probs: Vec<f64>,
}

impl TabularRow {
    pub fn new(context: Vec<TokenId>, prefix: Vec<TokenId>, probs: Vec<f64>) -> Self {
        Self { context, prefix, probs }
    }
}

/// Next-token distributions looked up by `(context, prefix)`, with an
/// optional fallback row for prefixes that are not listed.
#[derive(Debug, Clone)]
pub struct TabularLm {
    vocab: Vocabulary,
    rows: HashMap<(Vec<TokenId>, Vec<TokenId>), Vec<f64>>,
    default: Option<Vec<f64>>,
}

fn to_log_row(vocab: &Vocabulary, probs: &[f64], what: impl Fn() -> String) -> Result<Vec<f64>> {
    if probs.len() != vocab.len() {
        return Err(Error::Load(format!(
            "{} has {} probabilities, vocabulary has {}",
            what(),
            probs.len(),
            vocab.len()
        )));
    }
    if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::Load(format!("{} has invalid probability {bad}", what())));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::Load(format!("{} row sums to {sum}", what())));
    }
    Ok(probs.iter().map(|p| (p / sum).ln()).collect())
}

impl TabularLm {
    pub fn new(vocab: Vocabulary, rows: Vec<TabularRow>, default: Option<Vec<f64>>) -> Result<Self> {
        let eos = vocab.eos();
        let mut table = HashMap::with_capacity(rows.len());
        for row in rows {
            let describe = || format!("prefix {:?} (context {:?})", vocab.decode(&row.prefix), row.context);
            vocab.check_ids(&row.context).map_err(|e| Error::Load(e.to_string()))?;
            vocab.check_ids(&row.prefix).map_err(|e| Error::Load(e.to_string()))?;
            if row.prefix.contains(&eos) {
                return Err(Error::Load(format!("{} contains EOS", describe())));
            }
            let log_row = to_log_row(&vocab, &row.probs, describe)?;
            if table.insert((row.context, row.prefix), log_row).is_some() {
                return Err(Error::Load("duplicate row key".into()));
            }
        }
        let default = default
            .map(|p| to_log_row(&vocab, &p, || "default".to_string()))
            .transpose()?;
        if default.is_none() {
            for (ctx, prefix) in table.keys() {
                if prefix.is_empty() {
                    continue;
                }
                let parent = (ctx.clone(), prefix[..prefix.len() - 1].to_vec());
                if !table.contains_key(&parent) {
                    return Err(Error::Load(format!(
                        "unreachable prefix {:?}: its parent {:?} has no row and there is no default row",
                        vocab.decode(prefix),
                        vocab.decode(&parent.1)
                    )));
                }
            }
        }
        Ok(Self {
            vocab,
            rows: table,
            default,
        })
    }

    pub fn from_document(doc: TabularDocument) -> Result<Self> {
        let vocab = Vocabulary::with_eos_token(doc.vocab, &doc.eos).map_err(|e| Error::Load(e.to_string()))?;
        let rows = doc
            .rows
            .into_iter()
            .map(|r| {
                let encode = |toks: &[String]| vocab.encode(toks).map_err(|e| Error::Load(e.to_string()));
                Ok(TabularRow::new(encode(&r.context)?, encode(&r.prefix)?, r.p))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vocab, rows, doc.default)
    }

    pub fn to_document(&self) -> TabularDocument {
        let mut keys: Vec<_> = self.rows.keys().collect();
        keys.sort();
        let tokens = |ids: &[TokenId]| ids.iter().map(|&i| self.vocab.tokens()[i].clone()).collect();
        let linear = |row: &[f64]| row.iter().map(|l| l.exp()).collect();
        TabularDocument {
            vocab: self.vocab.tokens().to_vec(),
            eos: self.vocab.tokens()[self.vocab.eos()].clone(),
            rows: keys
                .into_iter()
                .map(|k| DocumentRow {
                    context: tokens(&k.0),
                    prefix: tokens(&k.1),
                    p: linear(&self.rows[k]),
                })
                .collect(),
            default: self.default.as_deref().map(linear),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }
}

impl LanguageModel for TabularLm {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn logprobs(&self, context: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        // Borrowed lookup would need a custom key type; rows are small.
        let key = (context.to_vec(), prefix.to_vec());
        match self.rows.get(&key).or(self.default.as_ref()) {
            Some(row) => Ok(row.clone()),
            None => Err(Error::InvalidSequence(format!(
                "no row for prefix {:?} (context {:?}) and no default row",
                self.vocab.decode(prefix),
                context
            ))),
        }
    }
}

/// On-disk form of a [`TabularLm`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularDocument {
    pub vocab: Vec<String>,
    pub eos: String,
    pub rows: Vec<DocumentRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DocumentRow {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub context: Vec<String>,
    pub prefix: Vec<String>,
    pub p: Vec<f64>,
}

pub fn tabular_lm_load(path: &Path) -> Result<TabularLm> {
    let text = std::fs::read_to_string(path)?;
    let doc: TabularDocument = serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    TabularLm::from_document(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(json: &str) -> Result<TabularLm> {
        TabularLm::from_document(serde_json::from_str(json).unwrap())
    }

    #[test]
    fn root_row_lookup() {
        let lm = doc(r#"{"vocab":["a","b","</s>"],"eos":"</s>","rows":[{"prefix":[],"p":[0.6,0.3,0.1]}]}"#).unwrap();
        let lp = lm.logprobs(&[], &[]).unwrap();
        for (l, p) in lp.iter().zip([0.6f64, 0.3, 0.1]) {
            assert!((l - p.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_row_sum_is_reported() {
        let err = doc(r#"{"vocab":["a","</s>"],"eos":"</s>","rows":[{"prefix":[],"p":[0.6,0.5]}]}"#).unwrap_err();
        assert!(err.to_string().contains("row sums to 1.1"), "{err}");
    }

    #[test]
    fn unreachable_prefix_is_reported() {
        let err = doc(r#"{"vocab":["a","b","</s>"],"eos":"</s>","rows":[
                {"prefix":[],"p":[0.6,0.3,0.1]},
                {"prefix":["a","b"],"p":[0.6,0.3,0.1]}]}"#)
        .unwrap_err();
        assert!(err.to_string().contains("unreachable"), "{err}");
    }

    #[test]
    fn default_row_covers_unlisted_prefixes() {
        let lm = doc(r#"{"vocab":["a","b","</s>"],"eos":"</s>","rows":[
                {"prefix":["a","b"],"p":[0.6,0.3,0.1]}],"default":[0.2,0.2,0.6]}"#)
        .unwrap();
        assert!((lm.logprobs(&[], &[1]).unwrap()[2] - 0.6f64.ln()).abs() < 1e-12);
        assert!((lm.logprobs(&[], &[0, 1]).unwrap()[0] - 0.6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn context_keys_are_literal() {
        let lm = doc(r#"{"vocab":["a","b","</s>"],"eos":"</s>","rows":[
                {"prefix":[],"p":[1.0,0.0,0.0]},
                {"context":["b"],"prefix":[],"p":[0.0,1.0,0.0]}],"default":[0.0,0.0,1.0]}"#)
        .unwrap();
        assert_eq!(lm.logprobs(&[], &[]).unwrap()[0], 0.0);
        assert_eq!(lm.logprobs(&[1], &[]).unwrap()[1], 0.0);
        assert_eq!(lm.logprobs(&[0], &[]).unwrap()[2], 0.0);
    }

    #[test]
    fn document_round_trip() {
        let lm = super::super::fixtures::figure_one();
        let again = TabularLm::from_document(lm.to_document()).unwrap();
        for prefix in [vec![], vec![0], vec![1]] {
            let a = lm.logprobs(&[], &prefix).unwrap();
            let b = again.logprobs(&[], &prefix).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
