use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TokenId;

/// Ad-hoc logit heuristics, applied in list order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LogitsProcessorSpec {
    /// Forbid EOS while fewer than `min_len` tokens have been generated.
    MinLength {
        min_len: usize,
    },
    /// Forbid any token that would repeat an n-gram already in the prefix.
    NoRepeatNgram {
        n: usize,
    },
    BanTokens {
        tokens: Vec<TokenId>,
    },
}

impl LogitsProcessorSpec {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        match self {
            Self::MinLength { min_len } if *min_len > max_len => Err(Error::InvalidParameter(format!(
                "min_length {min_len} exceeds max_len {max_len}"
            ))),
            Self::NoRepeatNgram { n: 0 } => Err(Error::InvalidParameter("no_repeat_ngram needs n >= 1".into())),
            _ => Ok(()),
        }
    }

    fn apply(&self, prefix: &[TokenId], eos: TokenId, logits: &mut [f64]) {
        match self {
            Self::MinLength { min_len } => {
                if prefix.len() < *min_len {
                    logits[eos] = f64::NEG_INFINITY;
                }
            }
            Self::NoRepeatNgram { n } => {
                let n = *n;
                if n == 0 || prefix.len() + 1 < n {
                    return;
                }
                let head = &prefix[prefix.len() + 1 - n..];
                for start in 0..prefix.len() + 1 - n {
                    if &prefix[start..start + n - 1] == head {
                        let banned = prefix[start + n - 1];
                        if let Some(l) = logits.get_mut(banned) {
                            *l = f64::NEG_INFINITY;
                        }
                    }
                }
            }
            Self::BanTokens { tokens } => {
                for &t in tokens {
                    if let Some(l) = logits.get_mut(t) {
                        *l = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }
}

/// Applies `processors` to a copy of `logits` for the given generated prefix.
///
/// Fails with [`Error::EmptySupportAfterProcessing`] when nothing survives.
pub fn process_logits(
    _context: &[TokenId],
    prefix: &[TokenId],
    logits: &[f64],
    processors: &[LogitsProcessorSpec],
    eos: TokenId,
) -> Result<Vec<f64>> {
    let mut out = logits.to_vec();
    for p in processors {
        p.apply(prefix, eos, &mut out);
    }
    if out.iter().all(|&l| l == f64::NEG_INFINITY) {
        return Err(Error::EmptySupportAfterProcessing { step: prefix.len() });
    }
    Ok(out)
}
