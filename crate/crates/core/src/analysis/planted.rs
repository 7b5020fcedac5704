//! Synthetic tasks with controlled likelihood/utility alignment, and
//! exhaustive oracles over enumerable output spaces.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use super::stats::{average_ranks, spearman};
use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::metrics::{TableUtility, Utility};
use crate::models::{enumerate_sequences_capped, LanguageModel, TabularLm, TabularRow, ENUMERATION_CAP};
use crate::rng::decode_rng;
use crate::types::{TokenId, Vocabulary};
use crate::value::LookaheadOracleValue;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub seq: Vec<TokenId>,
    pub logprob: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleTable {
    pub argmax_likelihood: Vec<TokenId>,
    pub argmax_utility: Vec<TokenId>,
    /// Every complete sequence, in lexicographic order.
    pub table: Vec<OracleRow>,
}

/// Exhaustive search of the output space. Ties go to the
/// lexicographically first sequence.
pub fn brute_force_oracle<M, U>(
    model: &M,
    utility: &U,
    reference: &[TokenId],
    context: &[TokenId],
    max_len: usize,
) -> Result<OracleTable>
where
    M: LanguageModel + ?Sized,
    U: Utility + ?Sized,
{
    let seqs = enumerate_sequences_capped(model, context, max_len, ENUMERATION_CAP)?;
    let table: Vec<OracleRow> = seqs
        .into_iter()
        .map(|(s, logprob)| OracleRow {
            utility: utility.score(&s, reference),
            seq: s.0,
            logprob,
        })
        .collect();
    let first_max = |key: fn(&OracleRow) -> f64| {
        let mut best: Option<&OracleRow> = None;
        for row in &table {
            if best.is_none_or(|b| key(row) > key(b)) {
                best = Some(row);
            }
        }
        best.map(|r| r.seq.clone())
    };
    let argmax_likelihood = first_max(|r| r.logprob).ok_or(Error::EmptySupport)?;
    let argmax_utility = first_max(|r| r.utility).ok_or(Error::EmptySupport)?;
    Ok(OracleTable {
        argmax_likelihood,
        argmax_utility,
        table,
    })
}

/// A random tabular LM paired with a utility for every sequence it can emit.
#[derive(Debug, Clone)]
pub struct MisalignedTask {
    pub lm: TabularLm,
    pub max_len: usize,
    pub utility: TableUtility,
    /// All sequences with their exact log-probabilities and utilities.
    pub table: Vec<OracleRow>,
    /// Spearman correlation between log-probability and utility over the
    /// whole output space.
    pub spearman: f64,
}

impl MisalignedTask {
    pub fn oracle_value(&self) -> LookaheadOracleValue {
        LookaheadOracleValue::new(self.table.iter().map(|r| (r.seq.as_slice(), r.utility)))
    }

    pub fn utility_argmax(&self) -> &[TokenId] {
        let mut best = &self.table[0];
        for r in &self.table {
            if r.utility > best.utility {
                best = r;
            }
        }
        &best.seq
    }
}

fn synthetic_vocab(size: usize) -> Result<Vocabulary> {
    if size < 2 {
        return Err(Error::InvalidVocabulary("need at least one token besides EOS".into()));
    }
    let mut tokens: Vec<String> = (0..size - 1).map(|i| format!("w{i}")).collect();
    tokens.push("</s>".into());
    Vocabulary::with_eos_token(tokens, "</s>")
}

fn dirichlet_row<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let gamma: Gamma<f64> = Gamma::new(1.0, 1.0).expect("unit gamma");
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng).max(1e-12)).collect();
    let z: f64 = draws.iter().sum();
    draws.into_iter().map(|d| d / z).collect()
}

/// Spearman target to latent Gaussian correlation.
fn latent_correlation(rho: f64) -> f64 {
    2.0 * (std::f64::consts::PI * rho / 6.0).sin()
}

const SPEARMAN_TOLERANCE: f64 = 0.05;

/// Builds a random LM over `vocab_size` tokens (EOS included) and assigns
/// utilities through a Gaussian copula on log-probability ranks so the
/// full-space Spearman correlation lands within 0.05 of `rho_target`.
pub fn generate_misaligned_task(seed: u64, vocab_size: usize, max_len: usize, rho_target: f64) -> Result<MisalignedTask> {
    if !(-1.0..=1.0).contains(&rho_target) {
        return Err(Error::InvalidParameter(format!(
            "target correlation must be in [-1, 1], got {rho_target}"
        )));
    }
    if max_len == 0 {
        return Err(Error::InvalidParameter("max_len must be at least 1".into()));
    }
    if (vocab_size as f64).powi(max_len as i32) > ENUMERATION_CAP as f64 {
        return Err(Error::EnumerationCap { cap: ENUMERATION_CAP });
    }
    let vocab = synthetic_vocab(vocab_size)?;
    let mut rng = decode_rng(seed);
    let content = vocab_size - 1;
    let mut rows = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for prefix in frontier {
            rows.push(TabularRow::new(vec![], prefix.clone(), dirichlet_row(&mut rng, vocab_size)));
            next.extend((0..content).map(|t| {
                let mut p = prefix.clone();
                p.push(t);
                p
            }));
        }
        frontier = next;
    }
    let lm = TabularLm::new(vocab, rows, None)?;
    let seqs = enumerate_sequences_capped(&lm, &[], max_len, ENUMERATION_CAP)?;
    let logprobs: Vec<f64> = seqs.iter().map(|s| s.1).collect();
    let mut distinct = logprobs.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidParameter(
            "fewer than 3 distinct log-probabilities; correlation is undefined".into(),
        ));
    }

    let normal = Normal::standard();
    let n = logprobs.len() as f64;
    let scores: Vec<f64> = average_ranks(&logprobs)
        .into_iter()
        .map(|r| normal.inverse_cdf((r - 0.5) / n))
        .collect();
    let couple = |latent: f64, noise: &[f64]| -> Vec<f64> {
        let resid = (1.0 - latent * latent).max(0.0).sqrt();
        scores
            .iter()
            .zip(noise)
            .map(|(z, e)| normal.cdf(latent * z + resid * e))
            .collect()
    };

    for _ in 0..32 {
        let noise: Vec<f64> = (0..scores.len()).map(|_| rng.sample(StandardNormal)).collect();
        let mut latent = latent_correlation(rho_target);
        let mut utilities = couple(latent, &noise);
        let mut measured = spearman(&logprobs, &utilities)?;
        // Measured rank correlation is monotone in the latent one for fixed
        // noise, so bisection corrects finite-sample drift.
        let (mut lo, mut hi) = (-1.0, 1.0);
        for _ in 0..60 {
            if (measured - rho_target).abs() <= SPEARMAN_TOLERANCE / 2.0 {
                break;
            }
            if measured < rho_target {
                lo = latent;
            } else {
                hi = latent;
            }
            latent = (lo + hi) / 2.0;
            utilities = couple(latent, &noise);
            measured = spearman(&logprobs, &utilities)?;
        }
        if (measured - rho_target).abs() <= SPEARMAN_TOLERANCE {
            let table: Vec<OracleRow> = seqs
                .iter()
                .zip(&utilities)
                .map(|((s, lp), &u)| OracleRow {
                    seq: s.0.clone(),
                    logprob: *lp,
                    utility: u,
                })
                .collect();
            let utility = TableUtility {
                table: table.iter().map(|r| (r.seq.clone(), r.utility)).collect(),
            };
            return Ok(MisalignedTask {
                lm,
                max_len,
                utility,
                table,
                spearman: measured,
            });
        }
    }
    Err(Error::InvalidParameter(format!(
        "could not reach Spearman {rho_target} within {SPEARMAN_TOLERANCE} on this output space"
    )))
}

/// A translation-like task: per example, a reference output and a more
/// likely decoy that differs from it in a few positions.
#[derive(Debug, Clone)]
pub struct TranslationTask {
    pub lm: TabularLm,
    pub dataset: Dataset,
    pub max_len: usize,
}

/// Encodes `index` as a fixed-width string of content-token digits.
fn index_context(index: usize, content: usize, width: usize) -> Vec<TokenId> {
    let mut digits = vec![0; width];
    let mut i = index;
    for d in digits.iter_mut().rev() {
        *d = i % content;
        i /= content;
    }
    digits
}

/// Builds a dataset of `n` examples over a shared tabular LM. Each source
/// context has a reference of `ref_len` tokens; the LM prefers a decoy in
/// which `swaps` positions are replaced, so likelihood-only search lands
/// on the decoy and the reference is reachable with lower likelihood.
pub fn translation_like_task(
    seed: u64,
    n: usize,
    content_tokens: usize,
    ref_len: usize,
    swaps: usize,
) -> Result<TranslationTask> {
    if content_tokens < 2 || swaps > ref_len || ref_len == 0 {
        return Err(Error::InvalidParameter(
            "translation task needs 2+ content tokens and swaps <= ref_len".into(),
        ));
    }
    let vocab = synthetic_vocab(content_tokens + 1)?;
    let eos = vocab.eos();
    let v = vocab.len();
    let mut width = 1;
    while content_tokens.pow(width as u32) < n {
        width += 1;
    }
    let mut rng = decode_rng(seed);
    let mut rows = Vec::new();
    let mut examples = Vec::with_capacity(n);
    // Next-token row with the given masses; the rest is spread evenly.
    let row = |picks: &[(TokenId, f64)]| {
        let used: f64 = picks.iter().map(|p| p.1).sum();
        let rest = (1.0 - used) / (v - picks.len()) as f64;
        let mut probs = vec![rest; v];
        for &(t, p) in picks {
            probs[t] = p;
        }
        probs
    };
    for i in 0..n {
        let context = index_context(i, content_tokens, width);
        let reference: Vec<TokenId> = (0..ref_len).map(|_| rng.random_range(0..content_tokens)).collect();
        let mut decoy = reference.clone();
        let mut positions: Vec<usize> = (0..ref_len).collect();
        for k in 0..swaps {
            let j = rng.random_range(k..ref_len);
            positions.swap(k, j);
            let pos = positions[k];
            let mut t = rng.random_range(0..content_tokens - 1);
            if t >= reference[pos] {
                t += 1;
            }
            decoy[pos] = t;
        }
        let mut seen = std::collections::HashSet::new();
        for (path, own, other, own_p, other_p) in [
            (&decoy, &decoy, &reference, 0.6, 0.25),
            (&reference, &reference, &decoy, 0.4, 0.45),
        ] {
            for j in 0..=ref_len {
                let prefix = path[..j].to_vec();
                if !seen.insert(prefix.clone()) {
                    continue;
                }
                let next = own.get(j).copied().unwrap_or(eos);
                let alt = if other[..j] == prefix[..] {
                    other.get(j).copied().unwrap_or(eos)
                } else {
                    next
                };
                let probs = if alt != next {
                    row(&[(next, own_p), (alt, other_p)])
                } else if j == ref_len {
                    row(&[(eos, 0.9)])
                } else {
                    row(&[(next, 0.85)])
                };
                rows.push(TabularRow::new(context.clone(), prefix, probs));
            }
        }
        let mut target = reference.clone();
        target.push(eos);
        examples.push(Example {
            id: format!("ex{i:05}"),
            context,
            target: Some(target.clone()),
            reference: target,
        });
    }
    let mut default = vec![0.7 / (v - 1) as f64; v];
    default[eos] = 0.3;
    let lm = TabularLm::new(vocab, rows, Some(default))?;
    Ok(TranslationTask {
        lm,
        dataset: Dataset::new(examples)?,
        max_len: ref_len + 2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::beam_decode;
    use crate::metrics::TextUtility;
    use crate::models::fixtures::figure_one;
    use crate::types::DecodeParams;

    #[test]
    fn oracle_on_figure_one() {
        let lm = figure_one();
        let u = TableUtility {
            table: [(vec![0, 2], 1.0)].into_iter().collect(),
        };
        let o = brute_force_oracle(&lm, &u, &[], &[], 2).unwrap();
        assert_eq!(o.argmax_likelihood, vec![1, 2]);
        assert_eq!(o.argmax_utility, vec![0, 2]);
        assert_eq!(o.table.len(), 7);
    }

    #[test]
    fn monotone_utility_shares_argmax() {
        struct ExpLik<'a>(&'a TabularLm);
        impl Utility for ExpLik<'_> {
            fn score(&self, h: &[TokenId], _r: &[TokenId]) -> f64 {
                let mut c = Default::default();
                crate::models::sequence_logprob(self.0, &[], h, &mut c).unwrap().exp()
            }
        }
        let lm = figure_one();
        let o = brute_force_oracle(&lm, &ExpLik(&lm), &[], &[], 2).unwrap();
        assert_eq!(o.argmax_likelihood, o.argmax_utility);
    }

    #[test]
    fn oracle_respects_cap() {
        let task = generate_misaligned_task(1, 4, 3, 0.0).unwrap();
        assert!(matches!(
            brute_force_oracle(&task.lm, &task.utility, &[], &[], 11),
            Err(Error::EnumerationCap { .. })
        ));
    }

    #[test]
    fn planted_spearman_targets() {
        for (seed, rho) in [(1, 0.0), (2, -0.8), (3, 0.8), (4, 0.5)] {
            let t = generate_misaligned_task(seed, 4, 5, rho).unwrap();
            let lp: Vec<f64> = t.table.iter().map(|r| r.logprob).collect();
            let u: Vec<f64> = t.table.iter().map(|r| r.utility).collect();
            let s = spearman(&lp, &u).unwrap();
            assert!((s - rho).abs() <= 0.05, "rho {rho}: {s}");
            assert!(u.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn perfect_alignment_is_rank_identity() {
        let t = generate_misaligned_task(9, 3, 4, 1.0).unwrap();
        assert!((t.spearman - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_space_is_rejected() {
        // One content token and max_len 1: only two sequences.
        assert!(generate_misaligned_task(0, 2, 1, 0.3).is_err());
    }

    #[test]
    fn translation_task_prefers_decoy() {
        let task = translation_like_task(3, 20, 6, 5, 2).unwrap();
        let bleu = TextUtility::Bleu4 {
            eos: task.lm.vocab().eos(),
            smoothing: true,
        };
        let p = DecodeParams {
            max_len: task.max_len,
            ..Default::default()
        };
        let mut total = 0.0;
        for ex in task.dataset.examples() {
            let r = beam_decode(&task.lm, &ex.context, &p).unwrap();
            total += bleu.score(&r.best.seq, &ex.reference);
            let mut c = Default::default();
            let target_lp = crate::models::sequence_logprob(&task.lm, &ex.context, ex.target.as_ref().unwrap(), &mut c).unwrap();
            assert!(r.best.logprob >= target_lp);
        }
        assert!(total / 20.0 < 0.9);
    }
}
