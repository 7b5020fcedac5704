//! Task utilities: BLEU-4, triple-set F1, a lexicon-based non-toxicity
//! score and exact match. All scores lie in `[0, 1]`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::TokenId;

/// Scores a complete hypothesis against a reference payload.
///
/// Both arguments are full token sequences as produced by decoders; text
/// metrics strip a trailing EOS themselves.
pub trait Utility: Send + Sync {
    fn score(&self, hypothesis: &[TokenId], reference: &[TokenId]) -> f64;
}

impl<U: Utility + ?Sized> Utility for Arc<U> {
    fn score(&self, hypothesis: &[TokenId], reference: &[TokenId]) -> f64 {
        (**self).score(hypothesis, reference)
    }
}

fn ngram_counts(tokens: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Corpus-free single-reference BLEU-4: geometric mean of clipped n-gram
/// precisions for n = 1..4 times the brevity penalty
/// `min(1, exp(1 - |ref| / |hyp|))`.
///
/// Without smoothing any zero precision gives 0. With `add_one_smoothing`,
/// precisions for n >= 2 use `(matches + 1) / (total + 1)`.
pub fn bleu4(hypothesis: &[TokenId], reference: &[TokenId], add_one_smoothing: bool) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::InvalidParameter("BLEU reference is empty".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let total: usize = hyp.values().sum();
        let matches: usize = hyp.iter().map(|(g, &c)| c.min(*refc.get(g).unwrap_or(&0))).sum();
        let (num, den) = if add_one_smoothing && n > 1 {
            (matches as f64 + 1.0, total as f64 + 1.0)
        } else {
            (matches as f64, total as f64)
        };
        if num == 0.0 || den == 0.0 {
            return Ok(0.0);
        }
        log_sum += (num / den).ln();
    }
    let (h, r) = (hypothesis.len() as f64, reference.len() as f64);
    let bp = if h >= r { 1.0 } else { (1.0 - r / h).exp() };
    Ok((bp * (log_sum / 4.0).exp()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleMarkers {
    pub sub: TokenId,
    pub rel: TokenId,
    pub obj: TokenId,
    pub end: TokenId,
}

impl TripleMarkers {
    fn is_marker(&self, t: TokenId) -> bool {
        t == self.sub || t == self.rel || t == self.obj || t == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub subject: Vec<TokenId>,
    pub relation: Vec<TokenId>,
    pub object: Vec<TokenId>,
}

pub type TripleSet = BTreeSet<Triple>;

/// Extracts every well-formed `SUB s.. REL r.. OBJ o.. END` span with
/// non-empty parts. Malformed spans are skipped; scanning resumes at the
/// next `SUB`.
pub fn parse_triples(seq: &[TokenId], markers: &TripleMarkers) -> TripleSet {
    let mut out = TripleSet::new();
    let mut i = 0;
    while i < seq.len() {
        if seq[i] != markers.sub {
            i += 1;
            continue;
        }
        let mut parts: [Vec<TokenId>; 3] = Default::default();
        let expected = [markers.rel, markers.obj, markers.end];
        let mut j = i + 1;
        let mut ok = true;
        for (part, &closing) in parts.iter_mut().zip(&expected) {
            while j < seq.len() && !markers.is_marker(seq[j]) {
                part.push(seq[j]);
                j += 1;
            }
            if j >= seq.len() || seq[j] != closing || part.is_empty() {
                ok = false;
                break;
            }
            j += 1;
        }
        if ok {
            let [subject, relation, object] = parts;
            out.insert(Triple {
                subject,
                relation,
                object,
            });
            i = j;
        } else {
            // Resume at the marker that broke the span (a new SUB may start there).
            i = j.max(i + 1);
        }
    }
    out
}

/// Inverse of [`parse_triples`] for well-formed sets.
pub fn linearize_triples(triples: &TripleSet, markers: &TripleMarkers) -> Vec<TokenId> {
    let mut out = Vec::new();
    for t in triples {
        out.push(markers.sub);
        out.extend(&t.subject);
        out.push(markers.rel);
        out.extend(&t.relation);
        out.push(markers.obj);
        out.extend(&t.object);
        out.push(markers.end);
    }
    out
}

/// Set F1. Both empty gives 1, exactly one empty gives 0.
pub fn triple_set_f1(pred: &TripleSet, gold: &TripleSet) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let hit = pred.intersection(gold).count() as f64;
    if hit == 0.0 {
        return 0.0;
    }
    let p = hit / pred.len() as f64;
    let r = hit / gold.len() as f64;
    2.0 * p * r / (p + r)
}

/// `1 - banned / total`, clipped to `[0, 1]`; the empty sequence scores 1.
pub fn lexicon_nontoxicity(seq: &[TokenId], banned: &HashSet<TokenId>) -> f64 {
    if seq.is_empty() {
        return 1.0;
    }
    let hits = seq.iter().filter(|t| banned.contains(t)).count();
    (1.0 - hits as f64 / seq.len() as f64).clamp(0.0, 1.0)
}

pub fn exact_match(hypothesis: &[TokenId], reference: &[TokenId]) -> f64 {
    if hypothesis == reference {
        1.0
    } else {
        0.0
    }
}

fn strip_eos(seq: &[TokenId], eos: TokenId) -> &[TokenId] {
    match seq.split_last() {
        Some((&last, rest)) if last == eos => rest,
        _ => seq,
    }
}

/// Declarative utility selection, as used in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilitySpec {
    Bleu4 {
        #[serde(default)]
        smoothing: bool,
    },
    TripleF1 {
        markers: [String; 4],
    },
    Lexicon {
        #[serde(default)]
        banned: Vec<String>,
        #[serde(default)]
        path: Option<std::path::PathBuf>,
    },
    ExactMatch,
}

/// A [`UtilitySpec`] resolved against a vocabulary.
#[derive(Debug, Clone)]
pub enum TextUtility {
    Bleu4 { eos: TokenId, smoothing: bool },
    TripleF1 { eos: TokenId, markers: TripleMarkers },
    Lexicon { eos: TokenId, banned: HashSet<TokenId> },
    ExactMatch { eos: TokenId },
}

impl TextUtility {
    pub fn resolve(spec: &UtilitySpec, vocab: &crate::types::Vocabulary) -> Result<Self> {
        let eos = vocab.eos();
        let id = |t: &str| {
            vocab
                .id(t)
                .ok_or_else(|| Error::InvalidParameter(format!("utility token {t:?} not in vocabulary")))
        };
        Ok(match spec {
            UtilitySpec::Bleu4 { smoothing } => Self::Bleu4 {
                eos,
                smoothing: *smoothing,
            },
            UtilitySpec::TripleF1 { markers } => Self::TripleF1 {
                eos,
                markers: TripleMarkers {
                    sub: id(&markers[0])?,
                    rel: id(&markers[1])?,
                    obj: id(&markers[2])?,
                    end: id(&markers[3])?,
                },
            },
            UtilitySpec::Lexicon { banned, path } => {
                let mut words: Vec<String> = banned.clone();
                if let Some(p) = path {
                    words.extend(
                        std::fs::read_to_string(p)?
                            .lines()
                            .map(str::trim)
                            .filter(|l| !l.is_empty())
                            .map(str::to_owned),
                    );
                }
                // Lexicon entries outside the vocabulary can never be generated.
                let banned = words.iter().filter_map(|w| vocab.id(w)).collect();
                Self::Lexicon { eos, banned }
            }
            UtilitySpec::ExactMatch => Self::ExactMatch { eos },
        })
    }
}

impl Utility for TextUtility {
    fn score(&self, hypothesis: &[TokenId], reference: &[TokenId]) -> f64 {
        match self {
            Self::Bleu4 { eos, smoothing } => {
                let r = strip_eos(reference, *eos);
                if r.is_empty() {
                    return 0.0;
                }
                bleu4(strip_eos(hypothesis, *eos), r, *smoothing).unwrap_or(0.0)
            }
            Self::TripleF1 { eos, markers } => triple_set_f1(
                &parse_triples(strip_eos(hypothesis, *eos), markers),
                &parse_triples(strip_eos(reference, *eos), markers),
            ),
            Self::Lexicon { eos, banned } => lexicon_nontoxicity(strip_eos(hypothesis, *eos), banned),
            Self::ExactMatch { eos } => exact_match(strip_eos(hypothesis, *eos), strip_eos(reference, *eos)),
        }
    }
}

/// Utility looked up per full output sequence; unlisted sequences score 0.
/// Used by planted synthetic tasks where utilities are assigned directly.
#[derive(Debug, Clone, Default)]
pub struct TableUtility {
    pub table: HashMap<Vec<TokenId>, f64>,
}

impl Utility for TableUtility {
    fn score(&self, hypothesis: &[TokenId], _reference: &[TokenId]) -> f64 {
        self.table.get(hypothesis).copied().unwrap_or(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bleu_identity_and_empty() {
        let r = [1, 2, 3, 4, 5];
        assert!((bleu4(&r, &r, false).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(bleu4(&[], &r, false).unwrap(), 0.0);
        assert!(bleu4(&r, &[], false).is_err());
    }

    #[test]
    fn bleu_brevity_penalty_case() {
        // hyp "a b c d", ref "a b c d e": all precisions 1, BP = exp(1 - 5/4)
        let score = bleu4(&[0, 1, 2, 3], &[0, 1, 2, 3, 4], false).unwrap();
        assert!((score - (-0.25f64).exp()).abs() < 1e-12);
        assert!((score - 0.7788).abs() < 1e-4);
    }

    #[test]
    fn bleu_half_prefix_is_zero_without_smoothing() {
        assert_eq!(bleu4(&[0, 1], &[0, 1, 2, 3], false).unwrap(), 0.0);
        assert!(bleu4(&[0, 1], &[0, 1, 2, 3], true).unwrap() > 0.0);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        // p1 = 2/7 for "the the the the the the the" vs "the cat is on the mat"
        let hyp = [0; 7];
        let refr = [0, 1, 2, 3, 0, 4];
        assert_eq!(bleu4(&hyp, &refr, false).unwrap(), 0.0);
        let counts = ngram_counts(&hyp, 1);
        assert_eq!(counts[&[0usize][..]], 7);
    }

    fn m() -> TripleMarkers {
        TripleMarkers {
            sub: 100,
            rel: 101,
            obj: 102,
            end: 103,
        }
    }

    fn t(s: usize, r: usize, o: usize) -> Triple {
        Triple {
            subject: vec![s],
            relation: vec![r],
            object: vec![o],
        }
    }

    #[test]
    fn f1_cases() {
        let t1 = t(1, 2, 3);
        let t2 = t(4, 5, 6);
        let gold: TripleSet = [t1.clone(), t2.clone()].into();
        let pred: TripleSet = [t1.clone()].into();
        assert!((triple_set_f1(&pred, &gold) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(triple_set_f1(&gold, &gold), 1.0);
        assert_eq!(triple_set_f1(&[t(7, 8, 9)].into(), &gold), 0.0);
        assert_eq!(triple_set_f1(&TripleSet::new(), &TripleSet::new()), 1.0);
        assert_eq!(triple_set_f1(&TripleSet::new(), &gold), 0.0);
    }

    #[test]
    fn parser_skips_malformed_spans() {
        let mk = m();
        // SUB 1 REL OBJ 3 END (empty relation) then a good triple, then a dangling tail
        let seq = [100, 1, 101, 102, 3, 103, 100, 4, 101, 5, 102, 6, 103, 100, 7, 101];
        let got = parse_triples(&seq, &mk);
        assert_eq!(got, [t(4, 5, 6)].into());
        // A SUB interrupting a span restarts parsing there.
        let seq = [100, 1, 100, 4, 101, 5, 102, 6, 103];
        assert_eq!(parse_triples(&seq, &mk), [t(4, 5, 6)].into());
    }

    #[test]
    fn lexicon_cases() {
        let banned: HashSet<TokenId> = [9].into();
        assert_eq!(lexicon_nontoxicity(&[1, 2, 3], &banned), 1.0);
        assert_eq!(lexicon_nontoxicity(&[9, 9], &banned), 0.0);
        assert_eq!(lexicon_nontoxicity(&[1, 9, 2, 3], &banned), 0.75);
        assert_eq!(lexicon_nontoxicity(&[], &banned), 1.0);
    }

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(exact_match(&[1, 2], &[1, 3]), 0.0);
        assert_eq!(exact_match(&[], &[]), 1.0);
    }

    #[test]
    fn text_utility_strips_eos() {
        let u = TextUtility::ExactMatch { eos: 9 };
        assert_eq!(u.score(&[1, 2, 9], &[1, 2]), 1.0);
        let b = TextUtility::Bleu4 {
            eos: 9,
            smoothing: false,
        };
        assert_eq!(b.score(&[1, 2, 3, 4, 9], &[1, 2, 3, 4, 9]), 1.0);
    }

    fn triple_strategy() -> impl Strategy<Value = Triple> {
        let part = || prop::collection::vec(0usize..20, 1..4);
        (part(), part(), part()).prop_map(|(subject, relation, object)| Triple {
            subject,
            relation,
            object,
        })
    }

    proptest! {
        #[test]
        fn bleu_in_range_and_self_is_one(
            h in prop::collection::vec(0usize..6, 0..12),
            r in prop::collection::vec(0usize..6, 1..12),
            smoothing: bool,
        ) {
            let s = bleu4(&h, &r, smoothing).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            if r.len() >= 4 {
                prop_assert!((bleu4(&r, &r, smoothing).unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn bleu_is_permutation_invariant(
            h in prop::collection::vec(0usize..6, 0..10),
            r in prop::collection::vec(0usize..6, 1..10),
            shift in 1usize..6,
        ) {
            let perm = |s: &[usize]| s.iter().map(|x| (x + shift) % 6).collect::<Vec<_>>();
            let a = bleu4(&h, &r, false).unwrap();
            let b = bleu4(&perm(&h), &perm(&r), false).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn f1_symmetric_and_bounded(
            a in prop::collection::btree_set(triple_strategy(), 0..5),
            b in prop::collection::btree_set(triple_strategy(), 0..5),
        ) {
            let ab = triple_set_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, triple_set_f1(&b, &a));
        }

        #[test]
        fn triples_round_trip(set in prop::collection::btree_set(triple_strategy(), 0..5)) {
            let mk = m();
            prop_assert_eq!(parse_triples(&linearize_triples(&set, &mk), &mk), set);
        }
    }
}
