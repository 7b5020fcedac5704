//! Value models: estimates of the final utility reachable from a partial
//! sequence, plus controllably noisy constructions of them.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Utility;
use crate::rng::{decode_rng, hash_ids, mix64, unit_interval};
use crate::types::{CallCounters, TokenId};

/// `v(prefix, context)` in `[0, 1]`. Must be deterministic.
pub trait ValueModel: Send + Sync {
    fn estimate(&self, context: &[TokenId], prefix: &[TokenId]) -> f64;
}

impl<V: ValueModel + ?Sized> ValueModel for &V {
    fn estimate(&self, context: &[TokenId], prefix: &[TokenId]) -> f64 {
        (**self).estimate(context, prefix)
    }
}

impl<V: ValueModel + ?Sized> ValueModel for Box<V> {
    fn estimate(&self, context: &[TokenId], prefix: &[TokenId]) -> f64 {
        (**self).estimate(context, prefix)
    }
}

impl<V: ValueModel + ?Sized> ValueModel for Arc<V> {
    fn estimate(&self, context: &[TokenId], prefix: &[TokenId]) -> f64 {
        (**self).estimate(context, prefix)
    }
}

/// Queries the value model, clamps to `[0, 1]` and counts the call.
pub fn value_estimate<V: ValueModel + ?Sized>(
    vm: &V,
    context: &[TokenId],
    prefix: &[TokenId],
    counters: &mut CallCounters,
) -> f64 {
    counters.value_calls += 1;
    let v = vm.estimate(context, prefix);
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Scores an unfinished prefix as if it were the final hypothesis.
pub fn partial_sequence_value<U: Utility + ?Sized>(metric: &U, reference: &[TokenId], prefix: &[TokenId]) -> f64 {
    metric.score(prefix, reference).clamp(0.0, 1.0)
}

/// Utility of the prefix against a fixed reference.
#[derive(Clone)]
pub struct ReferenceValue {
    pub metric: Arc<dyn Utility>,
    pub reference: Vec<TokenId>,
}

impl ValueModel for ReferenceValue {
    fn estimate(&self, _context: &[TokenId], prefix: &[TokenId]) -> f64 {
        partial_sequence_value(&*self.metric, &self.reference, prefix)
    }
}

/// Best utility over all listed completions of a prefix; prefixes with no
/// listed completion score 0. An exact oracle on enumerable tasks.
#[derive(Debug, Clone, Default)]
pub struct LookaheadOracleValue {
    best: HashMap<Vec<TokenId>, f64>,
}

impl LookaheadOracleValue {
    pub fn new<'a>(table: impl IntoIterator<Item = (&'a [TokenId], f64)>) -> Self {
        let mut best: HashMap<Vec<TokenId>, f64> = HashMap::new();
        for (seq, u) in table {
            for end in 0..=seq.len() {
                let e = best.entry(seq[..end].to_vec()).or_insert(f64::NEG_INFINITY);
                *e = e.max(u);
            }
        }
        Self { best }
    }
}

impl ValueModel for LookaheadOracleValue {
    fn estimate(&self, _context: &[TokenId], prefix: &[TokenId]) -> f64 {
        self.best.get(prefix).copied().unwrap_or(0.0)
    }
}

/// Interpolates the utility against each example's true target with the
/// utility against a fixed, randomly assigned false target:
/// `lambda * u(prefix, true) + (1 - lambda) * u(prefix, false)`.
#[derive(Clone)]
pub struct InterpolatedOracleValue {
    metric: Arc<dyn Utility>,
    targets: Vec<Vec<TokenId>>,
    false_assignment: Vec<usize>,
    lambda: f64,
}

/// Assigns every example another example's target as its false target.
///
/// The assignment is a random cyclic permutation (so it has no fixed
/// points) and depends only on `seed`.
pub fn make_interpolated_oracle(
    metric: Arc<dyn Utility>,
    targets: Vec<Vec<TokenId>>,
    seed: u64,
    lambda: f64,
) -> Result<InterpolatedOracleValue> {
    if targets.len() < 2 {
        return Err(Error::InvalidParameter(
            "an interpolated oracle needs at least two examples to draw false targets from".into(),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!("lambda must be in [0, 1], got {lambda}")));
    }
    let n = targets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut decode_rng(seed));
    let mut false_assignment = vec![0; n];
    for i in 0..n {
        false_assignment[order[i]] = order[(i + 1) % n];
    }
    Ok(InterpolatedOracleValue {
        metric,
        targets,
        false_assignment,
        lambda,
    })
}

impl InterpolatedOracleValue {
    pub fn false_assignment(&self) -> &[usize] {
        &self.false_assignment
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { lambda, ..self.clone() }
    }

    pub fn for_example(&self, example: usize) -> InterpolatedExampleValue<'_> {
        InterpolatedExampleValue { parent: self, example }
    }
}

pub struct InterpolatedExampleValue<'a> {
    parent: &'a InterpolatedOracleValue,
    example: usize,
}

impl ValueModel for InterpolatedExampleValue<'_> {
    fn estimate(&self, _context: &[TokenId], prefix: &[TokenId]) -> f64 {
        let p = self.parent;
        let truth = partial_sequence_value(&*p.metric, &p.targets[self.example], prefix);
        let decoy = partial_sequence_value(&*p.metric, &p.targets[p.false_assignment[self.example]], prefix);
        p.lambda * truth + (1.0 - p.lambda) * decoy
    }
}

fn prefix_hash(seed: u64, context: &[TokenId], prefix: &[TokenId]) -> u64 {
    mix64(hash_ids(seed, context) ^ hash_ids(!seed, prefix))
}

/// With probability `eta` (decided by hashing `(seed, context, prefix)`)
/// the oracle's answer is replaced by a pseudo-random uniform score.
pub struct DegradedOracleValue<V> {
    pub oracle: V,
    pub eta: f64,
    pub seed: u64,
}

impl<V: ValueModel> ValueModel for DegradedOracleValue<V> {
    fn estimate(&self, context: &[TokenId], prefix: &[TokenId]) -> f64 {
        let h = prefix_hash(self.seed, context, prefix);
        if unit_interval(h) < self.eta {
            unit_interval(mix64(h ^ 0xD1B5_4A32_D192_ED03))
        } else {
            self.oracle.estimate(context, prefix)
        }
    }
}

/// Pure noise: a hash-seeded uniform score per `(context, prefix)`.
#[derive(Debug, Clone, Copy)]
pub struct UniformValue {
    pub seed: u64,
}

impl ValueModel for UniformValue {
    fn estimate(&self, context: &[TokenId], prefix: &[TokenId]) -> f64 {
        unit_interval(mix64(prefix_hash(self.seed, context, prefix) ^ 0xD1B5_4A32_D192_ED03))
    }
}

/// Value-model selection as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueSpec {
    /// The task utility against the example's own reference.
    Oracle,
    Interpolated {
        lambda: f64,
        #[serde(default)]
        seed: u64,
    },
    Degraded {
        eta: f64,
        #[serde(default)]
        seed: u64,
    },
    Uniform {
        #[serde(default)]
        seed: u64,
    },
}

impl ValueSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Interpolated { lambda, .. } if !(0.0..=1.0).contains(lambda) => {
                Err(Error::InvalidParameter(format!("lambda must be in [0, 1], got {lambda}")))
            }
            Self::Degraded { eta, .. } if !(0.0..=1.0).contains(eta) => {
                Err(Error::InvalidParameter(format!("eta must be in [0, 1], got {eta}")))
            }
            _ => Ok(()),
        }
    }
}

/// Dataset-level value construction: one bound value model per example.
pub trait ValueSource: Send + Sync {
    fn bind<'a>(&'a self, example: usize, reference: &'a [TokenId]) -> Box<dyn ValueModel + 'a>;
}

/// Resolves a [`ValueSpec`] for a dataset with the given references.
pub struct SpecValueSource {
    metric: Arc<dyn Utility>,
    spec: ValueSpec,
    interpolated: Option<InterpolatedOracleValue>,
}

impl SpecValueSource {
    pub fn new(spec: ValueSpec, metric: Arc<dyn Utility>, references: &[Vec<TokenId>]) -> Result<Self> {
        spec.validate()?;
        let interpolated = match &spec {
            ValueSpec::Interpolated { lambda, seed } => {
                Some(make_interpolated_oracle(metric.clone(), references.to_vec(), *seed, *lambda)?)
            }
            _ => None,
        };
        Ok(Self {
            metric,
            spec,
            interpolated,
        })
    }
}

impl ValueSource for SpecValueSource {
    fn bind<'a>(&'a self, example: usize, reference: &'a [TokenId]) -> Box<dyn ValueModel + 'a> {
        let oracle = ReferenceValue {
            metric: self.metric.clone(),
            reference: reference.to_vec(),
        };
        match &self.spec {
            ValueSpec::Oracle => Box::new(oracle),
            ValueSpec::Interpolated { .. } => Box::new(self.interpolated.as_ref().expect("built in new").for_example(example)),
            ValueSpec::Degraded { eta, seed } => Box::new(DegradedOracleValue {
                oracle,
                eta: *eta,
                seed: *seed,
            }),
            ValueSpec::Uniform { seed } => Box::new(UniformValue { seed: *seed }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::stats::pearson;
    use crate::metrics::TextUtility;

    struct Fixed(f64);
    impl Utility for Fixed {
        fn score(&self, _h: &[TokenId], r: &[TokenId]) -> f64 {
            if r == [1] {
                self.0
            } else {
                0.2
            }
        }
    }

    fn bleu() -> Arc<dyn Utility> {
        Arc::new(TextUtility::Bleu4 {
            eos: 99,
            smoothing: false,
        })
    }

    #[test]
    fn lambda_one_on_true_target_is_one() {
        let targets = vec![vec![1, 2, 3, 4, 99], vec![5, 6, 7, 8, 99]];
        let vm = make_interpolated_oracle(bleu(), targets.clone(), 3, 1.0).unwrap();
        let mut c = CallCounters::default();
        assert_eq!(value_estimate(&vm.for_example(0), &[], &targets[0], &mut c), 1.0);
        assert_eq!(c.value_calls, 1);
    }

    #[test]
    fn half_lambda_is_the_average() {
        let vm = make_interpolated_oracle(Arc::new(Fixed(0.8)), vec![vec![1], vec![2]], 0, 0.5).unwrap();
        assert!((vm.for_example(0).estimate(&[], &[7]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_examples_swap() {
        let vm = make_interpolated_oracle(bleu(), vec![vec![1], vec![2]], 11, 0.5).unwrap();
        assert_eq!(vm.false_assignment(), &[1, 0]);
    }

    #[test]
    fn assignment_is_seeded_derangement() {
        let targets: Vec<Vec<usize>> = (0..100).map(|i| vec![i]).collect();
        let a = make_interpolated_oracle(bleu(), targets.clone(), 5, 0.5).unwrap();
        let b = make_interpolated_oracle(bleu(), targets.clone(), 5, 0.5).unwrap();
        assert_eq!(a.false_assignment(), b.false_assignment());
        assert!(a.false_assignment().iter().enumerate().all(|(i, &j)| i != j));
        let mut sorted = a.false_assignment().to_vec();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn single_example_is_rejected() {
        assert!(make_interpolated_oracle(bleu(), vec![vec![1]], 0, 0.5).is_err());
    }

    #[test]
    fn partial_bleu_values() {
        let u = TextUtility::Bleu4 {
            eos: 99,
            smoothing: false,
        };
        assert_eq!(partial_sequence_value(&u, &[1, 2, 3, 4], &[]), 0.0);
        assert_eq!(partial_sequence_value(&u, &[1, 2, 3, 4], &[1, 2, 3, 4]), 1.0);
        assert_eq!(partial_sequence_value(&u, &[1, 2, 3, 4], &[1, 2]), 0.0);
    }

    fn prefixes(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![i % 7, i / 7 % 7, i / 49]).collect()
    }

    #[test]
    fn fully_degraded_is_uniform() {
        let vm = DegradedOracleValue {
            oracle: UniformValue { seed: 1 },
            eta: 1.0,
            seed: 42,
        };
        let mut xs: Vec<f64> = prefixes(10_000).iter().map(|p| vm.estimate(&[3], p)).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov-Smirnov distance to U(0, 1).
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| ((i + 1) as f64 / n - x).abs().max((x - i as f64 / n).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "ks = {ks}");
    }

    #[test]
    fn degraded_correlation_falls_with_eta() {
        let oracle = UniformValue { seed: 77 };
        let set = prefixes(2000);
        let truth: Vec<f64> = set.iter().map(|p| oracle.estimate(&[], p)).collect();
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let eta = k as f64 / 10.0;
            let vm = DegradedOracleValue { oracle, eta, seed: 5 };
            let got: Vec<f64> = set.iter().map(|p| vm.estimate(&[], p)).collect();
            let (r, _) = pearson(&truth, &got).unwrap();
            assert!(r <= last + 1e-12, "eta {eta}: r {r} > {last}");
            if k == 0 {
                assert!((r - 1.0).abs() < 1e-12);
            }
            if k == 10 {
                assert!(r.abs() < 0.1);
            }
            last = r;
        }
    }

    #[test]
    fn degraded_is_order_independent() {
        let vm = DegradedOracleValue {
            oracle: UniformValue { seed: 2 },
            eta: 0.5,
            seed: 9,
        };
        let set = prefixes(50);
        let forward: Vec<f64> = set.iter().map(|p| vm.estimate(&[1], p)).collect();
        let backward: Vec<f64> = set.iter().rev().map(|p| vm.estimate(&[1], p)).collect();
        assert!(forward.iter().eq(backward.iter().rev()));
    }

    #[test]
    fn lambda_fidelity_is_monotone() {
        let targets: Vec<Vec<usize>> = (0..30).map(|i| vec![i % 5, (i / 5) % 5, i % 3, 1, 99]).collect();
        let base = make_interpolated_oracle(bleu(), targets.clone(), 1, 0.0).unwrap();
        let u = TextUtility::Bleu4 {
            eos: 99,
            smoothing: false,
        };
        let mut last = f64::INFINITY;
        for k in 0..=4 {
            let vm = base.with_lambda(k as f64 / 4.0);
            let mae: f64 = targets
                .iter()
                .enumerate()
                .flat_map(|(i, t)| targets.iter().map(move |h| (i, t, h)))
                .map(|(i, t, h)| (vm.for_example(i).estimate(&[], h) - u.score(h, t)).abs())
                .sum::<f64>();
            assert!(mae <= last + 1e-12);
            last = mae;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn lookahead_oracle_takes_best_completion() {
        let seqs = [(vec![0, 2], 0.3), (vec![0, 1, 2], 0.9), (vec![1, 2], 0.5)];
        let vm = LookaheadOracleValue::new(seqs.iter().map(|(s, u)| (s.as_slice(), *u)));
        assert_eq!(vm.estimate(&[], &[]), 0.9);
        assert_eq!(vm.estimate(&[], &[0]), 0.9);
        assert_eq!(vm.estimate(&[], &[1]), 0.5);
        assert_eq!(vm.estimate(&[], &[0, 2]), 0.3);
        assert_eq!(vm.estimate(&[], &[2]), 0.0);
    }
}
