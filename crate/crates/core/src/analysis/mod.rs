//! Experiment harness: run decoders over datasets, record likelihood and
//! utility, and aggregate the records.

mod hexbin;
mod planted;
pub mod stats;
mod sweep;

pub use hexbin::{hexbin, HexCell, HexGrid};
pub use planted::{
    brute_force_oracle, generate_misaligned_task, translation_like_task, MisalignedTask, OracleRow, OracleTable, TranslationTask,
};
pub use stats::{bootstrap_mean_ci, kendall_tau_b, pearson, spearman, MeanCi};
pub use sweep::{sweep_value_quality, Quality, SweepDecoder, SweepOptions, SweepRow};

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoders::{
    beam_decode, constrained_beam_decode, greedy_decode, sample_decode, stochastic_beam_decode, DecodeResult,
    LogitsProcessorSpec, PrefixTrie, SamplerParams,
};
use crate::error::{Error, Result};
use crate::guided::{mcts_decode, vgbs_decode, LeafEval, MctsParams, VgbsParams};
use crate::metrics::Utility;
use crate::models::{sequence_logprob, LanguageModel};
use crate::rng::derive_seed;
use crate::types::{CallCounters, DecodeParams, TokenId, Vocabulary};
use crate::value::{UniformValue, ValueSource};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub context: Vec<TokenId>,
    pub target: Option<Vec<TokenId>>,
    /// Payload the utility compares against.
    pub reference: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    examples: Vec<Example>,
}

/// A token field in a dataset line: either whitespace-separated tokens or ids.
#[derive(Deserialize)]
#[serde(untagged)]
enum TokenField {
    Text(String),
    Ids(Vec<TokenId>),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleLine {
    id: String,
    #[serde(default)]
    context: Option<TokenField>,
    #[serde(default)]
    target: Option<TokenField>,
    #[serde(default)]
    reference: Option<TokenField>,
}

impl TokenField {
    fn resolve(self, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
        match self {
            Self::Text(s) => vocab.encode(&s.split_whitespace().collect::<Vec<_>>()),
            Self::Ids(ids) => {
                vocab.check_ids(&ids)?;
                Ok(ids)
            }
        }
    }
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &examples {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidParameter(format!("duplicate example id {:?}", e.id)));
            }
        }
        Ok(Self { examples })
    }

    /// One JSON object per line: `id`, optional `context`, `target` and
    /// `reference`, each either a token string or an id array. A missing
    /// reference falls back to the target.
    pub fn from_jsonl(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let mut examples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ExampleLine =
                serde_json::from_str(line).map_err(|e| Error::Load(format!("dataset line {}: {e}", n + 1)))?;
            let context = parsed.context.map(|c| c.resolve(vocab)).transpose()?.unwrap_or_default();
            let target = parsed.target.map(|t| t.resolve(vocab)).transpose()?;
            if let Some(t) = &target {
                vocab.check_sequence(t)?;
            }
            let reference = match parsed.reference {
                Some(r) => r.resolve(vocab)?,
                None => target.clone().unwrap_or_default(),
            };
            examples.push(Example {
                id: parsed.id,
                context,
                target,
                reference,
            });
        }
        Self::new(examples)
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text, vocab)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split_at(&self, mid: usize) -> (Dataset, Dataset) {
        let mid = mid.min(self.examples.len());
        (
            Dataset {
                examples: self.examples[..mid].to_vec(),
            },
            Dataset {
                examples: self.examples[mid..].to_vec(),
            },
        )
    }

    pub fn references(&self) -> Vec<Vec<TokenId>> {
        self.examples.iter().map(|e| e.reference.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Greedy,
    Beam,
    Sample,
    StochasticBeam,
    ConstrainedBeam,
    Vgbs,
    Mcts,
}

impl DecoderKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::Beam => "beam",
            Self::Sample => "sample",
            Self::StochasticBeam => "stochastic_beam",
            Self::ConstrainedBeam => "constrained_beam",
            Self::Vgbs => "vgbs",
            Self::Mcts => "mcts",
        }
    }

    pub fn needs_value(self) -> bool {
        matches!(self, Self::Vgbs | Self::Mcts)
    }
}

/// A decoder and all its knobs. Fields irrelevant to `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub max_len: usize,
    pub num_beams: usize,
    pub heuristics: Vec<LogitsProcessorSpec>,
    pub length_normalize_final: bool,
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    /// Allowed outputs for `constrained_beam`, as token strings ending in EOS.
    pub allowed: Vec<String>,
    pub alpha: f64,
    pub candidates_per_beam: usize,
    pub simulations: usize,
    pub c_puct: f64,
    pub top_m: usize,
    pub leaf_eval: LeafEval,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        let d = DecodeParams::default();
        let s = SamplerParams::default();
        let v = VgbsParams::default();
        let m = MctsParams::default();
        Self {
            kind: DecoderKind::Greedy,
            max_len: d.max_len,
            num_beams: d.num_beams,
            heuristics: Vec::new(),
            length_normalize_final: false,
            temperature: s.temperature,
            top_k: s.top_k,
            top_p: s.top_p,
            allowed: Vec::new(),
            alpha: v.alpha,
            candidates_per_beam: v.candidates_per_beam,
            simulations: m.simulations,
            c_puct: m.c_puct,
            top_m: m.top_m,
            leaf_eval: m.leaf_eval,
        }
    }
}

impl DecoderSpec {
    pub fn with_kind(kind: DecoderKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn decode_params(&self, seed: u64) -> DecodeParams {
        DecodeParams {
            max_len: self.max_len,
            num_beams: self.num_beams,
            seed,
            heuristics: self.heuristics.clone(),
            length_normalize_final: self.length_normalize_final,
            trace: false,
        }
    }

    pub fn sampler(&self) -> SamplerParams {
        SamplerParams {
            temperature: self.temperature,
            top_k: self.top_k,
            top_p: self.top_p,
        }
    }

    pub fn vgbs(&self, seed: u64) -> VgbsParams {
        VgbsParams {
            decode: self.decode_params(seed),
            candidates_per_beam: self.candidates_per_beam,
            alpha: self.alpha,
        }
    }

    pub fn mcts(&self, seed: u64) -> MctsParams {
        MctsParams {
            decode: self.decode_params(seed),
            simulations: self.simulations,
            c_puct: self.c_puct,
            top_m: self.top_m,
            leaf_eval: self.leaf_eval,
        }
    }

    /// Checks every parameter the chosen decoder uses.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let p = self.decode_params(0);
        p.validate()?;
        match self.kind {
            DecoderKind::Sample => self.sampler().validate(),
            DecoderKind::Vgbs => self.vgbs(0).validate(),
            DecoderKind::Mcts => self.mcts(0).validate(),
            DecoderKind::ConstrainedBeam => self.trie(vocab).map(|_| ()),
            _ => Ok(()),
        }
    }

    fn trie(&self, vocab: &Vocabulary) -> Result<PrefixTrie> {
        if self.allowed.is_empty() {
            return Err(Error::InvalidParameter(
                "constrained_beam needs a nonempty `allowed` list".into(),
            ));
        }
        let seqs = self
            .allowed
            .iter()
            .map(|s| vocab.encode(&s.split_whitespace().collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        PrefixTrie::new(seqs, vocab.eos())
    }

    /// Runs this decoder on one input. `value` is required by the
    /// value-guided kinds.
    pub fn decode(
        &self,
        model: &dyn LanguageModel,
        value: Option<&dyn crate::value::ValueModel>,
        context: &[TokenId],
        seed: u64,
    ) -> Result<DecodeResult> {
        let p = self.decode_params(seed);
        let need_value = || value.ok_or_else(|| Error::InvalidParameter(format!("{} needs a value model", self.kind.name())));
        match self.kind {
            DecoderKind::Greedy => greedy_decode(model, context, &p),
            DecoderKind::Beam => beam_decode(model, context, &p),
            DecoderKind::Sample => sample_decode(model, context, &p, &self.sampler()),
            DecoderKind::StochasticBeam => stochastic_beam_decode(model, context, &p),
            DecoderKind::ConstrainedBeam => constrained_beam_decode(model, context, &p, &self.trie(model.vocab())?),
            DecoderKind::Vgbs => vgbs_decode(model, need_value()?, context, &self.vgbs(seed)),
            DecoderKind::Mcts => mcts_decode(model, need_value()?, context, &self.mcts(seed)),
        }
    }

    /// Short stable fingerprint of the knobs, for summary tables.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("decoder spec serializes");
        let hash = Sha256::digest(&json);
        hash[..6].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub logprob: f64,
    pub utility: f64,
}

/// One decoded example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub decoder: String,
    pub seed: u64,
    pub output_ids: Vec<TokenId>,
    pub logprob: f64,
    pub target_logprob: Option<f64>,
    pub normalized_logprob: Option<f64>,
    pub utility: f64,
    /// Final pool, sorted by log-probability, best first.
    pub candidates: Vec<CandidateScore>,
    pub lm_calls: u64,
    pub value_calls: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Everything `run_experiment` needs besides the dataset.
pub struct Experiment<'a> {
    pub model: &'a dyn LanguageModel,
    pub decoder: &'a DecoderSpec,
    pub utility: &'a dyn Utility,
    pub values: Option<&'a dyn ValueSource>,
    pub seed: u64,
    pub jobs: usize,
}

fn run_example(exp: &Experiment<'_>, index: usize, ex: &Example) -> RunRecord {
    let seed = derive_seed(exp.seed, &ex.id);
    let mut record = RunRecord {
        id: ex.id.clone(),
        decoder: exp.decoder.kind.name().to_owned(),
        seed,
        output_ids: Vec::new(),
        logprob: f64::NEG_INFINITY,
        target_logprob: None,
        normalized_logprob: None,
        utility: 0.0,
        candidates: Vec::new(),
        lm_calls: 0,
        value_calls: 0,
        error: None,
    };
    let fallback = UniformValue { seed };
    let bound = exp.values.map(|v| v.bind(index, &ex.reference));
    let value: Option<&dyn crate::value::ValueModel> = match (&bound, exp.decoder.kind.needs_value()) {
        (Some(b), _) => Some(b.as_ref()),
        (None, true) => None,
        (None, false) => Some(&fallback),
    };
    let result = exp.decoder.decode(exp.model, value, &ex.context, seed).and_then(|r| {
        let target_logprob = match &ex.target {
            Some(t) => Some(sequence_logprob(exp.model, &ex.context, t, &mut CallCounters::default())?),
            None => None,
        };
        Ok((r, target_logprob))
    });
    match result {
        Ok((r, target_logprob)) => {
            record.utility = exp.utility.score(&r.best.seq, &ex.reference);
            record.logprob = r.best.logprob;
            record.output_ids = r.best.seq.0;
            record.target_logprob = target_logprob;
            record.normalized_logprob = target_logprob.map(|t| record.logprob - t);
            record.candidates = r
                .candidates
                .iter()
                .map(|c| CandidateScore {
                    logprob: c.logprob,
                    utility: exp.utility.score(&c.seq, &ex.reference),
                })
                .collect();
            record.lm_calls = r.counters.lm_calls;
            record.value_calls = r.counters.value_calls;
        }
        Err(e) => record.error = Some(e.to_string()),
    }
    record
}

/// Decodes every example not listed in `skip`, calling `on_record` as
/// each finishes (in completion order), and returns the new records
/// sorted by id. Decode errors are stored in the record.
pub fn run_experiment_with(
    exp: &Experiment<'_>,
    dataset: &Dataset,
    skip: &HashSet<String>,
    on_record: &(dyn Fn(&RunRecord) -> Result<()> + Sync),
) -> Result<Vec<RunRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(exp.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let work: Vec<(usize, &Example)> = dataset
        .examples()
        .iter()
        .enumerate()
        .filter(|(_, e)| !skip.contains(&e.id))
        .collect();
    let mut records = pool.install(|| {
        work.par_iter()
            .map(|&(i, ex)| {
                let r = run_example(exp, i, ex);
                on_record(&r)?;
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

pub fn run_experiment(exp: &Experiment<'_>, dataset: &Dataset) -> Result<Vec<RunRecord>> {
    run_experiment_with(exp, dataset, &HashSet::new(), &|_| Ok(()))
}

/// Kendall tau-b between likelihood and utility over an example's `top_c`
/// best candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateAlignment {
    /// Per record, `None` where tau is undefined (ties or too few candidates).
    pub taus: Vec<Option<f64>>,
    pub mean_tau: Option<f64>,
    pub excluded: usize,
}

pub fn candidate_alignment(records: &[RunRecord], top_c: usize) -> CandidateAlignment {
    let taus: Vec<Option<f64>> = records
        .iter()
        .map(|r| {
            let top = &r.candidates[..r.candidates.len().min(top_c)];
            let x: Vec<f64> = top.iter().map(|c| c.logprob).collect();
            let y: Vec<f64> = top.iter().map(|c| c.utility).collect();
            kendall_tau_b(&x, &y).ok()
        })
        .collect();
    let defined: Vec<f64> = taus.iter().flatten().copied().collect();
    CandidateAlignment {
        excluded: taus.len() - defined.len(),
        mean_tau: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        taus,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    pub top_c: usize,
    pub nx: usize,
    pub bootstrap: usize,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            top_c: 5,
            nx: 20,
            bootstrap: 10_000,
        }
    }
}

/// Aggregates over one run's records (failed records excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub decoder: String,
    pub params_digest: String,
    pub n: usize,
    pub mean_utility: MeanCi,
    pub pearson: Option<(f64, f64)>,
    pub mean_tau: Option<f64>,
    pub tau_excluded: usize,
}

pub const SUMMARY_HEADER: &str = "decoder,params_digest,n,mean_utility,ci_low,ci_high,pearson_r,pearson_p,mean_tau,tau_excluded";

impl Summary {
    pub fn compute(records: &[RunRecord], decoder: &str, params_digest: &str, spec: &AnalysisSpec, seed: u64) -> Result<Self> {
        let ok: Vec<&RunRecord> = records.iter().filter(|r| r.is_ok()).collect();
        if ok.is_empty() {
            return Err(Error::InvalidParameter("no successful records to summarize".into()));
        }
        let utilities: Vec<f64> = ok.iter().map(|r| r.utility).collect();
        let x: Vec<f64> = ok.iter().map(|r| r.normalized_logprob.unwrap_or(r.logprob)).collect();
        let owned: Vec<RunRecord> = ok.iter().map(|r| (*r).clone()).collect();
        let align = candidate_alignment(&owned, spec.top_c);
        Ok(Self {
            decoder: decoder.to_owned(),
            params_digest: params_digest.to_owned(),
            n: ok.len(),
            mean_utility: bootstrap_mean_ci(&utilities, spec.bootstrap, seed)?,
            pearson: pearson(&x, &utilities).ok(),
            mean_tau: align.mean_tau,
            tau_excluded: align.excluded,
        })
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.decoder,
            self.params_digest,
            self.n,
            self.mean_utility.mean,
            self.mean_utility.low,
            self.mean_utility.high,
            opt(self.pearson.map(|p| p.0)),
            opt(self.pearson.map(|p| p.1)),
            opt(self.mean_tau),
            self.tau_excluded
        )
    }
}

/// Likelihood/utility points of successful records: x is the
/// target-normalized log-likelihood when available.
pub fn record_points(records: &[RunRecord]) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| (r.normalized_logprob.unwrap_or(r.logprob), r.utility))
        .collect()
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::TextUtility;
    use crate::models::fixtures::figure_one;

    fn dataset() -> Dataset {
        let vocab = figure_one().vocab().clone();
        Dataset::from_jsonl(
            "{\"id\":\"b\",\"target\":\"b </s>\"}\n{\"id\":\"a\",\"context\":[],\"target\":[0,2]}\n",
            &vocab,
        )
        .unwrap()
    }

    #[test]
    fn jsonl_accepts_text_and_ids() {
        let d = dataset();
        assert_eq!(d.examples()[0].target, Some(vec![1, 2]));
        assert_eq!(d.examples()[1].reference, vec![0, 2]);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let vocab = figure_one().vocab().clone();
        assert!(Dataset::from_jsonl("{\"id\":\"x\"}\n{\"id\":\"x\"}\n", &vocab).is_err());
    }

    #[test]
    fn greedy_run_records() {
        let lm = figure_one();
        let u = TextUtility::ExactMatch { eos: 2 };
        let spec = DecoderSpec {
            max_len: 2,
            ..DecoderSpec::with_kind(DecoderKind::Greedy)
        };
        let exp = Experiment {
            model: &lm,
            decoder: &spec,
            utility: &u,
            values: None,
            seed: 1,
            jobs: 2,
        };
        let recs = run_experiment(&exp, &dataset()).unwrap();
        assert_eq!(recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        let a = &recs[0];
        assert_eq!(a.output_ids, vec![0, 2]);
        assert_eq!(a.normalized_logprob, Some(0.0));
        assert_eq!(a.utility, 1.0);
        assert_eq!(a.candidates.len(), 1);
        assert_eq!(recs[1].utility, 0.0);
    }

    #[test]
    fn beam_candidates_are_sorted() {
        let lm = figure_one();
        let u = TextUtility::ExactMatch { eos: 2 };
        let spec = DecoderSpec {
            max_len: 2,
            num_beams: 5,
            ..DecoderSpec::with_kind(DecoderKind::Beam)
        };
        let exp = Experiment {
            model: &lm,
            decoder: &spec,
            utility: &u,
            values: None,
            seed: 1,
            jobs: 1,
        };
        for r in run_experiment(&exp, &dataset()).unwrap() {
            assert!(r.candidates.len() <= 5);
            assert!(r.candidates.windows(2).all(|w| w[0].logprob >= w[1].logprob));
        }
    }

    #[test]
    fn missing_value_model_is_recorded() {
        let lm = figure_one();
        let u = TextUtility::ExactMatch { eos: 2 };
        let spec = DecoderSpec {
            max_len: 2,
            num_beams: 2,
            ..DecoderSpec::with_kind(DecoderKind::Vgbs)
        };
        let exp = Experiment {
            model: &lm,
            decoder: &spec,
            utility: &u,
            values: None,
            seed: 1,
            jobs: 1,
        };
        let recs = run_experiment(&exp, &dataset()).unwrap();
        assert!(recs.iter().all(|r| r.error.is_some()));
    }

    fn record(cands: &[(f64, f64)]) -> RunRecord {
        RunRecord {
            id: "x".into(),
            decoder: "beam".into(),
            seed: 0,
            output_ids: vec![],
            logprob: 0.0,
            target_logprob: None,
            normalized_logprob: None,
            utility: 0.0,
            candidates: cands
                .iter()
                .map(|&(logprob, utility)| CandidateScore { logprob, utility })
                .collect(),
            lm_calls: 0,
            value_calls: 0,
            error: None,
        }
    }

    #[test]
    fn alignment_cases() {
        let a = candidate_alignment(
            &[
                record(&[(-1.0, 0.9), (-2.0, 0.5), (-3.0, 0.1)]),
                record(&[(-1.0, 0.5), (-2.0, 0.5)]),
                record(&[(-1.0, 0.5), (-2.0, 0.6), (-3.0, 0.4), (-4.0, 0.3), (-5.0, 0.2)]),
            ],
            5,
        );
        assert_eq!(a.taus[0], Some(1.0));
        assert_eq!(a.taus[1], None);
        assert!((a.taus[2].unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(a.excluded, 1);
    }
}
