//! Python bindings: tabular language models, the decoders, value models,
//! utilities and correlation statistics.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use decode_align::analysis::{self, MisalignedTask};
use decode_align::decoders::{self, DecodeResult, SamplerParams};
use decode_align::guided::{self, LeafEval, MctsParams, VgbsParams};
use decode_align::metrics;
use decode_align::models::{self, LanguageModel, TabularLm, TabularRow};
use decode_align::types::{CallCounters, DecodeParams, TokenId, Vocabulary};
use decode_align::value::{self, LookaheadOracleValue, UniformValue, ValueModel};

create_exception!(decode_align, DecodeAlignError, PyValueError);

fn py_err(e: decode_align::Error) -> PyErr {
    DecodeAlignError::new_err(e.to_string())
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for decode_align::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A language model given as explicit next-token tables.
#[pyclass(name = "TabularLM", module = "decode_align", frozen)]
pub struct PyTabularLm {
    inner: TabularLm,
}

#[pymethods]
impl PyTabularLm {
    /// `rows` holds `(context, prefix, probabilities)` triples; `default`
    /// covers every prefix without a row.
    #[new]
    #[pyo3(signature = (vocab, eos, rows, default=None))]
    fn new(
        vocab: Vec<String>,
        eos: &str,
        rows: Vec<(Vec<TokenId>, Vec<TokenId>, Vec<f64>)>,
        default: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let vocab = Vocabulary::with_eos_token(vocab, eos).py()?;
        let rows = rows.into_iter().map(|(c, p, probs)| TabularRow::new(c, p, probs)).collect();
        Ok(Self {
            inner: TabularLm::new(vocab, rows, default).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: models::tabular_lm_load(&path).py()?,
        })
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab().tokens().to_vec()
    }

    #[getter]
    fn eos(&self) -> TokenId {
        self.inner.vocab().eos()
    }

    fn encode(&self, tokens: Vec<String>) -> PyResult<Vec<TokenId>> {
        self.inner.vocab().encode(&tokens).py()
    }

    fn decode(&self, ids: Vec<TokenId>) -> String {
        self.inner.vocab().decode(&ids)
    }

    /// Natural-log next-token probabilities.
    #[pyo3(signature = (prefix, context=Vec::new()))]
    fn logprobs(&self, prefix: Vec<TokenId>, context: Vec<TokenId>) -> PyResult<Vec<f64>> {
        models::next_token_logprobs(&self.inner, &context, &prefix, &mut CallCounters::default()).py()
    }

    #[pyo3(signature = (seq, context=Vec::new()))]
    fn sequence_logprob(&self, seq: Vec<TokenId>, context: Vec<TokenId>) -> PyResult<f64> {
        models::sequence_logprob(&self.inner, &context, &seq, &mut CallCounters::default()).py()
    }

    /// Every complete sequence up to `max_len` with its log-probability.
    #[pyo3(signature = (max_len, context=Vec::new()))]
    fn enumerate(&self, max_len: usize, context: Vec<TokenId>) -> PyResult<Vec<(Vec<TokenId>, f64)>> {
        Ok(models::enumerate_sequences(&self.inner, &context, max_len)
            .py()?
            .into_iter()
            .map(|(s, lp)| (s.0, lp))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "TabularLM(vocab_size={}, rows={})",
            self.inner.vocab().len(),
            self.inner.num_rows()
        )
    }
}

#[pyclass(name = "DecodeResult", module = "decode_align", frozen, get_all)]
pub struct PyDecodeResult {
    best: Vec<TokenId>,
    logprob: f64,
    /// `(sequence, logprob)` pairs, best first.
    candidates: Vec<(Vec<TokenId>, f64)>,
    lm_calls: u64,
    value_calls: u64,
}

#[pymethods]
impl PyDecodeResult {
    fn __repr__(&self) -> String {
        format!(
            "DecodeResult(best={:?}, logprob={:.6}, candidates={}, lm_calls={}, value_calls={})",
            self.best,
            self.logprob,
            self.candidates.len(),
            self.lm_calls,
            self.value_calls
        )
    }
}

impl From<DecodeResult> for PyDecodeResult {
    fn from(r: DecodeResult) -> Self {
        Self {
            logprob: r.best.logprob,
            best: r.best.seq.0,
            candidates: r.candidates.into_iter().map(|c| (c.seq.0, c.logprob)).collect(),
            lm_calls: r.counters.lm_calls,
            value_calls: r.counters.value_calls,
        }
    }
}

enum ValueKind {
    Lookahead(LookaheadOracleValue),
    Uniform(UniformValue),
}

/// A prefix scorer for value-guided decoders.
#[pyclass(name = "ValueModel", module = "decode_align", frozen)]
pub struct PyValueModel {
    kind: ValueKind,
}

impl ValueModel for PyValueModel {
    fn estimate(&self, context: &[TokenId], prefix: &[TokenId]) -> f64 {
        match &self.kind {
            ValueKind::Lookahead(v) => v.estimate(context, prefix),
            ValueKind::Uniform(v) => v.estimate(context, prefix),
        }
    }
}

#[pymethods]
impl PyValueModel {
    /// Exact oracle: best utility among the listed completions of a prefix.
    #[staticmethod]
    fn lookahead(table: Vec<(Vec<TokenId>, f64)>) -> Self {
        Self {
            kind: ValueKind::Lookahead(LookaheadOracleValue::new(table.iter().map(|(s, u)| (s.as_slice(), *u)))),
        }
    }

    /// Hash-seeded noise in `[0, 1]`.
    #[staticmethod]
    fn uniform(seed: u64) -> Self {
        Self {
            kind: ValueKind::Uniform(UniformValue { seed }),
        }
    }

    /// Clamped estimate, as seen by the decoders.
    #[pyo3(signature = (prefix, context=Vec::new()))]
    fn estimate(&self, prefix: Vec<TokenId>, context: Vec<TokenId>) -> f64 {
        value::value_estimate(self, &context, &prefix, &mut CallCounters::default())
    }
}

fn decode_params(max_len: usize, num_beams: usize, seed: u64, length_normalize: bool) -> DecodeParams {
    DecodeParams {
        max_len,
        num_beams,
        seed,
        length_normalize_final: length_normalize,
        ..Default::default()
    }
}

#[pyfunction]
#[pyo3(signature = (lm, max_len=20, context=Vec::new()))]
fn greedy(py: Python<'_>, lm: &PyTabularLm, max_len: usize, context: Vec<TokenId>) -> PyResult<PyDecodeResult> {
    let p = decode_params(max_len, 1, 0, false);
    py.detach(|| decoders::greedy_decode(&lm.inner, &context, &p))
        .py()
        .map(Into::into)
}

#[pyfunction]
#[pyo3(signature = (lm, num_beams=5, max_len=20, context=Vec::new(), length_normalize=false))]
fn beam(
    py: Python<'_>,
    lm: &PyTabularLm,
    num_beams: usize,
    max_len: usize,
    context: Vec<TokenId>,
    length_normalize: bool,
) -> PyResult<PyDecodeResult> {
    let p = decode_params(max_len, num_beams, 0, length_normalize);
    py.detach(|| decoders::beam_decode(&lm.inner, &context, &p))
        .py()
        .map(Into::into)
}

#[pyfunction]
#[pyo3(signature = (lm, seed=0, max_len=20, temperature=1.0, top_k=0, top_p=1.0, context=Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn sample(
    py: Python<'_>,
    lm: &PyTabularLm,
    seed: u64,
    max_len: usize,
    temperature: f64,
    top_k: usize,
    top_p: f64,
    context: Vec<TokenId>,
) -> PyResult<PyDecodeResult> {
    let p = decode_params(max_len, 1, seed, false);
    let s = SamplerParams {
        temperature,
        top_k,
        top_p,
    };
    py.detach(|| decoders::sample_decode(&lm.inner, &context, &p, &s))
        .py()
        .map(Into::into)
}

/// `k` distinct sequences drawn without replacement.
#[pyfunction]
#[pyo3(signature = (lm, k=5, seed=0, max_len=20, context=Vec::new()))]
fn stochastic_beam(
    py: Python<'_>,
    lm: &PyTabularLm,
    k: usize,
    seed: u64,
    max_len: usize,
    context: Vec<TokenId>,
) -> PyResult<PyDecodeResult> {
    let p = decode_params(max_len, k, seed, false);
    py.detach(|| decoders::stochastic_beam_decode(&lm.inner, &context, &p))
        .py()
        .map(Into::into)
}

#[pyfunction]
#[pyo3(signature = (lm, value, alpha=0.5, num_beams=5, candidates_per_beam=10, max_len=20, context=Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn vgbs(
    py: Python<'_>,
    lm: &PyTabularLm,
    value: &PyValueModel,
    alpha: f64,
    num_beams: usize,
    candidates_per_beam: usize,
    max_len: usize,
    context: Vec<TokenId>,
) -> PyResult<PyDecodeResult> {
    let p = VgbsParams {
        decode: decode_params(max_len, num_beams, 0, false),
        candidates_per_beam,
        alpha,
    };
    py.detach(|| guided::vgbs_decode(&lm.inner, value, &context, &p))
        .py()
        .map(Into::into)
}

#[pyfunction]
#[pyo3(signature = (lm, value, simulations=50, c_puct=1.25, top_m=20, max_len=20, rollout=false, context=Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn mcts(
    py: Python<'_>,
    lm: &PyTabularLm,
    value: &PyValueModel,
    simulations: usize,
    c_puct: f64,
    top_m: usize,
    max_len: usize,
    rollout: bool,
    context: Vec<TokenId>,
) -> PyResult<PyDecodeResult> {
    let p = MctsParams {
        decode: decode_params(max_len, 1, 0, false),
        simulations,
        c_puct,
        top_m,
        leaf_eval: if rollout { LeafEval::RolloutGreedy } else { LeafEval::Value },
    };
    py.detach(|| guided::mcts_decode(&lm.inner, value, &context, &p))
        .py()
        .map(Into::into)
}

#[pyfunction]
#[pyo3(signature = (hypothesis, reference, smoothing=false))]
fn bleu4(hypothesis: Vec<TokenId>, reference: Vec<TokenId>, smoothing: bool) -> PyResult<f64> {
    metrics::bleu4(&hypothesis, &reference, smoothing).py()
}

/// `(r, two-sided p-value)`.
#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<(f64, f64)> {
    analysis::pearson(&x, &y).py()
}

#[pyfunction]
fn kendall_tau_b(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    analysis::kendall_tau_b(&x, &y).py()
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    analysis::spearman(&x, &y).py()
}

/// A random tabular LM with a planted rank correlation between
/// likelihood and utility.
#[pyclass(name = "MisalignedTask", module = "decode_align", frozen)]
pub struct PyMisalignedTask {
    inner: MisalignedTask,
}

#[pymethods]
impl PyMisalignedTask {
    #[new]
    #[pyo3(signature = (seed, vocab_size=4, max_len=4, rho=0.0))]
    fn new(seed: u64, vocab_size: usize, max_len: usize, rho: f64) -> PyResult<Self> {
        Ok(Self {
            inner: analysis::generate_misaligned_task(seed, vocab_size, max_len, rho).py()?,
        })
    }

    #[getter]
    fn lm(&self) -> PyTabularLm {
        PyTabularLm {
            inner: self.inner.lm.clone(),
        }
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.max_len
    }

    /// Measured Spearman correlation over the whole output space.
    #[getter]
    fn spearman(&self) -> f64 {
        self.inner.spearman
    }

    /// `(sequence, logprob, utility)` for every complete sequence.
    #[getter]
    fn table(&self) -> Vec<(Vec<TokenId>, f64, f64)> {
        self.inner
            .table
            .iter()
            .map(|r| (r.seq.clone(), r.logprob, r.utility))
            .collect()
    }

    fn utility(&self, seq: Vec<TokenId>) -> Option<f64> {
        self.inner.utility.table.get(&seq).copied()
    }

    fn utility_argmax(&self) -> Vec<TokenId> {
        self.inner.utility_argmax().to_vec()
    }

    fn oracle_value(&self) -> PyValueModel {
        PyValueModel {
            kind: ValueKind::Lookahead(self.inner.oracle_value()),
        }
    }
}

#[pymodule]
#[pyo3(name = "decode_align")]
fn decode_align_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DecodeAlignError", m.py().get_type::<DecodeAlignError>())?;
    m.add_class::<PyTabularLm>()?;
    m.add_class::<PyDecodeResult>()?;
    m.add_class::<PyValueModel>()?;
    m.add_class::<PyMisalignedTask>()?;
    m.add_function(wrap_pyfunction!(greedy, m)?)?;
    m.add_function(wrap_pyfunction!(beam, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(stochastic_beam, m)?)?;
    m.add_function(wrap_pyfunction!(vgbs, m)?)?;
    m.add_function(wrap_pyfunction!(mcts, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(kendall_tau_b, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    Ok(())
}

/// Builds the module object for embedding (used by tests).
pub fn init_module(py: Python<'_>) -> PyResult<Bound<'_, PyModule>> {
    let m = PyModule::new(py, "decode_align")?;
    decode_align_module(&m)?;
    Ok(m)
}
