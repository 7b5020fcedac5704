use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{bootstrap_mean_ci, run_experiment, Dataset, DecoderKind, DecoderSpec, Experiment, MeanCi};
use crate::error::{Error, Result};
use crate::guided::{hyperparam_search, ALPHA_GRID, C_PUCT_GRID};
use crate::metrics::Utility;
use crate::models::LanguageModel;
use crate::value::{SpecValueSource, ValueSpec};

/// One point on the value-quality axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "level", rename_all = "snake_case")]
pub enum Quality {
    /// Interpolation weight on the true target.
    Lambda(f64),
    /// Corruption probability.
    Eta(f64),
}

impl Quality {
    fn value_spec(self, seed: u64) -> ValueSpec {
        match self {
            Self::Lambda(lambda) => ValueSpec::Interpolated { lambda, seed },
            Self::Eta(eta) => ValueSpec::Degraded { eta, seed },
        }
    }

    pub fn level(self) -> f64 {
        match self {
            Self::Lambda(v) | Self::Eta(v) => v,
        }
    }

    pub fn axis(self) -> &'static str {
        match self {
            Self::Lambda(_) => "lambda",
            Self::Eta(_) => "eta",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepDecoder {
    Beam,
    Vgbs,
    Mcts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    /// Shared decoder knobs (length, beams, K, S, top_m).
    pub base: DecoderSpec,
    /// Leading examples used for hyperparameter selection; the rest is the
    /// test split.
    pub dev_size: usize,
    pub bootstrap: usize,
    pub alpha_grid: Vec<f64>,
    pub c_puct_grid: Vec<f64>,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            base: DecoderSpec::default(),
            dev_size: 80,
            bootstrap: 10_000,
            alpha_grid: ALPHA_GRID.to_vec(),
            c_puct_grid: C_PUCT_GRID.to_vec(),
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub decoder: SweepDecoder,
    pub quality: Quality,
    /// Selected alpha or c_puct; `None` for beam search.
    pub selected: Option<f64>,
    pub n: usize,
    pub utility: MeanCi,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str = "decoder,axis,level,selected,n,mean_utility,ci_low,ci_high";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            match self.decoder {
                SweepDecoder::Beam => "beam",
                SweepDecoder::Vgbs => "vgbs",
                SweepDecoder::Mcts => "mcts",
            },
            self.quality.axis(),
            self.quality.level(),
            self.selected.map(|s| s.to_string()).unwrap_or_default(),
            self.n,
            self.utility.mean,
            self.utility.low,
            self.utility.high
        )
    }
}

struct Split<'a> {
    model: &'a dyn LanguageModel,
    utility: &'a Arc<dyn Utility>,
    opts: &'a SweepOptions,
}

impl Split<'_> {
    fn utilities(&self, spec: &DecoderSpec, data: &Dataset, value: Option<&ValueSpec>) -> Result<Vec<f64>> {
        let source = value
            .map(|v| SpecValueSource::new(v.clone(), self.utility.clone(), &data.references()))
            .transpose()?;
        let exp = Experiment {
            model: self.model,
            decoder: spec,
            utility: self.utility.as_ref(),
            values: source.as_ref().map(|s| s as &dyn crate::value::ValueSource),
            seed: self.opts.seed,
            jobs: self.opts.jobs,
        };
        let records = run_experiment(&exp, data)?;
        if let Some(bad) = records.iter().find(|r| !r.is_ok()) {
            return Err(Error::InvalidParameter(format!(
                "example {} failed during sweep: {}",
                bad.id,
                bad.error.as_deref().unwrap_or_default()
            )));
        }
        Ok(records.iter().map(|r| r.utility).collect())
    }

    fn mean(&self, spec: &DecoderSpec, data: &Dataset, value: Option<&ValueSpec>) -> Result<f64> {
        let u = self.utilities(spec, data, value)?;
        Ok(u.iter().sum::<f64>() / u.len().max(1) as f64)
    }
}

/// For each quality level and decoder: tune the decoder's free parameter
/// on the dev split, then report test-split mean utility with a 95%
/// percentile-bootstrap interval. Beam search has nothing to tune and
/// ignores the value model.
pub fn sweep_value_quality(
    model: &dyn LanguageModel,
    utility: Arc<dyn Utility>,
    dataset: &Dataset,
    decoders: &[SweepDecoder],
    qualities: &[Quality],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if decoders.is_empty() || qualities.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep needs at least one decoder and one quality level".into(),
        ));
    }
    let (dev, test) = dataset.split_at(opts.dev_size);
    if test.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "dataset of {} examples leaves no test split after {} dev examples",
            dataset.len(),
            opts.dev_size
        )));
    }
    let split = Split {
        model,
        utility: &utility,
        opts,
    };
    let beam_spec = DecoderSpec {
        kind: DecoderKind::Beam,
        ..opts.base.clone()
    };
    let mut beam_ci = None;
    let mut rows = Vec::new();
    for &quality in qualities {
        let value = quality.value_spec(opts.seed);
        for &decoder in decoders {
            let (spec, selected, value) = match decoder {
                SweepDecoder::Beam => (beam_spec.clone(), None, None),
                SweepDecoder::Vgbs | SweepDecoder::Mcts => {
                    let (kind, grid) = if decoder == SweepDecoder::Vgbs {
                        (DecoderKind::Vgbs, &opts.alpha_grid)
                    } else {
                        (DecoderKind::Mcts, &opts.c_puct_grid)
                    };
                    let with = |p: f64| {
                        let mut s = DecoderSpec {
                            kind,
                            ..opts.base.clone()
                        };
                        if kind == DecoderKind::Vgbs {
                            s.alpha = p;
                        } else {
                            s.c_puct = p;
                        }
                        s
                    };
                    let (best, _) = if dev.is_empty() {
                        (grid.iter().copied().fold(f64::INFINITY, f64::min), 0.0)
                    } else {
                        hyperparam_search(grid, |p| split.mean(&with(p), &dev, Some(&value)))?
                    };
                    (with(best), Some(best), Some(&value))
                }
            };
            let utility_ci = match (decoder, beam_ci) {
                (SweepDecoder::Beam, Some(ci)) => ci,
                _ => {
                    let u = split.utilities(&spec, &test, value)?;
                    let ci = bootstrap_mean_ci(&u, opts.bootstrap, opts.seed)?;
                    if decoder == SweepDecoder::Beam {
                        beam_ci = Some(ci);
                    }
                    ci
                }
            };
            rows.push(SweepRow {
                decoder,
                quality,
                selected,
                n: test.len(),
                utility: utility_ci,
            });
        }
    }
    Ok(rows)
}
