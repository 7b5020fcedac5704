use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{AnalysisSpec, DecoderSpec, Quality, SweepDecoder, SweepOptions};
use crate::error::Error;
use crate::guided::{ALPHA_GRID, C_PUCT_GRID};
use crate::metrics::UtilitySpec;
use crate::models::{ngram_train, remote_connect, tabular_lm_load, LanguageModel, RemoteOptions};
use crate::value::ValueSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Tabular {
        path: PathBuf,
    },
    Ngram {
        corpus: PathBuf,
        order: usize,
        #[serde(default = "default_smoothing")]
        alpha: f64,
    },
    Remote {
        endpoint: String,
        /// HTTP endpoint serving `/vocab`, for stream-mode servers.
        #[serde(default)]
        vocab_endpoint: Option<String>,
    },
}

fn default_smoothing() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub decoders: Vec<SweepDecoder>,
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
    pub dev_size: usize,
    pub alpha_grid: Vec<f64>,
    pub c_puct_grid: Vec<f64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            decoders: vec![SweepDecoder::Beam, SweepDecoder::Vgbs],
            lambda: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            eta: Vec::new(),
            dev_size: 80,
            alpha_grid: ALPHA_GRID.to_vec(),
            c_puct_grid: C_PUCT_GRID.to_vec(),
        }
    }
}

impl SweepSpec {
    pub fn qualities(&self) -> Vec<Quality> {
        self.lambda
            .iter()
            .map(|&l| Quality::Lambda(l))
            .chain(self.eta.iter().map(|&e| Quality::Eta(e)))
            .collect()
    }
}

/// One experiment, fully described.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    pub decoder: DecoderSpec,
    pub utility: UtilitySpec,
    #[serde(default)]
    pub value: Option<ValueSpec>,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Invalid configuration; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl ExperimentConfig {
    /// Parses a TOML or JSON document (by extension), resolves relative
    /// paths against its directory and checks that referenced files exist.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = Self::parse(&text, is_json).map_err(|e| ConfigError(format!("{}: {}", path.display(), e.0)))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn parse(text: &str, is_json: bool) -> Result<Self, ConfigError> {
        if is_json {
            let de = &mut serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(de).map_err(|e| ConfigError(format!("at `{}`: {}", e.path(), e.inner())))
        } else {
            let de = toml::Deserializer::parse(text).map_err(|e| ConfigError(e.to_string()))?;
            serde_path_to_error::deserialize(de).map_err(|e| ConfigError(format!("at `{}`: {}", e.path(), e.inner())))
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.model {
            ModelSpec::Tabular { path } => fix(path),
            ModelSpec::Ngram { corpus, .. } => fix(corpus),
            ModelSpec::Remote { .. } => {}
        }
        if let Some(d) = &mut self.dataset {
            fix(d);
        }
        if let UtilitySpec::Lexicon { path: Some(p), .. } = &mut self.utility {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    fn check_files(&self) -> Result<(), ConfigError> {
        let mut files: Vec<(&str, &Path)> = Vec::new();
        match &self.model {
            ModelSpec::Tabular { path } => files.push(("model.path", path)),
            ModelSpec::Ngram { corpus, .. } => files.push(("model.corpus", corpus)),
            ModelSpec::Remote { .. } => {}
        }
        if let Some(d) = &self.dataset {
            files.push(("dataset", d));
        }
        if let UtilitySpec::Lexicon { path: Some(p), .. } = &self.utility {
            files.push(("utility.path", p));
        }
        for (field, p) in files {
            if !p.is_file() {
                return Err(ConfigError(format!("at `{field}`: file not found: {}", p.display())));
            }
        }
        Ok(())
    }

    pub fn load_model(&self) -> crate::Result<Box<dyn LanguageModel>> {
        Ok(match &self.model {
            ModelSpec::Tabular { path } => Box::new(tabular_lm_load(path)?),
            ModelSpec::Ngram { corpus, order, alpha } => {
                let text = std::fs::read_to_string(corpus).map_err(|e| Error::Load(format!("{}: {e}", corpus.display())))?;
                Box::new(ngram_train(&text, *order, *alpha, None)?)
            }
            ModelSpec::Remote {
                endpoint,
                vocab_endpoint,
            } => {
                let opts = RemoteOptions::default();
                let vocab = match vocab_endpoint {
                    Some(v) => {
                        let agent = ureq::Agent::config_builder()
                            .timeout_global(Some(opts.timeout))
                            .build()
                            .into();
                        Some(crate::models::remote::fetch_vocab(&agent, v.trim_end_matches('/'))?)
                    }
                    None => None,
                };
                Box::new(remote_connect(endpoint, vocab, opts)?)
            }
        })
    }

    pub fn sweep_options(&self, jobs: usize) -> SweepOptions {
        let s = self.sweep.clone().unwrap_or_default();
        SweepOptions {
            base: self.decoder.clone(),
            dev_size: s.dev_size,
            bootstrap: self.analysis.bootstrap,
            alpha_grid: s.alpha_grid,
            c_puct_grid: s.c_puct_grid,
            seed: self.seed,
            jobs,
        }
    }
}
