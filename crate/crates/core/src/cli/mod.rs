//! Command-line front end: config-driven experiment runs plus analysis
//! and server conformance tools.

mod config;
mod protocheck;

pub use config::{ConfigError, ExperimentConfig, ModelSpec, SweepSpec};
pub use protocheck::{protocheck, RuleResult};

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    brute_force_oracle, candidate_alignment, hexbin, read_records, record_points, run_experiment_with, sweep_value_quality,
    AnalysisSpec, Dataset, Experiment, RunRecord, Summary, SweepRow, SUMMARY_HEADER,
};
use crate::metrics::{TextUtility, Utility};
use crate::models::LanguageModel;
use crate::value::{SpecValueSource, ValueSource};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const PARTIAL_FILE: &str = "results.partial.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Parser)]
#[command(
    name = "decode-align",
    version,
    about = "Decode, score and analyze likelihood/utility alignment"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (.toml or .json).
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads across examples.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode every dataset example and write results and summary files.
    Decode {
        #[command(flatten)]
        run: RunArgs,
        /// Skip examples already present in the partial results file.
        #[arg(long)]
        resume: bool,
    },
    /// Mean utility per decoder across value-model quality levels.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Exhaustive likelihood and utility argmaxes per example.
    Oracle {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Recompute aggregates and hexbin exports from results files.
    Analyze {
        /// `results.jsonl` files written by `decode`.
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
        /// Hexagons across the x range.
        #[arg(long, default_value_t = 20)]
        nx: usize,
        /// Candidates per example for the rank correlation.
        #[arg(long, default_value_t = 5)]
        top_c: usize,
        /// Bootstrap resamples for confidence intervals.
        #[arg(long, default_value_t = 10_000)]
        bootstrap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check a model server against the wire protocol.
    Protocheck {
        /// HTTP base URL of the server.
        endpoint: String,
        /// Optional `tcp://host:port` of the same server's stream mode.
        #[arg(long)]
        stream: Option<String>,
        /// Per-request timeout.
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
    },
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.0)
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<i32, CliError> {
    match command {
        Command::Decode { run, resume } => cmd_decode(&run, resume, out),
        Command::Sweep { run } => cmd_sweep(&run, out),
        Command::Oracle { run } => cmd_oracle(&run, out),
        Command::Analyze {
            results,
            out: dir,
            nx,
            top_c,
            bootstrap,
            seed,
        } => cmd_analyze(&results, &dir, &AnalysisSpec { top_c, nx, bootstrap }, seed, out),
        Command::Protocheck {
            endpoint,
            stream,
            timeout_secs,
        } => {
            let results = protocheck(&endpoint, stream.as_deref(), Duration::from_secs(timeout_secs));
            for r in &results {
                writeln!(out, "{r}").map_err(runtime_err)?;
            }
            let all = results.len() == 4 && results.iter().all(|r| r.passed);
            Ok(if all { EXIT_OK } else { EXIT_RUNTIME })
        }
    }
}

/// A loaded experiment: config plus everything it references.
struct Loaded {
    cfg: ExperimentConfig,
    model: Box<dyn LanguageModel>,
    utility: Arc<dyn Utility>,
    dataset: Option<Dataset>,
}

fn load(run: &RunArgs) -> Result<Loaded, CliError> {
    let mut cfg = ExperimentConfig::load(&run.config)?;
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(o) = &run.out {
        cfg.output_dir = o.clone();
    }
    let model = cfg.load_model().map_err(|e| match cfg.model {
        ModelSpec::Remote { .. } => runtime_err(e),
        _ => config_err(format!("at `model`: {e}")),
    })?;
    let vocab = model.vocab();
    cfg.decoder
        .validate(vocab)
        .map_err(|e| config_err(format!("at `decoder`: {e}")))?;
    let utility: Arc<dyn Utility> =
        Arc::new(TextUtility::resolve(&cfg.utility, vocab).map_err(|e| config_err(format!("at `utility`: {e}")))?);
    if let Some(v) = &cfg.value {
        v.validate().map_err(|e| config_err(format!("at `value`: {e}")))?;
    }
    let dataset = cfg
        .dataset
        .as_ref()
        .map(|p| Dataset::load(p, vocab))
        .transpose()
        .map_err(|e| config_err(format!("at `dataset`: {e}")))?;
    Ok(Loaded {
        cfg,
        model,
        utility,
        dataset,
    })
}

fn require_dataset(l: &Loaded) -> Result<&Dataset, CliError> {
    l.dataset
        .as_ref()
        .ok_or_else(|| config_err("at `dataset`: this command needs a dataset"))
}

/// Records already flushed by an interrupted run. A torn last line is dropped.
fn read_partial(path: &Path) -> Result<Vec<RunRecord>, CliError> {
    let Ok(file) = File::open(path) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(runtime_err)?;
        match serde_json::from_str::<RunRecord>(&line) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
    }
    Ok(out)
}

fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<(), CliError> {
    let mut text = String::new();
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| runtime_err(format!("{}: {e}", path.display())))
}

fn cmd_decode(run: &RunArgs, resume: bool, out: &mut dyn Write) -> Result<i32, CliError> {
    let l = load(run)?;
    let dataset = require_dataset(&l)?;
    let cfg = &l.cfg;
    if cfg.decoder.kind.needs_value() && cfg.value.is_none() {
        return Err(config_err(format!(
            "at `value`: decoder {} needs a value model",
            cfg.decoder.kind.name()
        )));
    }
    let values = cfg
        .value
        .clone()
        .map(|v| SpecValueSource::new(v, l.utility.clone(), &dataset.references()))
        .transpose()
        .map_err(|e| config_err(format!("at `value`: {e}")))?;

    fs::create_dir_all(&cfg.output_dir).map_err(|e| runtime_err(format!("{}: {e}", cfg.output_dir.display())))?;
    let partial_path = cfg.output_dir.join(PARTIAL_FILE);
    let previous = if resume { read_partial(&partial_path)? } else { Vec::new() };
    let done: HashSet<String> = previous.iter().map(|r| r.id.clone()).collect();
    // Rewrite the partial file so a torn tail line never survives.
    write_lines(
        &partial_path,
        previous.iter().map(|r| serde_json::to_string(r).expect("record serializes")),
    )?;
    let partial = Mutex::new(
        OpenOptions::new()
            .append(true)
            .open(&partial_path)
            .map_err(|e| runtime_err(format!("{}: {e}", partial_path.display())))?,
    );

    let exp = Experiment {
        model: l.model.as_ref(),
        decoder: &cfg.decoder,
        utility: l.utility.as_ref(),
        values: values.as_ref().map(|v| v as &dyn ValueSource),
        seed: cfg.seed,
        jobs: run.jobs,
    };
    let fresh = run_experiment_with(&exp, dataset, &done, &|r| {
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        let mut f = partial.lock().unwrap_or_else(|p| p.into_inner());
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    })
    .map_err(runtime_err)?;

    let wanted: HashSet<&str> = dataset.examples().iter().map(|e| e.id.as_str()).collect();
    let mut records: Vec<RunRecord> = previous
        .into_iter()
        .filter(|r| wanted.contains(r.id.as_str()))
        .chain(fresh)
        .collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    write_lines(
        &cfg.output_dir.join(RESULTS_FILE),
        records.iter().map(|r| serde_json::to_string(r).expect("record serializes")),
    )?;

    let failed: Vec<&RunRecord> = records.iter().filter(|r| !r.is_ok()).collect();
    let summary = Summary::compute(
        &records,
        cfg.decoder.kind.name(),
        &cfg.decoder.digest(),
        &cfg.analysis,
        cfg.seed,
    );
    if let Ok(s) = &summary {
        write_lines(&cfg.output_dir.join(SUMMARY_FILE), [SUMMARY_HEADER.to_owned(), s.csv_row()])?;
        writeln!(out, "{SUMMARY_HEADER}\n{}", s.csv_row()).map_err(runtime_err)?;
    }
    if failed.is_empty() {
        let _ = fs::remove_file(&partial_path);
        Ok(EXIT_OK)
    } else {
        Err(CliError::Runtime(format!(
            "{} of {} examples failed (first: {}: {}); results kept in {}",
            failed.len(),
            records.len(),
            failed[0].id,
            failed[0].error.as_deref().unwrap_or_default(),
            cfg.output_dir.display()
        )))
    }
}

fn cmd_sweep(run: &RunArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let l = load(run)?;
    let dataset = require_dataset(&l)?;
    let cfg = &l.cfg;
    let spec = cfg.sweep.clone().unwrap_or_default();
    let qualities = spec.qualities();
    let rows: Vec<SweepRow> = sweep_value_quality(
        l.model.as_ref(),
        l.utility.clone(),
        dataset,
        &spec.decoders,
        &qualities,
        &cfg.sweep_options(run.jobs),
    )
    .map_err(runtime_err)?;
    fs::create_dir_all(&cfg.output_dir).map_err(runtime_err)?;
    let lines: Vec<String> = std::iter::once(SweepRow::CSV_HEADER.to_owned())
        .chain(rows.iter().map(SweepRow::csv_row))
        .collect();
    write_lines(&cfg.output_dir.join("sweep.csv"), lines.clone())?;
    for l in lines {
        writeln!(out, "{l}").map_err(runtime_err)?;
    }
    Ok(EXIT_OK)
}

fn cmd_oracle(run: &RunArgs, out: &mut dyn Write) -> Result<i32, CliError> {
    let l = load(run)?;
    let cfg = &l.cfg;
    let vocab = l.model.vocab();
    let inputs: Vec<(String, Vec<usize>, Vec<usize>)> = match &l.dataset {
        Some(d) => d
            .examples()
            .iter()
            .map(|e| (e.id.clone(), e.context.clone(), e.reference.clone()))
            .collect(),
        None => vec![("-".into(), Vec::new(), Vec::new())],
    };
    let mut table = vec!["id,sequence,logprob,utility".to_owned()];
    for (id, context, reference) in inputs {
        let o = brute_force_oracle(
            l.model.as_ref(),
            l.utility.as_ref(),
            &reference,
            &context,
            cfg.decoder.max_len,
        )
        .map_err(|e| runtime_err(format!("{id}: {e}")))?;
        writeln!(
            out,
            "{id}: argmax_likelihood = \"{}\" argmax_utility = \"{}\"",
            vocab.decode(&o.argmax_likelihood),
            vocab.decode(&o.argmax_utility)
        )
        .map_err(runtime_err)?;
        table.extend(
            o.table
                .iter()
                .map(|r| format!("{id},{},{},{}", vocab.decode(&r.seq), r.logprob, r.utility)),
        );
    }
    fs::create_dir_all(&cfg.output_dir).map_err(runtime_err)?;
    write_lines(&cfg.output_dir.join("oracle.csv"), table)?;
    Ok(EXIT_OK)
}

fn cmd_analyze(files: &[PathBuf], dir: &Path, spec: &AnalysisSpec, seed: u64, out: &mut dyn Write) -> Result<i32, CliError> {
    let mut groups: BTreeMap<(String, String), Vec<RunRecord>> = BTreeMap::new();
    for f in files {
        let name = |p: Option<&std::ffi::OsStr>| p.map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let parent = name(f.parent().and_then(Path::file_name));
        let stem = match parent.as_str() {
            "" => name(f.file_stem()),
            p => format!("{p}_{}", name(f.file_stem())),
        };
        for r in read_records(f).map_err(config_err)? {
            groups.entry((stem.clone(), r.decoder.clone())).or_default().push(r);
        }
    }
    fs::create_dir_all(dir).map_err(runtime_err)?;
    let mut lines = vec![SUMMARY_HEADER.to_owned()];
    for ((stem, decoder), mut records) in groups {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        let Ok(summary) = Summary::compute(&records, &decoder, &stem, spec, seed) else {
            continue;
        };
        lines.push(summary.csv_row());
        let ok: Vec<RunRecord> = records.into_iter().filter(RunRecord::is_ok).collect();
        let points = record_points(&ok);
        let counts = hexbin(&points, None, spec.nx).map_err(runtime_err)?;
        write_lines(
            &dir.join(format!("{stem}_{decoder}_hexbin.csv")),
            counts.to_csv().lines().map(str::to_owned),
        )?;
        let taus = candidate_alignment(&ok, spec.top_c).taus;
        let (tau_points, tau_values): (Vec<(f64, f64)>, Vec<f64>) =
            points.iter().zip(&taus).filter_map(|(p, t)| t.map(|t| (*p, t))).unzip();
        if !tau_points.is_empty() {
            let grid = hexbin(&tau_points, Some(&tau_values), spec.nx).map_err(runtime_err)?;
            write_lines(
                &dir.join(format!("{stem}_{decoder}_tau_hexbin.csv")),
                grid.to_csv().lines().map(str::to_owned),
            )?;
        }
    }
    write_lines(&dir.join(SUMMARY_FILE), lines.clone())?;
    for l in lines {
        writeln!(out, "{l}").map_err(runtime_err)?;
    }
    Ok(EXIT_OK)
}
