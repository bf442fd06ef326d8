//! Command orchestration: configuration resolution, artifact layout, and the
//! generate/train/eval/gradcheck/ablate/report pipelines. The CLI and the
//! Python bindings are both thin shells over this module.
//!
//! Artifact layout for a training run:
//!
//! ```text
//! <out>/config.toml        resolved configuration, hash in the first line
//! <out>/trace.jsonl        per-step sampler trace (meta line first)
//! <out>/runlog.jsonl       per-epoch summaries (meta line first)
//! <out>/checkpoint.bin     newest epoch-boundary snapshot
//! <out>/metrics_test.json  final test metrics (+ .txt rendering)
//! ```

use std::env;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::benchgen::{
    self, generate_benchmark, Benchmark, BenchmarkSpec, DataError, Split,
};
use crate::evaluator::{evaluate, EvalError, MetricsReport, RunMeta};
use crate::gradcheck::{op_names, run_gradcheck, GradcheckReport};
use crate::sampler::{SamplingStrategy, SelectionMode};
use crate::trainer::{
    Checkpoint, EpochSummary, InterpMode, NoopObserver, Precision, TraceRecord, TrainConfig,
    TrainError, TrainObserver, Trainer,
};

/// Environment variable naming the default root for output directories.
pub const ENV_OUT_ROOT: &str = "SPHERECAL_OUT";
pub const TRACE_SCHEMA: &str = "trace/v1";
pub const RUNLOG_SCHEMA: &str = "runlog/v1";

#[derive(Debug, Error)]
pub enum RunError {
    /// Bad usage or configuration; callers should exit with status 1.
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Process exit status: 1 for usage/config problems, 2 for failures at
    /// runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            _ => 2,
        }
    }
}

fn config_err(e: impl fmt::Display) -> RunError {
    RunError::Config(e.to_string())
}

/// On-disk run configuration: experiment name, benchmark location, optional
/// output override, and the full training configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    /// Benchmark JSONL produced by `generate`.
    pub benchmark: Option<PathBuf>,
    /// Output directory. Precedence: `--out` flag, this field,
    /// `$SPHERECAL_OUT/<name>`, `./runs/<name>`.
    pub out: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "run".to_string(),
            benchmark: None,
            out: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Config(format!("bad run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML with every field resolved.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Hash of the experiment identity. The output path is excluded: moving
    /// a run's artifacts must not change what experiment they describe.
    pub fn config_hash(&self) -> String {
        let mut identity = self.clone();
        identity.out = None;
        hex_digest(identity.to_toml().as_bytes())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Sampling strategies selectable from the command line. `GgasNosize` keeps
/// difficulty scoring but zeroes the dataset-size exponent.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingChoice {
    Random,
    Ggas,
    GgasNosize,
}

/// Named model/sampler variants for ablation runs. `None` is the plain dual
/// encoder with size-proportional sampling; `GgasOnly` adds difficulty-aware
/// sampling but no calibration; the rest pick a calibrator wiring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationChoice {
    None,
    GgasOnly,
    ProposalOnly,
    Linear,
    Slerp,
    Shared,
}

pub fn apply_sampling(train: &mut TrainConfig, choice: SamplingChoice) {
    match choice {
        SamplingChoice::Random => train.sampler.strategy = SamplingStrategy::Random,
        SamplingChoice::Ggas => train.sampler.strategy = SamplingStrategy::Ggas,
        SamplingChoice::GgasNosize => {
            train.sampler.strategy = SamplingStrategy::Ggas;
            train.sampler.gamma = 0.0;
        }
    }
}

pub fn apply_ablation(train: &mut TrainConfig, choice: AblationChoice) {
    let set_interp = |train: &mut TrainConfig, mode, shared| {
        train.ablation.use_calibrator = true;
        train.ablation.interp_mode = mode;
        train.ablation.shared_params = shared;
    };
    match choice {
        AblationChoice::None => {
            train.ablation.use_calibrator = false;
            train.ablation.interp_mode = InterpMode::None;
            train.ablation.shared_params = false;
            train.sampler.strategy = SamplingStrategy::Random;
        }
        AblationChoice::GgasOnly => {
            train.ablation.use_calibrator = false;
            train.ablation.interp_mode = InterpMode::None;
            train.ablation.shared_params = false;
            train.sampler.strategy = SamplingStrategy::Ggas;
        }
        AblationChoice::ProposalOnly => set_interp(train, InterpMode::ProposalOnly, false),
        AblationChoice::Linear => set_interp(train, InterpMode::Linear, false),
        AblationChoice::Slerp => set_interp(train, InterpMode::Slerp, false),
        AblationChoice::Shared => set_interp(train, InterpMode::Slerp, true),
    }
}

/// Command-line overrides layered on top of the config file. Ablation is
/// applied first so an explicit `--sampling` or `--selection` flag wins over
/// whatever the ablation preset implies.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub sampling: Option<SamplingChoice>,
    pub selection: Option<SelectionMode>,
    pub ablation: Option<AblationChoice>,
    pub precision: Option<Precision>,
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(a) = self.ablation {
            apply_ablation(&mut config.train, a);
        }
        if let Some(s) = self.sampling {
            apply_sampling(&mut config.train, s);
        }
        if let Some(sel) = self.selection {
            config.train.sampler.selection = sel;
        }
        if let Some(p) = self.precision {
            config.train.precision = p;
        }
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out = Some(out.clone());
        }
    }
}

fn resolve_out_with(config: &RunConfig, env_root: Option<&str>) -> PathBuf {
    if let Some(out) = &config.out {
        return out.clone();
    }
    if let Some(root) = env_root.filter(|r| !r.is_empty()) {
        return Path::new(root).join(&config.name);
    }
    PathBuf::from("runs").join(&config.name)
}

/// Output directory for a run, honoring `$SPHERECAL_OUT`.
pub fn resolve_out(config: &RunConfig) -> PathBuf {
    resolve_out_with(config, env::var(ENV_OUT_ROOT).ok().as_deref())
}

fn default_out(name: &str) -> PathBuf {
    resolve_out(&RunConfig {
        name: name.to_string(),
        ..RunConfig::default()
    })
}

fn load_benchmark(path: &Path) -> Result<Benchmark, RunError> {
    benchgen::load_jsonl(path)
        .map_err(|e| RunError::Config(format!("cannot load benchmark {}: {e}", path.display())))
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
        Split::Gallery => "gallery",
    }
}

fn write_resolved_config(dir: &Path, config: &RunConfig, hash: &str) -> Result<PathBuf, RunError> {
    let mut resolved = config.clone();
    resolved.out = Some(dir.to_path_buf());
    let path = dir.join("config.toml");
    fs::write(&path, format!("# config_hash: {hash}\n{}", resolved.to_toml()))?;
    Ok(path)
}

fn write_metrics(
    dir: &Path,
    stem: &str,
    metrics: &MetricsReport,
) -> Result<(PathBuf, PathBuf), RunError> {
    let json_path = dir.join(format!("{stem}.json"));
    let text_path = dir.join(format!("{stem}.txt"));
    fs::write(&json_path, metrics.to_json())?;
    fs::write(&text_path, format!("{metrics}"))?;
    Ok((json_path, text_path))
}

#[derive(Serialize)]
struct MetaLine<'a> {
    schema: &'a str,
    config_hash: &'a str,
    seed: u64,
}

fn open_log(path: &Path, append: bool) -> std::io::Result<(BufWriter<File>, bool)> {
    let existed = path.exists();
    let file = if append && existed {
        OpenOptions::new().append(true).open(path)?
    } else {
        File::create(path)?
    };
    Ok((BufWriter::new(file), !(append && existed)))
}

/// Streams trace and run-log lines to disk and keeps `checkpoint.bin` at the
/// newest epoch boundary.
pub struct ArtifactWriter {
    dir: PathBuf,
    config_hash: String,
    trace: BufWriter<File>,
    runlog: BufWriter<File>,
}

impl ArtifactWriter {
    pub fn create(dir: &Path, config_hash: &str, seed: u64, append: bool) -> Result<Self, RunError> {
        fs::create_dir_all(dir)?;
        let mut writers = Vec::new();
        for (name, schema) in [("trace.jsonl", TRACE_SCHEMA), ("runlog.jsonl", RUNLOG_SCHEMA)] {
            let (mut w, fresh) = open_log(&dir.join(name), append)?;
            if fresh {
                let meta = MetaLine {
                    schema,
                    config_hash,
                    seed,
                };
                writeln!(w, "{}", serde_json::to_string(&meta).expect("meta serializes"))?;
            }
            writers.push(w);
        }
        let runlog = writers.pop().expect("two writers");
        let trace = writers.pop().expect("two writers");
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            trace,
            runlog,
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }
}

impl TrainObserver for ArtifactWriter {
    fn on_step(&mut self, record: &TraceRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).expect("trace record serializes");
        writeln!(self.trace, "{line}")?;
        Ok(())
    }

    fn on_epoch(&mut self, summary: &EpochSummary, trainer: &Trainer) -> Result<(), TrainError> {
        let line = serde_json::to_string(summary).expect("epoch summary serializes");
        writeln!(self.runlog, "{line}")?;
        self.trace.flush()?;
        self.runlog.flush()?;
        trainer
            .snapshot(&self.config_hash, false)
            .save(&self.checkpoint_path())
    }

    fn on_abort(&mut self, trainer: &Trainer) {
        // Crash path: flush what we have and drop a mid-epoch snapshot next
        // to (not over) the last good checkpoint.
        let _ = self.trace.flush();
        let _ = self.runlog.flush();
        let _ = trainer
            .snapshot(&self.config_hash, true)
            .save(&self.dir.join("checkpoint.partial.bin"));
    }
}

#[derive(Clone, Debug, Default)]
pub struct GenerateArgs {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct GenerateOutcome {
    pub out_dir: PathBuf,
    pub benchmark_path: PathBuf,
    pub spec_path: PathBuf,
    pub datasets: usize,
    pub records: usize,
}

pub fn preset_spec(name: &str, seed: u64) -> Result<BenchmarkSpec, RunError> {
    match name {
        "multitask-mini" => Ok(BenchmarkSpec::multitask_mini(seed)),
        "lambda-scale" => Ok(BenchmarkSpec::lambda_scale(seed)),
        other => Err(RunError::Config(format!(
            "unknown preset '{other}' (expected 'multitask-mini' or 'lambda-scale')"
        ))),
    }
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateOutcome, RunError> {
    let default_seed = TrainConfig::default().seed;
    let mut spec = match (&args.config, args.preset.as_deref()) {
        (Some(path), None) => {
            let text = fs::read_to_string(path).map_err(|e| {
                RunError::Config(format!("cannot read spec {}: {e}", path.display()))
            })?;
            BenchmarkSpec::from_toml(&text)
                .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(preset)) => preset_spec(preset, default_seed)?,
        (Some(_), Some(_)) => {
            return Err(RunError::Config(
                "pass either --config or --preset, not both".to_string(),
            ))
        }
        (None, None) => {
            return Err(RunError::Config(
                "generate needs --config SPEC.toml or --preset NAME".to_string(),
            ))
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(config_err)?;

    let out_dir = args.out.clone().unwrap_or_else(|| default_out(&spec.name));
    fs::create_dir_all(&out_dir)?;
    let benchmark = generate_benchmark(&spec)?;
    let benchmark_path = out_dir.join("benchmark.jsonl");
    benchgen::save_jsonl(&benchmark, &benchmark_path)?;
    let spec_path = out_dir.join("spec.toml");
    fs::write(&spec_path, spec.to_toml())?;
    let records = benchmark
        .datasets
        .iter()
        .map(|d| d.train.len() + d.val.len() + d.test.len() + d.gallery.len())
        .sum();
    Ok(GenerateOutcome {
        out_dir,
        benchmark_path,
        spec_path,
        datasets: benchmark.datasets.len(),
        records,
    })
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub overrides: Overrides,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub epochs_run: usize,
    pub final_metrics: MetricsReport,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary, RunError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    args.overrides.apply(&mut config);

    let benchmark_path = config.benchmark.clone().ok_or_else(|| {
        RunError::Config(
            "config has no `benchmark` path; run `generate` first and point at its JSONL"
                .to_string(),
        )
    })?;
    let benchmark = load_benchmark(&benchmark_path)?;
    // Reject bad configurations before any compute happens.
    config.train.validate(&benchmark).map_err(config_err)?;

    let hash = config.config_hash();
    let out_dir = resolve_out(&config);
    fs::create_dir_all(&out_dir)?;

    let mut trainer = match &args.resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path).map_err(|e| {
                RunError::Config(format!("cannot resume from {}: {e}", ckpt_path.display()))
            })?;
            let same = toml::to_string(&ckpt.config).ok() == toml::to_string(&config.train).ok();
            if !same {
                return Err(RunError::Config(
                    "checkpoint was written under a different training configuration; \
                     resume with the original config and flags"
                        .to_string(),
                ));
            }
            Trainer::resume(ckpt, &benchmark).map_err(config_err)?
        }
        None => Trainer::new(&benchmark, config.train.clone()).map_err(config_err)?,
    };

    write_resolved_config(&out_dir, &config, &hash)?;
    let mut writer =
        ArtifactWriter::create(&out_dir, &hash, config.train.seed, args.resume.is_some())?;
    let outcome = trainer.train(&benchmark, &hash, &mut writer)?;

    let meta = RunMeta {
        seed: config.train.seed,
        config_hash: hash.clone(),
        step: trainer.global_step(),
    };
    let metrics = evaluate(&trainer.model, &trainer.store, &benchmark, Split::Test, &meta)?;
    write_metrics(&out_dir, "metrics_test", &metrics)?;
    Ok(TrainSummary {
        out_dir,
        config_hash: hash,
        epochs_run: outcome.epochs.len(),
        final_metrics: metrics,
    })
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub benchmark: PathBuf,
    pub split: Split,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct EvalSummary {
    pub metrics: MetricsReport,
    pub json_path: PathBuf,
    pub text_path: PathBuf,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary, RunError> {
    let ckpt = Checkpoint::load(&args.checkpoint).map_err(|e| {
        RunError::Config(format!(
            "cannot load checkpoint {}: {e}",
            args.checkpoint.display()
        ))
    })?;
    let benchmark = load_benchmark(&args.benchmark)?;
    let meta = RunMeta {
        seed: ckpt.config.seed,
        config_hash: ckpt.config_hash.clone(),
        step: ckpt.global_step,
    };
    let metrics = evaluate(&ckpt.model, &ckpt.store, &benchmark, args.split, &meta)?;
    let out_dir = args.out.clone().unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf()
    });
    fs::create_dir_all(&out_dir)?;
    let stem = format!("metrics_{}", split_name(args.split));
    let (json_path, text_path) = write_metrics(&out_dir, &stem, &metrics)?;
    Ok(EvalSummary {
        metrics,
        json_path,
        text_path,
    })
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckArgs {
    /// Test hook: deliberately corrupt the analytic gradient of one op to
    /// prove the checker notices.
    pub corrupt_op: Option<String>,
    pub out: Option<PathBuf>,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<GradcheckReport, RunError> {
    if let Some(op) = args.corrupt_op.as_deref() {
        if !op_names().contains(&op) {
            return Err(RunError::Config(format!(
                "unknown op '{op}'; expected one of {:?}",
                op_names()
            )));
        }
    }
    let report = run_gradcheck(args.corrupt_op.as_deref());
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
        json.push('\n');
        fs::write(dir.join("gradcheck.json"), json)?;
        fs::write(dir.join("gradcheck.txt"), format!("{report}"))?;
    }
    Ok(report)
}

/// The ablation grid: every calibration variant crossed with the sampling
/// treatments that distinguish them. `q0_random` is the no-contribution
/// baseline; `full` is slerp calibration plus difficulty-aware sampling.
pub const ABLATION_VARIANTS: [(&str, AblationChoice, Option<SamplingChoice>); 7] = [
    ("q0_random", AblationChoice::None, None),
    ("q0_ggas", AblationChoice::GgasOnly, None),
    ("proposal_only", AblationChoice::ProposalOnly, None),
    ("linear", AblationChoice::Linear, None),
    ("slerp_nosize", AblationChoice::Slerp, Some(SamplingChoice::GgasNosize)),
    ("shared", AblationChoice::Shared, None),
    ("full", AblationChoice::Slerp, None),
];

pub const ABLATION_SEEDS: u64 = 3;

#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub variant: String,
    pub seed: u64,
    pub per_dataset_mr: Vec<f64>,
    pub mean_mr: f64,
    /// Mean test-time interpolation weight per dataset; `None` when the
    /// variant has no calibrator.
    pub mean_lambda: Vec<Option<f64>>,
}

#[derive(Debug)]
pub struct AblateSummary {
    pub out_dir: PathBuf,
    pub csv_path: PathBuf,
    pub dataset_count: usize,
    pub cells: Vec<AblationCell>,
}

impl AblateSummary {
    /// Cells for one variant, in seed order.
    pub fn variant(&self, name: &str) -> Vec<&AblationCell> {
        self.cells.iter().filter(|c| c.variant == name).collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct AblateArgs {
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
}

fn ablation_csv(hash: &str, dataset_count: usize, cells: &[AblationCell]) -> String {
    let mut out = format!("# config_hash={hash}\n");
    out.push_str("variant,seed");
    for k in 0..dataset_count {
        out.push_str(&format!(",mr_{k}"));
    }
    out.push_str(",mean_mr");
    for k in 0..dataset_count {
        out.push_str(&format!(",lambda_{k}"));
    }
    out.push('\n');
    for cell in cells {
        out.push_str(&format!("{},{}", cell.variant, cell.seed));
        for v in &cell.per_dataset_mr {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{:?}", cell.mean_mr));
        for l in &cell.mean_lambda {
            match l {
                Some(v) => out.push_str(&format!(",{v:?}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Trains every grid cell to completion and consolidates test metrics into
/// one CSV. Cells share data and initialization at equal seeds, so rows are
/// directly comparable; when no benchmark file is configured each seed
/// regenerates the default multi-task benchmark from that seed.
pub fn cmd_ablate(args: &AblateArgs) -> Result<AblateSummary, RunError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig {
            name: "ablate".to_string(),
            ..RunConfig::default()
        },
    };
    args.overrides.apply(&mut config);

    let fixed_benchmark = match &config.benchmark {
        Some(path) => Some(load_benchmark(path)?),
        None => None,
    };
    let root_seed = config.train.seed;
    let hash = config.config_hash();
    let out_dir = resolve_out(&config);
    fs::create_dir_all(&out_dir)?;
    write_resolved_config(&out_dir, &config, &hash)?;

    let mut cells = Vec::new();
    let mut dataset_count = 0;
    for (name, ablation, sampling) in ABLATION_VARIANTS {
        for offset in 0..ABLATION_SEEDS {
            let seed = root_seed + offset;
            let generated;
            let benchmark = match &fixed_benchmark {
                Some(b) => b,
                None => {
                    generated = generate_benchmark(&BenchmarkSpec::multitask_mini(seed))?;
                    &generated
                }
            };
            dataset_count = benchmark.datasets.len();

            let mut train = config.train.clone();
            train.seed = seed;
            apply_ablation(&mut train, ablation);
            if let Some(s) = sampling {
                apply_sampling(&mut train, s);
            }
            train
                .validate(benchmark)
                .map_err(|e| RunError::Config(format!("variant {name}, seed {seed}: {e}")))?;

            let mut trainer = Trainer::new(benchmark, train).map_err(config_err)?;
            trainer.train(benchmark, &hash, &mut NoopObserver)?;
            let meta = RunMeta {
                seed,
                config_hash: hash.clone(),
                step: trainer.global_step(),
            };
            let metrics = evaluate(&trainer.model, &trainer.store, benchmark, Split::Test, &meta)?;
            cells.push(AblationCell {
                variant: name.to_string(),
                seed,
                per_dataset_mr: metrics.per_dataset.iter().map(|d| d.mean_recall).collect(),
                mean_mr: metrics.macro_mean_recall,
                mean_lambda: metrics.per_dataset.iter().map(|d| d.mean_lambda).collect(),
            });
        }
    }

    let csv_path = out_dir.join("ablation.csv");
    fs::write(&csv_path, ablation_csv(&hash, dataset_count, &cells))?;
    Ok(AblateSummary {
        out_dir,
        csv_path,
        dataset_count,
        cells,
    })
}

#[derive(Clone, Debug)]
pub struct ReportArgs {
    pub dir: PathBuf,
}

/// Renders a read-only summary of whatever artifacts a run directory holds.
pub fn cmd_report(args: &ReportArgs) -> Result<String, RunError> {
    let dir = &args.dir;
    if !dir.is_dir() {
        return Err(RunError::Config(format!(
            "no such run directory: {}",
            dir.display()
        )));
    }
    let mut sections = Vec::new();

    let config_path = dir.join("config.toml");
    if config_path.exists() {
        let text = fs::read_to_string(&config_path)?;
        sections.push(format!("== config ({})\n{text}", config_path.display()));
    }

    let runlog_path = dir.join("runlog.jsonl");
    if runlog_path.exists() {
        let text = fs::read_to_string(&runlog_path)?;
        let mut lines = Vec::new();
        for line in text.lines().skip(1) {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| RunError::Config(format!("malformed run log line: {e}")))?;
            let epoch = v["epoch"].as_u64().unwrap_or(0);
            let loss = v["mean_loss"]["total"].as_f64().unwrap_or(f64::NAN);
            let mr = v["val"]["macro_mean_recall"].as_f64().unwrap_or(f64::NAN);
            lines.push(format!("epoch {epoch}: mean loss {loss:.6}, val mR {mr:.2}"));
        }
        sections.push(format!("== training ({} epochs)\n{}", lines.len(), lines.join("\n")));
    }

    for split in ["train", "val", "test"] {
        let path = dir.join(format!("metrics_{split}.txt"));
        if path.exists() {
            sections.push(format!("== metrics: {split}\n{}", fs::read_to_string(&path)?));
        }
    }

    let csv_path = dir.join("ablation.csv");
    if csv_path.exists() {
        sections.push(format!("== ablation\n{}", fs::read_to_string(&csv_path)?));
    }

    let gradcheck_path = dir.join("gradcheck.txt");
    if gradcheck_path.exists() {
        sections.push(format!(
            "== gradient check\n{}",
            fs::read_to_string(&gradcheck_path)?
        ));
    }

    if sections.is_empty() {
        return Err(RunError::Config(format!(
            "{} holds no recognizable artifacts",
            dir.display()
        )));
    }
    Ok(sections.join("\n"))
}
