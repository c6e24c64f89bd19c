//! Command-line surface: dataset synthesis, training, evaluation, category
//! selection, and report rendering.
//!
//! Exit codes are stable: 0 ok, 2 usage/config, 3 dimension mismatch,
//! 4 degenerate data, 5 invalid similarity matrix, 1 anything else.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineConfig, BaselineModel, BaselineStrategy};
use crate::data::{
    gen_synthetic, rank_categories, write_atomic, CategoryRanking, ModalityDims, MultimodalDataset,
    Role, SimilarityMatrix, SynthMode, SynthSpec,
};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ModelConfig};
use crate::metrics::MetricReport;
use crate::model_io::{read_model, write_model, AnyModel};
use crate::report::{render_markdown, run_report, RunReport, SeedReport};
use crate::train::{evaluate, split_for, train_seeds, TrainConfig};

const CONFIG_HELP: &str = "CONFIG FILE (JSON, unknown keys rejected):
  {
    \"data\":   { \"path\": \"d.cfds\" },
    \"model\":  { \"fusion\": \"capsnet|add|concat|xattn\",
                \"n_primary\": 8, \"primary_dim\": 16, \"digit_dim\": 16,
                \"routing_iters\": 3, \"apply_squash_primary\": true,
                \"share_text_weights\": false, \"gate_width\": 6,
                \"d_f\": 64, \"classifier_hidden\": 32,
                \"numeric_hidden\": [32, 32], \"numeric_embed_dim\": 16 },
    \"train\":  { \"epochs\": 50, \"batch_size\": 32, \"learning_rate\": 0.001,
                \"optimizer\": {\"kind\": \"adam\", \"beta1\": 0.9, \"beta2\": 0.999, \"eps\": 1e-8},
                \"loss\": \"weighted_cross_entropy\", \"class_weights\": \"auto\",
                \"seed\": 0, \"patience\": 10, \"split\": [0.70, 0.15, 0.15] },
    \"eval\":   { \"fpr_max\": 0.1, \"n_seeds\": 5 },
    \"output\": { \"dir\": \"runs/exp1\" }
  }
All keys are optional; the values above are the defaults. Command-line flags
override the config file. CAPSFUSE_THREADS caps seed-level parallelism.";

#[derive(Debug, Parser)]
#[command(
    name = "capsfuse",
    version,
    about = "Capsule-routed multimodal fusion classifier and fusion-strategy benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset plus a sidecar JSON recording
    /// the generator spec and seed.
    Synth(SynthArgs),
    /// Train one fusion strategy over several seeds and write per-seed
    /// models, logs, and an aggregate report.
    #[command(after_help = CONFIG_HELP)]
    Train(TrainArgs),
    /// Evaluate a trained model file on a dataset; optionally export
    /// per-sample routing traces.
    Eval(EvalArgs),
    /// Rank news categories by cosine similarity and select an independent
    /// pair under both rules.
    SelectCategories(SelectCategoriesArgs),
    /// Render run reports as a markdown comparison table.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Capsnet,
    Add,
    Concat,
    Xattn,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Capsnet => "capsnet",
            FusionKind::Add => "add",
            FusionKind::Concat => "concat",
            FusionKind::Xattn => "xattn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthModeArg {
    Separable,
    Redundant,
    Xor,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    TextA,
    TextB,
    Image,
    Numeric,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::TextA => Role::TextA,
            RoleArg::TextB => Role::TextB,
            RoleArg::Image => Role::Image,
            RoleArg::Numeric => Role::Numeric,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Latent structure of the generated data.
    #[arg(long, value_enum)]
    pub mode: SynthModeArg,
    /// Modality replaced by pure noise (mode = noisy only).
    #[arg(long, value_enum)]
    pub noisy_role: Option<RoleArg>,
    /// Number of samples.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of positive (high-risk) labels.
    #[arg(long, default_value_t = 0.14)]
    pub positive_rate: f64,
    #[arg(long, default_value_t = 0.3)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 16)]
    pub dim_text_a: usize,
    #[arg(long, default_value_t = 16)]
    pub dim_text_b: usize,
    #[arg(long, default_value_t = 16)]
    pub dim_image: usize,
    #[arg(long, default_value_t = 6)]
    pub dim_numeric: usize,
    /// Output path; `.csv` writes the CSV format, anything else the binary
    /// format. A `<out>.json` sidecar records the full spec.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionKind>,
    /// Base seed; seed i of n runs as base + i.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_seeds: Option<usize>,
    #[arg(long)]
    pub fpr_max: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fpr_max: Option<f64>,
    /// Write per-sample routing traces (capsnet models) as JSON lines.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectCategoriesArgs {
    /// Similarity matrix CSV (header row of names, one row per category).
    #[arg(long, conflicts_with = "embeddings")]
    pub matrix: Option<PathBuf>,
    /// Embeddings CSV (`name,v0,v1,...` per row); similarities are computed.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run-report JSON files produced by `train`.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Render a markdown comparison table instead of merged JSON.
    #[arg(long)]
    pub markdown: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

// ── run configuration ───────────────────────────────────────────────────

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub fusion: FusionKind,
    pub n_primary: usize,
    pub primary_dim: usize,
    pub digit_dim: usize,
    pub routing_iters: usize,
    pub apply_squash_primary: bool,
    pub share_text_weights: bool,
    pub gate_width: usize,
    pub d_f: usize,
    pub classifier_hidden: usize,
    pub numeric_hidden: Vec<usize>,
    pub numeric_embed_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            fusion: FusionKind::Capsnet,
            n_primary: 8,
            primary_dim: 16,
            digit_dim: 16,
            routing_iters: 3,
            apply_squash_primary: true,
            share_text_weights: false,
            gate_width: 6,
            d_f: 64,
            classifier_hidden: 32,
            numeric_hidden: vec![32, 32],
            numeric_embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub fpr_max: f64,
    pub n_seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            fpr_max: 0.1,
            n_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::IoAt {
            path: path.to_path_buf(),
            source,
        })?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }
}

/// Build the configured model for a dataset's dimensions.
pub fn build_model(ds: &MultimodalDataset, section: &ModelSection, seed: u64) -> Result<AnyModel> {
    let (ta, tb, im, nu) = (
        ds.dim(Role::TextA),
        ds.dim(Role::TextB),
        ds.dim(Role::Image),
        ds.dim(Role::Numeric),
    );
    match section.fusion {
        FusionKind::Capsnet => {
            let mut cfg = ModelConfig::with_dims(ta, tb, im, nu);
            cfg.n_primary = section.n_primary;
            cfg.primary_dim = section.primary_dim;
            cfg.digit_dim = section.digit_dim;
            cfg.routing_iters = section.routing_iters;
            cfg.squash_primary = section.apply_squash_primary;
            cfg.share_text_weights = section.share_text_weights;
            cfg.gate_width = section.gate_width;
            cfg.numeric_hidden = section.numeric_hidden.clone();
            cfg.numeric_embed_dim = section.numeric_embed_dim;
            Ok(AnyModel::Caps(FusionModel::new(cfg, seed)?))
        }
        kind => {
            let strategy = match kind {
                FusionKind::Add => BaselineStrategy::Addition,
                FusionKind::Concat => BaselineStrategy::Concatenation,
                FusionKind::Xattn => BaselineStrategy::CrossAttention,
                FusionKind::Capsnet => unreachable!(),
            };
            let mut cfg = BaselineConfig::with_dims(strategy, ta, tb, im, nu);
            cfg.d_f = section.d_f;
            cfg.classifier_hidden = section.classifier_hidden;
            cfg.numeric_hidden = section.numeric_hidden.clone();
            cfg.numeric_embed_dim = section.numeric_embed_dim;
            Ok(AnyModel::Baseline(BaselineModel::new(cfg, seed)?))
        }
    }
}

/// Load a dataset, choosing the format by extension (`.csv` or binary).
pub fn load_dataset(path: &Path) -> Result<MultimodalDataset> {
    if path.extension().is_some_and(|e| e == "csv") {
        MultimodalDataset::read_csv(path)
    } else {
        MultimodalDataset::read_binary(path)
    }
}

fn seed_parallelism(n_seeds: usize) -> usize {
    match std::env::var("CAPSFUSE_THREADS") {
        Ok(v) => v.parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
            .min(n_seeds.max(1)),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::SelectCategories(args) => cmd_select_categories(args),
        Command::Report(args) => cmd_report(args),
    }
}

// ── synth ───────────────────────────────────────────────────────────────

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mode = match args.mode {
        SynthModeArg::Separable => SynthMode::Separable,
        SynthModeArg::Redundant => SynthMode::Redundant,
        SynthModeArg::Xor => SynthMode::XorCrossModal,
        SynthModeArg::Noisy => {
            let role = args.noisy_role.ok_or_else(|| {
                Error::Config("--noisy-role is required when --mode noisy".into())
            })?;
            SynthMode::NoisyModality(role.into())
        }
    };
    let spec = SynthSpec {
        n: args.n,
        dims: ModalityDims {
            text_a: args.dim_text_a,
            text_b: args.dim_text_b,
            image: args.dim_image,
            numeric: args.dim_numeric,
        },
        mode,
        positive_rate: args.positive_rate,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    let ds = gen_synthetic(&spec)?;
    if args.out.extension().is_some_and(|e| e == "csv") {
        ds.write_csv(&args.out)?;
    } else {
        ds.write_binary(&args.out)?;
    }
    let sidecar_path = sidecar_for(&args.out);
    write_atomic(&sidecar_path, &serde_json::to_vec_pretty(&spec)?)?;
    println!(
        "wrote {} samples to {} (spec in {})",
        ds.n_samples(),
        args.out.display(),
        sidecar_path.display()
    );
    Ok(())
}

fn sidecar_for(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_os_string();
    name.push(".json");
    PathBuf::from(name)
}

// ── train ───────────────────────────────────────────────────────────────

/// Per-seed detail written next to each model file.
#[derive(Debug, Serialize, Deserialize)]
struct PerSeedFile {
    seed: u64,
    strategy: String,
    metrics: MetricReport,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(data) = args.data {
        config.data.path = Some(data);
    }
    if let Some(fusion) = args.fusion {
        config.model.fusion = fusion;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(n_seeds) = args.n_seeds {
        config.eval.n_seeds = n_seeds;
    }
    if let Some(fpr_max) = args.fpr_max {
        config.eval.fpr_max = fpr_max;
    }
    if let Some(out) = args.out {
        config.output.dir = Some(out);
    }

    let data_path = config
        .data
        .path
        .clone()
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.path".into()))?;
    let out_dir =
        config.output.dir.clone().ok_or_else(|| {
            Error::Config("no output directory: pass --out or set output.dir".into())
        })?;
    if config.eval.n_seeds == 0 {
        return Err(Error::Config("n_seeds must be positive".into()));
    }
    if !(config.eval.fpr_max > 0.0 && config.eval.fpr_max <= 1.0) {
        return Err(Error::Config(format!(
            "fpr_max must be in (0, 1], got {}",
            config.eval.fpr_max
        )));
    }
    config.train.validate()?;

    let ds = load_dataset(&data_path)?;
    std::fs::create_dir_all(&out_dir).map_err(|source| Error::IoAt {
        path: out_dir.clone(),
        source,
    })?;

    let seeds: Vec<u64> = (0..config.eval.n_seeds)
        .map(|i| config.train.seed + i as u64)
        .collect();
    let threads = seed_parallelism(seeds.len());
    let model_section = config.model.clone();
    let runs = train_seeds(
        &ds,
        &config.train,
        &seeds,
        threads,
        |seed| build_model(&ds, &model_section, seed),
        config.eval.fpr_max,
    )?;

    let mut per_seed = Vec::with_capacity(runs.len());
    for run in &runs {
        let seed_dir = out_dir.join(format!("seed_{}", run.seed));
        std::fs::create_dir_all(&seed_dir).map_err(|source| Error::IoAt {
            path: seed_dir.clone(),
            source,
        })?;
        let mut train_cfg = config.train.clone();
        train_cfg.seed = run.seed;
        write_model(&seed_dir.join("model.cfmd"), &run.model, &train_cfg)?;
        write_atomic(&seed_dir.join("trainlog.csv"), run.log.to_csv().as_bytes())?;
        let detail = PerSeedFile {
            seed: run.seed,
            strategy: config.model.fusion.name().to_string(),
            metrics: run.log.test_report.clone(),
        };
        write_atomic(
            &seed_dir.join("report.json"),
            &serde_json::to_vec_pretty(&detail)?,
        )?;
        per_seed.push(SeedReport::from_metrics(run.seed, &run.log.test_report));
    }

    let report = run_report(config.model.fusion.name(), per_seed);
    write_atomic(
        &out_dir.join("report.json"),
        &serde_json::to_vec_pretty(&report)?,
    )?;
    println!(
        "{}: auc {:.4} ± {:.4} over {} seeds (report in {})",
        report.strategy,
        report.aggregate.auc_mean,
        report.aggregate.auc_std,
        report.seeds.len(),
        out_dir.join("report.json").display()
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let stored = read_model(&args.model)?;
    let ds = load_dataset(&args.data)?;
    let fpr_max = args.fpr_max.unwrap_or(0.1);
    let split = split_for(&ds, &stored.train);
    let report = evaluate(&stored.model, &ds, &split, fpr_max)?;

    if let Some(trace_path) = &args.trace {
        let caps = stored
            .model
            .as_caps()
            .ok_or_else(|| Error::Config("routing-trace export needs a capsnet model".into()))?;
        let mut lines = String::new();
        for chunk in split.test.chunks(256) {
            let batch = ds.batch(chunk);
            let (_, traces) = caps.predict_with_trace(&batch, 0)?;
            for (i, mut trace) in traces.into_iter().enumerate() {
                trace.sample_index = chunk[i];
                writeln!(lines, "{}", serde_json::to_string(&trace)?).expect("string write");
            }
        }
        write_atomic(trace_path, lines.as_bytes())?;
    }

    let json = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => write_atomic(path, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

// ── select-categories ───────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct SelectionReport {
    ranking: CategoryRanking,
}

fn cmd_select_categories(args: SelectCategoriesArgs) -> Result<()> {
    let matrix = match (&args.matrix, &args.embeddings) {
        (Some(path), None) => SimilarityMatrix::read_csv(path)?,
        (None, Some(path)) => {
            let embeddings = read_embeddings_csv(path)?;
            crate::data::cosine_matrix(&embeddings)?
        }
        _ => {
            return Err(Error::Config(
                "pass exactly one of --matrix or --embeddings".into(),
            ))
        }
    };
    let ranking = rank_categories(&matrix);
    let json = serde_json::to_string_pretty(&SelectionReport { ranking })?;
    match &args.out {
        Some(path) => write_atomic(path, json.as_bytes())?,
        None => println!("{json}"),
    }
    Ok(())
}

fn read_embeddings_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::IoAt {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let name = fields.next().unwrap_or("").trim().to_string();
        if name.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("row {} has no category name", i + 1),
            });
        }
        let values: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format {
                path: path.to_path_buf(),
                message: format!("non-numeric embedding value in row {}", i + 1),
            })?;
        out.push((name, values));
    }
    Ok(out)
}

// ── report ──────────────────────────────────────────────────────────────

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(args.inputs.len());
    for path in &args.inputs {
        let text = std::fs::read_to_string(path).map_err(|source| Error::IoAt {
            path: path.clone(),
            source,
        })?;
        let report: RunReport = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        reports.push(report);
    }
    let rendered = if args.markdown {
        render_markdown(&reports)
    } else {
        serde_json::to_string_pretty(&reports)?
    };
    match &args.out {
        Some(path) => write_atomic(path, rendered.as_bytes())?,
        None => print!("{rendered}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_config_rejects_unknown_keys() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{ "model": { "fusion": "capsnet", "bogus": 1 } }"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn run_config_defaults_round_trip() {
        let config: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.eval.n_seeds, 5);
        assert_eq!(config.model.n_primary, 8);
        let json = serde_json::to_string(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn fusion_kind_serde_names() {
        for (kind, name) in [
            (FusionKind::Capsnet, "\"capsnet\""),
            (FusionKind::Add, "\"add\""),
            (FusionKind::Concat, "\"concat\""),
            (FusionKind::Xattn, "\"xattn\""),
        ] {
            assert_eq!(serde_json::to_string(&kind).unwrap(), name);
        }
    }
}
