use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advcaps::augment::{augment_dataset, PerturbationPolicy};
use advcaps::model::{Model, Stage};
use advcaps::report;
use advcaps::synth::{generate, SynthConfig};
use advcaps::text::{encode_document, load_embeddings, read_dataset, write_dataset, Document, EmbeddingTable};
use advcaps::train::{evaluate_with, run_ablation, run_sweep, train_with, TrainConfig, TrainOptions, DEFAULT_N_CC, DEFAULT_N_PC};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "advcaps", version, about = "Adversarial capsule networks for binary text classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, model.caps and manifest.json.
    Train(RunArgs),
    /// Evaluate a saved model and print a JSON summary.
    Eval(EvalArgs),
    /// Write one adversarial copy of every document.
    Augment(AugmentArgs),
    /// Train the four ablation variants and write ablation.csv.
    Ablation(RunArgs),
    /// Sweep capsule counts and write sweep.csv.
    Sweep(SweepArgs),
    /// Export per-document representations at one stage of the model.
    ExportRepr(ExportArgs),
    /// Generate a synthetic corpus and its embedding file.
    GenSynth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Training configuration or a manifest.json from an earlier run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; results do not depend on this value.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    /// Use only the first N documents of --data.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    max_docs: Option<u64>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_N_PC)]
    n_pc: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_N_CC)]
    n_cc: Vec<usize>,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    repeats: u32,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    epoch: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    EncoderPooled,
    Condensed,
    Class,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::EncoderPooled => Stage::EncoderPooled,
            StageArg::Condensed => Stage::Condensed,
            StageArg::Class => Stage::Class,
        }
    }
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    docs: u64,
    #[arg(long, value_parser = clap::value_parser!(u64).range(3..))]
    vocab: u64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    embeddings_out: PathBuf,
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    dim: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct InputDigest {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    command: String,
    config: TrainConfig,
    resolved_seed: u64,
    data: InputDigest,
    embeddings: InputDigest,
    tool_version: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("{}: cannot read", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Reads either a plain training configuration or a manifest; for a
/// manifest the recorded input digests must match the given files.
fn load_config(path: &Path, data: &InputDigest, embeddings: &InputDigest) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("{}: cannot read config", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{}: invalid JSON", path.display()))?;
    if value.get("tool_version").is_some() {
        let manifest: RunManifest =
            serde_json::from_value(value).with_context(|| format!("{}: invalid manifest", path.display()))?;
        for (recorded, given) in [(&manifest.data, data), (&manifest.embeddings, embeddings)] {
            if recorded.sha256 != given.sha256 {
                bail!(
                    "{}: content differs from {} recorded in the manifest",
                    given.path.display(),
                    recorded.path.display()
                );
            }
        }
        return Ok(manifest.config);
    }
    serde_json::from_value(value).with_context(|| format!("{}: invalid training config", path.display()))
}

struct Inputs {
    config: TrainConfig,
    docs: Vec<Document>,
    table: EmbeddingTable,
    data: InputDigest,
    embeddings: InputDigest,
    options: TrainOptions,
}

fn load_inputs(args: &RunArgs) -> Result<Inputs> {
    let data = InputDigest {
        path: args.data.clone(),
        sha256: sha256_file(&args.data)?,
    };
    let embeddings = InputDigest {
        path: args.embeddings.clone(),
        sha256: sha256_file(&args.embeddings)?,
    };
    let mut config = load_config(&args.config, &data, &embeddings)?;
    if let Some(n) = args.max_docs {
        config.max_docs = Some(n as usize);
    }
    config.validate()?;
    let docs = read_dataset(&args.data).with_context(|| args.data.display().to_string())?;
    let table = load_embeddings(&args.embeddings)?;
    Ok(Inputs {
        config,
        docs,
        table,
        data,
        embeddings,
        options: TrainOptions {
            threads: args.threads as usize,
            progress: !args.quiet,
        },
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("{}: cannot write", path.display()))
}

fn write_manifest(out: &Path, command: &str, inputs: &Inputs) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config: inputs.config.clone(),
        resolved_seed: inputs.config.seed,
        data: inputs.data.clone(),
        embeddings: inputs.embeddings.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&out.join("manifest.json"), json)
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("{}: cannot create directory", out.display()))
}

fn cmd_train(args: RunArgs) -> Result<()> {
    let inputs = load_inputs(&args)?;
    let outcome = train_with(&inputs.config, &inputs.docs, &inputs.table, inputs.options)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("metrics.csv"), report::metrics_csv(&outcome))?;
    outcome.model.save(args.out.join("model.caps"))?;
    write_manifest(&args.out, "train", &inputs)?;
    if !args.quiet {
        eprintln!(
            "best epoch {}: test accuracy {:.4}",
            outcome.best_epoch, outcome.test.accuracy
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let docs = read_dataset(&args.data).with_context(|| args.data.display().to_string())?;
    let table = load_embeddings(&args.embeddings)?;
    let options = TrainOptions {
        threads: args.threads as usize,
        progress: false,
    };
    let m = evaluate_with(&model, &docs, &table, options)?;
    let summary = serde_json::json!({
        "accuracy": m.accuracy,
        "precision": m.precision,
        "recall": m.recall,
        "loss": m.loss,
    });
    println!("{summary}");
    Ok(())
}

fn cmd_augment(args: AugmentArgs) -> Result<()> {
    let docs = read_dataset(&args.data).with_context(|| args.data.display().to_string())?;
    let copies = augment_dataset(&docs, &PerturbationPolicy::default(), args.seed, args.epoch)?;
    write_dataset(&args.out, &copies)?;
    Ok(())
}

fn cmd_ablation(args: RunArgs) -> Result<()> {
    let inputs = load_inputs(&args)?;
    let rows = run_ablation(&inputs.config, &inputs.docs, &inputs.table, inputs.options)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("ablation.csv"), report::ablation_csv(&rows))?;
    write_manifest(&args.out, "ablation", &inputs)
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let inputs = load_inputs(&args.run)?;
    let cells = run_sweep(
        &inputs.config,
        &args.n_pc,
        &args.n_cc,
        args.repeats as usize,
        &inputs.docs,
        &inputs.table,
        inputs.options,
    )?;
    let out = &args.run.out;
    create_dir(out)?;
    write_file(&out.join("sweep.csv"), report::sweep_csv(&cells))?;
    write_file(&out.join("sweep_timing.csv"), report::sweep_timing_csv(&cells))?;
    write_manifest(out, "sweep", &inputs)
}

fn cmd_export_repr(args: ExportArgs) -> Result<()> {
    let model = Model::load(&args.model)?;
    let docs = read_dataset(&args.data).with_context(|| args.data.display().to_string())?;
    let table = load_embeddings(&args.embeddings)?;
    if table.dimension() != model.config().embedding_dim {
        bail!(
            "embedding table has dimension {}, model expects {}",
            table.dimension(),
            model.config().embedding_dim
        );
    }
    let (n_s, n_w) = (model.config().n_s, model.config().n_w);
    let mut csv = String::new();
    for doc in &docs {
        let encoded = encode_document(doc, &table, n_s, n_w);
        let values = model.representation(&encoded, args.stage.into())?;
        csv.push_str(&report::representation_row(doc.label, &values));
    }
    write_file(&args.out, csv)
}

fn cmd_gen_synth(args: SynthArgs) -> Result<()> {
    let mut config = SynthConfig::new(args.docs as usize, args.vocab as usize, args.seed);
    config.embedding_dim = args.dim as usize;
    let corpus = generate(&config)?;
    write_dataset(&args.out, &corpus.documents)?;
    write_file(&args.embeddings_out, corpus.embeddings_text)
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn diagnostic(e: &anyhow::Error) -> String {
    let mut message = String::new();
    for cause in e.chain() {
        let text = cause.to_string().replace('\n', " ");
        if !message.contains(&text) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&text);
        }
    }
    message
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Ablation(a) => cmd_ablation(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ExportRepr(a) => cmd_export_repr(a),
        Command::GenSynth(a) => cmd_gen_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", diagnostic(&e));
            ExitCode::from(1)
        }
    }
}
