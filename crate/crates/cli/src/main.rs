use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use intermulti::data::{generate_synthetic, load_dataset, metrics, read_manifest, write_dataset, FeatureDataset, Label, Split, SyntheticSpec};
use intermulti::harness::{ablate, dependency_tables, run_experiment, AblationRow, RunRecord, Splits};
use intermulti::model::{checkpoint_bytes, load_checkpoint, Ablation, ModelConfig};
use intermulti::Error;

#[derive(Parser)]
#[command(name = "intermulti", version, about = "Multimodal emotion analysis: train, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a checkpoint, run record and epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on every split listed in a manifest.
    Eval(EvalArgs),
    /// Train a grid of ablation variants on the same data and seed.
    Ablate(AblateArgs),
    /// Dependency between decoupled representations of a checkpoint.
    Depmetric(DepArgs),
    /// Generate the planted-interaction benchmark.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// JSON model config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest (`manifest.jsonl`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ablation: Option<Ablation>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated ablation ids; defaults to every implemented one.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<Ablation>,
    /// Single id, accepted as a one-element grid.
    #[arg(long, conflicts_with = "grid")]
    ablation: Option<Ablation>,
    /// Number of runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write `eval.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Also write `depmetric.json` and `depmetric_control.json` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "n", default_value_t = SyntheticSpec::default().n_samples)]
    n_samples: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().alpha)]
    alpha: f64,
    /// Weights of the text, visual and acoustic specific latents.
    #[arg(long, num_args = 3, value_names = ["T", "V", "A"])]
    beta: Option<Vec<f64>>,
    #[arg(long, default_value_t = SyntheticSpec::default().gamma)]
    gamma: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().sigma)]
    sigma: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().seed)]
    seed: u64,
    #[arg(long, num_args = 3, value_names = ["T", "V", "A"])]
    dims: Option<Vec<usize>>,
    #[arg(long, num_args = 3, value_names = ["T", "V", "A"])]
    seq_lens: Option<Vec<usize>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Depmetric(a) => cmd_depmetric(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 config, 3 data or I/O, 4 numeric divergence, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::NotImplemented(_)) => 2,
        Some(Error::Data { .. } | Error::Io { .. } | Error::Shape { op: "forward" | "train" | "load_checkpoint", .. }) => 3,
        Some(Error::Divergence { .. } | Error::NonFinite { .. }) => 4,
        _ => 1,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

struct Loaded {
    train: FeatureDataset,
    val: FeatureDataset,
    test: Option<FeatureDataset>,
}

impl Loaded {
    fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.train,
            val: &self.val,
            test: self.test.as_ref(),
        }
    }
}

fn has_split(manifest: &Path, split: Split) -> Result<bool> {
    Ok(read_manifest(manifest)?.iter().any(|e| e.split == split))
}

fn load_all(manifest: &Path) -> Result<Loaded> {
    let test = if has_split(manifest, Split::Test)? {
        Some(load_dataset(manifest, Split::Test)?)
    } else {
        None
    };
    Ok(Loaded {
        train: load_dataset(manifest, Split::Train)?,
        val: load_dataset(manifest, Split::Val)?,
        test,
    })
}

/// Reads the config (or defaults sized to the data) and applies flag overrides.
fn resolve_config(common: &Common, data: &Loaded, ablation: Option<Ablation>) -> Result<ModelConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            ModelConfig::from_json(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ModelConfig {
            input_dims: data.train.dims(),
            task: data.train.task(),
            ..ModelConfig::default()
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(n) = common.max_epochs {
        cfg.max_epochs = n;
    }
    if let Some(a) = ablation {
        cfg.ablation = a;
    }
    cfg.validate()?;
    if cfg.input_dims != data.train.dims() {
        return Err(Error::Data {
            sample: None,
            msg: format!("config input_dims {:?} but data has {:?}", cfg.input_dims, data.train.dims()),
        }
        .into());
    }
    Ok(cfg)
}

fn epoch_csv(record: &RunRecord) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in &record.epochs {
        w.serialize(e)?;
    }
    Ok(w.into_inner()?)
}

fn progress(quiet: bool, label: String) -> impl FnMut(&intermulti::model::EpochRecord) {
    move |e| {
        if !quiet {
            eprintln!(
                "{label} epoch {:>3}  train {:.5}  val {:.5}{}",
                e.epoch,
                e.train_loss,
                e.val_loss,
                if e.improved { "  *" } else { "" }
            );
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let data = load_all(&a.common.data)?;
    let cfg = resolve_config(&a.common, &data, a.ablation)?;
    create_dir(&a.common.out)?;
    let (model, record) = run_experiment(&cfg, data.splits(), progress(a.common.quiet, cfg.ablation.to_string()))?;
    let out = &a.common.out;
    write_atomic(&out.join("model.ckpt"), &checkpoint_bytes(&model))?;
    write_json(&out.join("run.json"), &record)?;
    write_atomic(&out.join("epochs.csv"), &epoch_csv(&record)?)?;
    println!(
        "{}: {} epochs, best {} (val loss {:.5}), {:.1}s -> {}",
        cfg.ablation,
        record.epochs.len(),
        record.best_epoch,
        record.val_loss,
        record.wall_clock_seconds,
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let mut report = std::collections::BTreeMap::new();
    for split in Split::ALL {
        if !has_split(&a.data, split)? {
            continue;
        }
        let data = load_dataset(&a.data, split)?;
        let preds = model.predict(data.samples())?;
        let labels: Vec<Label> = data.samples().iter().map(|s| s.label).collect();
        report.insert(split, metrics(&preds, &labels, model.config().task)?);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = a.out {
        create_dir(&out)?;
        write_json(&out.join("eval.json"), &report)?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let data = load_all(&a.common.data)?;
    let cfg = resolve_config(&a.common, &data, None)?;
    let grid: Vec<Ablation> = match (a.ablation, a.grid.is_empty()) {
        (Some(id), _) => vec![id],
        (None, false) => a.grid.clone(),
        (None, true) => Ablation::ALL.into_iter().filter(|x| x.is_implemented()).collect(),
    };
    let runs_dir = a.common.out.join("runs");
    create_dir(&runs_dir)?;
    if !a.common.quiet {
        eprintln!("training {} configurations on {} worker(s)", grid.len(), a.parallel);
    }
    let results = ablate(&cfg, &grid, data.splits(), a.parallel)?;
    let mut table = csv::Writer::from_writer(Vec::new());
    for (model, record) in &results {
        let id = record.config.ablation;
        write_json(&runs_dir.join(format!("{id}.json")), record)?;
        write_atomic(&runs_dir.join(format!("{id}.ckpt")), &checkpoint_bytes(model))?;
        table.serialize(AblationRow::new(record))?;
    }
    let table = table.into_inner()?;
    write_atomic(&a.common.out.join("ablation.csv"), &table)?;
    print!("{}", String::from_utf8_lossy(&table));
    Ok(())
}

fn cmd_depmetric(a: DepArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data, a.split)?;
    let (_, reps) = model.infer(data.samples())?;
    let (table, control) = dependency_tables(&reps)?;
    println!("{}", serde_json::to_string_pretty(&table)?);
    if let Some(out) = a.out {
        create_dir(&out)?;
        write_json(&out.join("depmetric.json"), &table)?;
        write_json(&out.join("depmetric_control.json"), &control)?;
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let d = SyntheticSpec::default();
    let triple = |v: Option<Vec<usize>>, default: [usize; 3]| v.map(|v| [v[0], v[1], v[2]]).unwrap_or(default);
    let spec = SyntheticSpec {
        n_samples: a.n_samples,
        seq_lens: triple(a.seq_lens, d.seq_lens),
        dims: triple(a.dims, d.dims),
        alpha: a.alpha,
        beta: a.beta.map(|b| [b[0], b[1], b[2]]).unwrap_or(d.beta),
        gamma: a.gamma,
        sigma: a.sigma,
        seed: a.seed,
    };
    let splits = generate_synthetic(&spec)?;
    let manifest = write_dataset(&a.out, &[&splits.train, &splits.val, &splits.test])?;
    write_json(&a.out.join("spec.json"), &spec)?;
    println!(
        "wrote {} / {} / {} samples -> {}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        manifest.display()
    );
    Ok(())
}
