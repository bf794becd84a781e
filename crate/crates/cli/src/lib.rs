//! Command-line front end: dataset preparation, training, evaluation, and
//! scoring of prediction logs.

pub mod config;
pub mod error;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use roct_core::data::{prepare_manifest, DatasetManifest, ImageSet, Layout, Split};
use roct_core::metrics::ConfusionMatrix;
use roct_core::model::checkpoint::{apply_checkpoint, model_from_checkpoint, Checkpoint};
use roct_core::model::{save_checkpoint, ModelGraph, ModelSpec};
use roct_core::trainer::{evaluate, fit};

pub use config::RunConfig;
pub use error::{CliError, CliResult};
use error::IoContext;

#[derive(Debug, Parser)]
#[command(name = "roct", version, about = "Retinal OCT classifier: prepare, train, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan an image tree and write a train/test manifest.
    Prepare(PrepareArgs),
    /// Train a model on a manifest's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Compute metrics from a log of `true<TAB>predicted` labels.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub data_root: PathBuf,
    /// `kermany` (CLASS-PATIENT-INDEX names, per-patient dedup) or `flat`.
    #[arg(long, default_value = "flat")]
    pub layout: String,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Manifest file to write; the count summary goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Preset name (toy, full, toy-xception-only) or a JSON spec file.
    #[arg(long)]
    pub spec: Option<String>,
    /// TOML file with dotted keys such as `train.initial_lr`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint to initialize from.
    #[arg(long)]
    pub init_from: Option<PathBuf>,
    /// With --init-from: skip mismatched parameters instead of failing.
    #[arg(long)]
    pub loose: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `test` or `train`.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Lines of `true<TAB>predicted`; `# classes<TAB>A<TAB>B...` fixes the
    /// class order, other `#` lines are ignored.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Prepare(a) => prepare(a, stdout),
        Command::Train(a) => train(a, stdout),
        Command::Eval(a) => eval(a, stdout),
        Command::Score(a) => score(a, stdout),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).at(path)
}

fn say(out: &mut dyn Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes()).at("<stdout>")
}

fn prepare(a: PrepareArgs, out: &mut dyn Write) -> CliResult<()> {
    let layout: Layout = a.layout.parse()?;
    let manifest = prepare_manifest(&a.data_root, layout, a.test_fraction, a.seed)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).at(dir)?;
    }
    manifest.save(&a.out)?;
    let summary = manifest.count_summary();
    write_file(&a.out.with_extension("counts.tsv"), &summary)?;
    say(out, &summary)
}

/// Preset name or JSON file, checked against the manifest's class count.
fn resolve_spec(spec: &str, class_count: usize) -> CliResult<ModelSpec> {
    let path = Path::new(spec);
    let resolved = if path.is_file() {
        let text = fs::read_to_string(path).at(path)?;
        serde_json::from_str::<ModelSpec>(&text).map_err(roct_core::Error::from)?
    } else {
        ModelSpec::preset(spec, class_count).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown spec {spec:?}: expected toy, full, toy-xception-only, or a JSON file"
            ))
        })?
    };
    if resolved.class_count != class_count {
        return Err(CliError::Usage(format!(
            "spec predicts {} classes but the manifest has {class_count}",
            resolved.class_count
        )));
    }
    Ok(resolved)
}

fn train(a: TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        cfg.load_file(path)?;
    }
    if let Some(s) = a.spec {
        cfg.spec = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.train.validate()?;
    if a.loose && a.init_from.is_none() {
        return Err(CliError::Usage("--loose requires --init-from".into()));
    }

    let manifest = DatasetManifest::load(&a.manifest)?;
    let spec = resolve_spec(&cfg.spec, manifest.classes().len())?;
    fs::create_dir_all(&a.out).at(&a.out)?;
    write_file(&a.out.join("config.toml"), cfg.to_toml())?;

    let mut model = ModelGraph::new(spec, cfg.train.seed)?;
    if let Some(init) = &a.init_from {
        let report = apply_checkpoint(&Checkpoint::load(init)?, &mut model, !a.loose)?;
        let text = format!("transfer from {}\n{report}", init.display());
        write_file(&a.out.join("transfer_report.txt"), &text)?;
        say(out, &text)?;
    }

    let size = model.spec.input_size;
    let train_set = ImageSet::from_manifest(&manifest, Split::Train, size)?;
    let val_set = ImageSet::from_manifest(&manifest, Split::Test, size)?;
    let val = (!val_set.is_empty()).then_some(&val_set);
    let best = a.out.join("best.ckpt");
    let history = fit(&mut model, &train_set, val, &cfg.train, val.map(|_| best.as_path()))?;

    save_checkpoint(&model, &a.out.join("final.ckpt"))?;
    write_file(&a.out.join("history.csv"), history.to_csv())?;
    let last = history.records.last();
    say(
        out,
        &format!(
            "trained {} epochs; final train loss {}; final val accuracy {}\n",
            history.records.len(),
            last.map_or("n/a".into(), |r| format!("{:.4}", r.train_loss)),
            last.and_then(|r| r.val_accuracy)
                .map_or("n/a".into(), |v| format!("{v:.4}")),
        ),
    )
}

fn write_metrics(cm: &ConfusionMatrix, dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let report = cm.report()?;
    fs::create_dir_all(dir).at(dir)?;
    write_file(&dir.join("metrics.json"), report.to_json()? + "\n")?;
    write_file(&dir.join("confusion_matrix.csv"), cm.to_csv())?;
    say(out, &report.display())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let split = match a.split.as_str() {
        "test" => Split::Test,
        "train" => Split::Train,
        other => return Err(CliError::Usage(format!("unknown split {other:?}"))),
    };
    let manifest = DatasetManifest::load(&a.manifest)?;
    let model = model_from_checkpoint(&a.checkpoint)?;
    if model.class_count() != manifest.classes().len() {
        return Err(roct_core::Error::Checkpoint(format!(
            "checkpoint predicts {} classes but the manifest has {}",
            model.class_count(),
            manifest.classes().len()
        ))
        .into());
    }
    let set = ImageSet::from_manifest(&manifest, split, model.spec.input_size)?;
    let cm = evaluate(&model, &set, a.batch_size)?;
    write_metrics(&cm, &a.out, out)
}

fn score(a: ScoreArgs, out: &mut dyn Write) -> CliResult<()> {
    let text = fs::read_to_string(&a.log).at(&a.log)?;
    let mut classes: Option<Vec<String>> = None;
    let mut pairs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(list) = rest.trim_start().strip_prefix("classes\t") {
                classes = Some(list.split('\t').map(str::to_string).collect());
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (t, p) = line.split_once('\t').ok_or_else(|| {
            CliError::Usage(format!("{}:{}: expected true<TAB>predicted", a.log.display(), no + 1))
        })?;
        pairs.push((t.to_string(), p.to_string()));
    }
    let classes = classes.unwrap_or_else(|| {
        let mut all: Vec<String> = pairs.iter().flat_map(|(t, p)| [t.clone(), p.clone()]).collect();
        all.sort();
        all.dedup();
        all
    });
    let mut cm = ConfusionMatrix::new(classes);
    for (t, p) in &pairs {
        cm.accumulate(t, p)?;
    }
    write_metrics(&cm, &a.out, out)
}
