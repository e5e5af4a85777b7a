//! Command-line driver: `prepare`, `train`, `eval`, `explain`, `synth`.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::explain::{explain_batch, ClassTarget, ExplainItem, DEFAULT_ALPHA};
use crate::manifest::{filter_split, read_manifest, split_train_val, write_manifest, ManifestEntry, Split};
use crate::model_io::{load_model, save_model};
use crate::network::{DEFAULT_INPUT_SIZE, MIN_INPUT_SIZE};
use crate::ratings::{aggregate_mean, dichotomize, read_ratings, Task};
use crate::synthetic::{write_blob_dataset, BlobConfig};
use crate::training::{evaluate, fit_with, load_samples, write_history, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "facecnn", version, about = "Train and explain a small CNN for binary face-impression classification")]
pub struct Cli {
    /// Line-oriented `key=value` file of default flags for the subcommand
    /// ('#' starts a comment); flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dichotomize ratings into percentile tails and write a split manifest.
    Prepare(PrepareArgs),
    /// Train the CNN on a manifest and write the best checkpoint.
    Train(TrainArgs),
    /// Report accuracy and confusion matrix on one manifest split.
    Eval(EvalArgs),
    /// Write Grad-CAM overlays and raw heatmaps.
    Explain(ExplainArgs),
    /// Generate the synthetic quadrant-blob dataset with a manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Warmth,
    Competence,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Warmth => Task::Warmth,
            TaskArg::Competence => Task::Competence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SubsetArg {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct PrepareArgs {
    /// Ratings CSV with header image_id,rater_id,question,score.
    #[arg(long, value_name = "FILE")]
    pub ratings: PathBuf,
    /// Directory holding the images, named <image_id>[.jpg|.jpeg|.png].
    #[arg(long, value_name = "DIR")]
    pub images: PathBuf,
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Lower tail percentile.
    #[arg(long, default_value_t = 10.0)]
    pub p_low: f64,
    /// Upper tail percentile.
    #[arg(long, default_value_t = 90.0)]
    pub p_high: f64,
    /// Seed of the train/val shuffle.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_name = "FILE", default_value = "manifest.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    /// Model file; the history CSV is written next to it as <stem>.history.csv.
    #[arg(long, value_name = "FILE", default_value = "model.bin")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u32).range(1..))]
    pub epochs: u32,
    /// Learning rate.
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Mini-batch size.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u32).range(1..))]
    pub batch: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Square network input side in pixels.
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE as u32,
          value_parser = clap::value_parser!(u32).range(MIN_INPUT_SIZE as i64..=u16::MAX as i64))]
    pub input_size: u32,
    /// Optimizer name (adam or sgd_momentum).
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub manifest: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Expected model input size; a model trained at another size is rejected.
    #[arg(long)]
    pub input_size: Option<u32>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ExplainArgs {
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// Single image to explain.
    #[arg(long, value_name = "FILE", conflicts_with = "manifest", required_unless_present = "manifest")]
    pub image: Option<PathBuf>,
    /// Explain every image of a manifest (see --split).
    #[arg(long, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
    /// Manifest rows to explain.
    #[arg(long, value_enum, default_value = "all")]
    pub split: SubsetArg,
    /// Class whose evidence is mapped: predicted, 0 or 1.
    #[arg(long, default_value = "predicted")]
    pub class: ClassTarget,
    /// Heatmap opacity in the overlay.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f32,
    #[arg(long, value_name = "DIR", default_value = "explain")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = DEFAULT_INPUT_SIZE)]
    pub size: usize,
    /// Seed of the image noise and blob positions.
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    /// Seed of the train/val shuffle.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

const SUBCOMMANDS: [&str; 5] = ["prepare", "train", "eval", "explain", "synth"];

/// Parses a `key=value` config file into `--key value` pairs.
pub fn parse_config_file(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(format!("config line {}: empty key or value", i + 1));
        }
        out.push((k.replace('_', "-"), v.to_string()));
    }
    Ok(out)
}

/// Removes `--config FILE` and splices the file's flags in front of the
/// command-line flags of the subcommand.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, String> {
    let mut rest = Vec::with_capacity(args.len());
    let mut config = None;
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = Some(PathBuf::from(it.next().ok_or("--config needs a file")?));
        } else if let Some(path) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(path));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let pairs = parse_config_file(&text)?;
    let pos = rest
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
        .ok_or("--config requires a subcommand")?;
    let injected = pairs
        .into_iter()
        .flat_map(|(k, v)| [OsString::from(format!("--{k}")), OsString::from(v)]);
    let mut out: Vec<OsString> = rest[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&rest[pos + 1..]);
    Ok(out)
}

/// Parses and runs one invocation; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("error: {msg}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Explain(a) => cmd_explain(&a),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn find_image(dir: &Path, image_id: &str) -> Option<PathBuf> {
    let direct = dir.join(image_id);
    if direct.is_file() {
        return Some(direct);
    }
    ["jpg", "jpeg", "png", "JPG", "JPEG", "PNG"]
        .iter()
        .map(|ext| dir.join(format!("{image_id}.{ext}")))
        .find(|p| p.is_file())
}

pub fn cmd_prepare(a: &PrepareArgs) -> anyhow::Result<()> {
    let task: Task = a.task.into();
    let records = read_ratings(&a.ratings)?;
    let means = aggregate_mean(&records, task.question())?;
    let d = dichotomize(&means, task, a.p_low, a.p_high)?;
    let images = a
        .images
        .canonicalize()
        .with_context(|| format!("image directory {}", a.images.display()))?;

    let mut entries = Vec::with_capacity(d.retained.len());
    let mut missing = Vec::new();
    for r in &d.retained {
        match find_image(&images, &r.image_id) {
            Some(path) => entries.push(ManifestEntry {
                image_id: r.image_id.clone(),
                path,
                task,
                mean_rating: r.mean_rating,
                label: r.label,
                split: Split::Train,
            }),
            None => missing.push(r.image_id.as_str()),
        }
    }
    if !missing.is_empty() {
        bail!(
            "{} retained image(s) not found in {}: {}",
            missing.len(),
            images.display(),
            missing.join(", ")
        );
    }
    let entries = split_train_val(entries, a.seed)?;
    write_manifest(&a.out, &entries)?;

    let [neg, pos] = task.class_names();
    println!(
        "thresholds: p{}={:.6} p{}={:.6} over {} rated images",
        a.p_low,
        d.thresholds.low,
        a.p_high,
        d.thresholds.high,
        means.len()
    );
    println!(
        "retained {} ({neg}={}, {pos}={})",
        d.retained.len(),
        d.count(0),
        d.count(1)
    );
    let n_train = entries.iter().filter(|e| e.split == Split::Train).count();
    println!("split: train={} val={}", n_train, entries.len() - n_train);
    println!("wrote {}", a.out.display());
    Ok(())
}

pub fn history_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("history.csv")
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let entries = read_manifest(&a.manifest)?;
    let config = TrainConfig {
        epochs: a.epochs as usize,
        batch_size: a.batch as usize,
        learning_rate: a.lr,
        optimizer: a.optimizer.clone(),
        seed: a.seed,
        input_size: a.input_size as usize,
        task: entries.first().map(|e| e.task).unwrap_or(Task::Warmth),
    };
    config.validate()?;
    let train = filter_split(&entries, Split::Train);
    let val = filter_split(&entries, Split::Val);
    if train.is_empty() || val.is_empty() {
        bail!(
            "manifest needs both splits (train={}, val={})",
            train.len(),
            val.len()
        );
    }
    let train = load_samples(&train, config.input_size)?;
    let val = load_samples(&val, config.input_size)?;
    eprintln!(
        "training on {} images, validating on {} ({} epochs, {})",
        train.len(),
        val.len(),
        config.epochs,
        config.optimizer
    );
    let (model, metrics) = fit_with(&config, &train, &val, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  train_acc {:.4}  val_acc {:.4}",
            r.epoch, r.train_loss, r.train_acc, r.val_acc
        );
    })?;
    save_model(&model, &a.out)?;
    let history = history_path(&a.out);
    write_history(&history, &metrics.history)?;
    let best = metrics.best();
    println!(
        "best epoch {}: train accuracy {:.4}, val accuracy {:.4}",
        best.epoch, best.train_acc, best.val_acc
    );
    println!("wrote {} and {}", a.out.display(), history.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    if let Some(size) = a.input_size {
        if size as usize != model.input_size() {
            bail!(
                "model input size {} does not match requested {}",
                model.input_size(),
                size
            );
        }
    }
    let entries = read_manifest(&a.manifest)?;
    let split: Split = a.split.into();
    let subset = filter_split(&entries, split);
    if subset.is_empty() {
        bail!("manifest has no {split} entries");
    }
    let samples = load_samples(&subset, model.input_size())?;
    let eval = evaluate(&model, &samples)?;
    println!("split {split}: {} images", eval.total());
    println!("accuracy {:.4}", eval.accuracy);
    println!("confusion (rows=true, cols=predicted)");
    println!("        pred0  pred1");
    for (label, row) in eval.confusion.iter().enumerate() {
        println!("true{label} {:>6} {:>6}", row[0], row[1]);
    }
    Ok(())
}

pub fn cmd_explain(a: &ExplainArgs) -> anyhow::Result<()> {
    let model = load_model(&a.model)?;
    let items: Vec<ExplainItem> = if let Some(path) = &a.image {
        let stem = path
            .file_stem()
            .ok_or_else(|| anyhow!("cannot derive an image id from {}", path.display()))?;
        vec![ExplainItem {
            image_id: stem.to_string_lossy().into_owned(),
            path: path.clone(),
        }]
    } else {
        let manifest = a.manifest.as_ref().expect("clap enforces image or manifest");
        read_manifest(manifest)?
            .into_iter()
            .filter(|e| match a.split {
                SubsetArg::All => true,
                SubsetArg::Train => e.split == Split::Train,
                SubsetArg::Val => e.split == Split::Val,
            })
            .map(|e| ExplainItem {
                image_id: e.image_id,
                path: e.path,
            })
            .collect()
    };
    let report = explain_batch(&model, &items, a.class, a.alpha, &a.out)?;
    for (id, err) in &report.failures {
        eprintln!("error: {id}: {err}");
    }
    println!(
        "wrote {} file(s) to {} ({} image(s) failed)",
        report.written.len(),
        a.out.display(),
        report.failures.len()
    );
    if !items.is_empty() && report.failures.len() == items.len() {
        bail!("every image failed");
    }
    Ok(())
}

pub fn cmd_synth(a: &SynthArgs) -> anyhow::Result<()> {
    let cfg = BlobConfig {
        count: a.count,
        size: a.size,
        seed: a.seed,
        ..BlobConfig::default()
    };
    if cfg.count < 2 || cfg.size < MIN_INPUT_SIZE {
        bail!("need at least 2 images of at least {MIN_INPUT_SIZE} pixels");
    }
    let manifest = write_blob_dataset(&a.out, &cfg, a.split_seed)?;
    println!("wrote {} images and {}", cfg.count, manifest.display());
    Ok(())
}

/// Flag defaults per subcommand, as `--help` reports them.
pub fn documented_flags() -> BTreeMap<&'static str, Vec<String>> {
    use clap::CommandFactory;
    let cmd = Cli::command();
    cmd.get_subcommands()
        .map(|sc| {
            let flags = sc
                .get_arguments()
                .filter_map(|a| a.get_long().map(|l| format!("--{l}")))
                .collect();
            (SUBCOMMANDS.iter().copied().find(|n| *n == sc.get_name()).unwrap_or("?"), flags)
        })
        .collect()
}
