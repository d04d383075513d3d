//! `scnet` command line: `pretrain`, `finetune`, `eval`, `gradcheck` and
//! `synth`.
//!
//! Exit codes: 0 on success, 1 when arguments or inputs fail validation
//! before any compute, 2 on runtime failure (I/O, divergence, a failed
//! gradient check).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::data::{self, Dataset, PerClass};
use crate::gradcheck;
use crate::model::{self, ModelSpec, ModelState};
use crate::sampler;
use crate::tensor::Scalar;
use crate::trainer::{self, LrSchedule, Phase, TrainConfig};

/// Relative error bar for the op and network checks.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "scnet",
    about = "Spatial contrasting pretraining and fine-tuning for small convnets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Unsupervised contrastive pretraining on every image of --data.
    Pretrain(TrainArgs),
    /// Supervised fine-tuning from --ckpt-in (or a fresh init).
    Finetune(TrainArgs),
    /// Top-1 accuracy of --ckpt-in on --data.
    Eval(EvalArgs),
    /// Finite-difference check of every analytic gradient in f64.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic clustered texture dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// CIFAR-10 batch file, CIFAR-10 directory, or directory of `<label>_<id>.ppm`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Labeled examples kept per class for fine-tuning (default: all).
    #[arg(long)]
    pub labels_per_class: Option<usize>,
    /// Held-out labeled set evaluated after fine-tuning.
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// Model spec file; defaults to the reference network.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub ckpt_in: Option<PathBuf>,
    #[arg(long)]
    pub ckpt_out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Multiplicative learning-rate decay applied every --lr-step epochs.
    #[arg(long, default_value_t = 0.5)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 10)]
    pub lr_step: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Contrastive patch side (default: half the shorter image side).
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Pretraining steps per epoch (default: images / batch size).
    #[arg(long)]
    pub steps_per_epoch: Option<usize>,
    /// Subtract the training set's per-channel mean inside the model.
    #[arg(long)]
    pub mean_subtract: bool,
    /// Zero the classifier layer before fine-tuning.
    #[arg(long)]
    pub reset_head: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub ckpt_in: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthFormat {
    Ppm,
    Cifar,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory (ppm) or file (cifar).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 100)]
    pub per_class: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = SynthFormat::Ppm)]
    pub format: SynthFormat,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn runtime(msg: impl std::fmt::Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

/// Parses `argv` (including the program name) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `scnet --help` for usage.");
            1
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Pretrain(args) => match args.precision {
            Precision::F32 => pretrain_cmd::<f32>(&args),
            Precision::F64 => pretrain_cmd::<f64>(&args),
        },
        Command::Finetune(args) => match args.precision {
            Precision::F32 => finetune_cmd::<f32>(&args),
            Precision::F64 => finetune_cmd::<f64>(&args),
        },
        Command::Eval(args) => match args.precision {
            Precision::F32 => eval_cmd::<f32>(&args),
            Precision::F64 => eval_cmd::<f64>(&args),
        },
        Command::Gradcheck(args) => gradcheck_cmd(&args),
        Command::Synth(args) => synth_cmd(&args),
    }
}

/// Loads `--data`-style paths: a CIFAR-10 batch file, a CIFAR-10 directory
/// (`data_batch_1.bin` .. `data_batch_5.bin`), or a PPM directory.
pub fn load_dataset(path: &Path) -> Result<Dataset, data::DataError> {
    if path.is_file() {
        return data::load_cifar10_binary(path);
    }
    let batches = data::cifar10_train_files(path);
    if !batches.is_empty() {
        return data::load_cifar10_batches(&batches);
    }
    data::load_ppm_dir(path)
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str, command: &str) -> Outcome<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| usage(format!("`{command}` requires {flag} <PATH>")))
}

fn existing(path: &Path, flag: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{flag} {} does not exist", path.display())))
    }
}

fn read_data(path: &Path, flag: &str) -> Outcome<Dataset> {
    let ds = load_dataset(path).map_err(|e| runtime(format!("{flag} {}: {e}", path.display())))?;
    if ds.is_empty() {
        return Err(usage(format!("{flag} {} holds no images", path.display())));
    }
    Ok(ds)
}

fn train_config(args: &TrainArgs, phase: Phase) -> Outcome<TrainConfig> {
    let config = TrainConfig {
        phase,
        batch_size: args.batch_size,
        lr: LrSchedule {
            initial: args.lr,
            decay: args.lr_decay,
            every: args.lr_step.max(1),
        },
        momentum: args.momentum,
        weight_decay: args.weight_decay,
        epochs: args.epochs,
        seed: args.seed,
        patch_size: args.patch_size,
        tap_weights: None,
        steps_per_epoch: args.steps_per_epoch,
        workers: sampler::workers_from_env(),
    };
    config
        .validate(phase)
        .map_err(|e| usage(format!("{e} (check --batch-size/--lr/--momentum)")))?;
    Ok(config)
}

/// Spec and initial state: from --ckpt-in when given, else from --spec (or
/// the reference network sized to the data) with a fresh seeded init.
fn initial_model<T: Scalar>(
    args: &TrainArgs,
    data: &Dataset,
    patch_side: usize,
) -> Outcome<(ModelSpec, ModelState<T>)> {
    if let Some(ck) = &args.ckpt_in {
        existing(ck, "--ckpt-in")?;
        let ck =
            checkpoint::load(ck).map_err(|e| usage(format!("--ckpt-in {}: {e}", ck.display())))?;
        return Ok((ck.spec, ck.state.to_precision()));
    }
    let (c, h, w) = data.image_shape().expect("non-empty");
    let mut spec = match &args.spec {
        Some(path) => {
            existing(path, "--spec")?;
            ModelSpec::load(path).map_err(|e| usage(format!("--spec {}: {e}", path.display())))?
        }
        None => ModelSpec::reference(c, patch_side, data.num_classes().max(1)),
    };
    if args.mean_subtract && spec.channel_mean.is_none() {
        spec.channel_mean = data.channel_means();
    }
    spec.validate(c, h, w)
        .map_err(|e| usage(format!("model does not fit the --data images: {e}")))?;
    let state = model::init_params(&spec, args.seed).map_err(|e| usage(e.to_string()))?;
    Ok((spec, state))
}

fn metadata(phase: Phase, config: &TrainConfig, data: &Dataset) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("phase".to_string(), phase.to_string()),
        ("seed".to_string(), config.seed.to_string()),
        ("epochs".to_string(), config.epochs.to_string()),
        ("images".to_string(), data.len().to_string()),
    ])
}

fn save_checkpoint<T: Scalar>(
    path: Option<&Path>,
    spec: &ModelSpec,
    state: &ModelState<T>,
    meta: &BTreeMap<String, String>,
) -> Outcome {
    if let Some(path) = path {
        checkpoint::save(path, spec, state, meta)
            .map_err(|e| runtime(format!("--ckpt-out: {e}")))?;
    }
    Ok(())
}

fn pretrain_cmd<T: Scalar>(args: &TrainArgs) -> Outcome {
    let data_path = require(&args.data, "--data", "pretrain")?;
    existing(data_path, "--data")?;
    let config = train_config(args, Phase::Pretrain)?;
    let data = read_data(data_path, "--data")?;
    if data.len() < config.batch_size {
        return Err(usage(format!(
            "--batch-size {} exceeds the {} images in --data",
            config.batch_size,
            data.len()
        )));
    }
    let (_, h, w) = data.image_shape().expect("non-empty");
    let patch = args
        .patch_size
        .unwrap_or_else(|| sampler::default_patch_size(h, w));
    if patch == 0 || patch > h.min(w) {
        return Err(usage(format!(
            "--patch-size {patch} does not fit {h}x{w} images"
        )));
    }
    let (spec, init) = initial_model::<T>(args, &data, patch)?;
    spec.validate(spec.input_channels, patch, patch)
        .map_err(|e| usage(format!("--patch-size {patch} does not fit the model: {e}")))?;

    let report = trainer::pretrain_with(&spec, &init, &data, &config, |rec| {
        println!("{}", rec.to_json_line())
    })
    .map_err(runtime)?;
    eprintln!(
        "pretrain: {} images, {} steps, {:.1}s",
        report.dataset_size, report.steps, report.wall_clock_secs
    );
    save_checkpoint(
        args.ckpt_out.as_deref(),
        &spec,
        &report.state,
        &metadata(Phase::Pretrain, &config, &data),
    )
}

fn finetune_cmd<T: Scalar>(args: &TrainArgs) -> Outcome {
    let data_path = require(&args.data, "--data", "finetune")?;
    existing(data_path, "--data")?;
    if let Some(t) = &args.test_data {
        existing(t, "--test-data")?;
    }
    let config = train_config(args, Phase::Finetune)?;
    let full = read_data(data_path, "--data")?;
    if full.labels().is_none() {
        return Err(usage(format!(
            "`finetune` needs labels, but --data {} has none",
            data_path.display()
        )));
    }
    let per_class = args.labels_per_class.map_or(PerClass::All, PerClass::Count);
    let labeled = data::subsample_labeled(&full, per_class, args.seed)
        .map_err(|e| usage(format!("--labels-per-class: {e}")))?;
    let test = args
        .test_data
        .as_deref()
        .map(|p| read_data(p, "--test-data"))
        .transpose()?;
    let (_, h, w) = labeled.image_shape().expect("non-empty");
    let (spec, mut init) = initial_model::<T>(args, &labeled, h.min(w))?;
    if args.reset_head {
        trainer::reset_head(&spec, &mut init).map_err(|e| usage(format!("--reset-head: {e}")))?;
    }

    let report = trainer::finetune_with(&spec, &init, &labeled, test.as_ref(), &config, |rec| {
        println!("{}", rec.to_json_line())
    })
    .map_err(|e| match e {
        trainer::TrainError::LabelRange { .. } => usage(format!("--data: {e}")),
        other => runtime(other),
    })?;
    if let Some(acc) = report.eval_accuracy {
        println!(
            "{}",
            serde_json::json!({ "phase": "eval", "accuracy": acc })
        );
    }
    eprintln!(
        "finetune: {} labeled images, {} steps, {:.1}s",
        report.dataset_size, report.steps, report.wall_clock_secs
    );
    save_checkpoint(
        args.ckpt_out.as_deref(),
        &spec,
        &report.state,
        &metadata(Phase::Finetune, &config, &labeled),
    )
}

fn eval_cmd<T: Scalar>(args: &EvalArgs) -> Outcome {
    let data_path = require(&args.data, "--data", "eval")?;
    let ck_path = require(&args.ckpt_in, "--ckpt-in", "eval")?;
    existing(data_path, "--data")?;
    existing(ck_path, "--ckpt-in")?;
    let ck = checkpoint::load(ck_path)
        .map_err(|e| usage(format!("--ckpt-in {}: {e}", ck_path.display())))?;
    let data = read_data(data_path, "--data")?;
    if data.labels().is_none() {
        return Err(usage("`eval` needs labels in --data"));
    }
    let state: ModelState<T> = ck.state.to_precision();
    let acc = trainer::eval(&ck.spec, &state, &data).map_err(|e| match e {
        trainer::TrainError::LabelRange { .. } => usage(format!("--data: {e}")),
        other => runtime(other),
    })?;
    println!("accuracy {acc:.3}");
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Outcome {
    if args.trials == 0 {
        return Err(usage("--trials must be at least 1"));
    }
    let reports = gradcheck::run_suite(args.seed, args.trials);
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed(GRADCHECK_TOLERANCE);
        println!(
            "{:<16} trials={} coords={} kinks={} max_rel_err={:.3e} {}",
            r.op,
            r.trials,
            r.result.checked,
            r.result.kinks,
            r.result.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(r.op);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn synth_cmd(args: &SynthArgs) -> Outcome {
    let out = require(&args.out, "--out", "synth")?;
    if args.classes == 0 || args.size == 0 {
        return Err(usage("--classes and --size must be at least 1"));
    }
    if args.format == SynthFormat::Cifar
        && (args.size != data::CIFAR_SIDE || args.classes > data::CIFAR_CLASSES)
    {
        return Err(usage(
            "--format cifar needs --size 32 and at most 10 --classes",
        ));
    }
    let ds = data::synth_clustered(args.classes, args.per_class, args.size, args.seed)
        .map_err(runtime)?;
    match args.format {
        SynthFormat::Ppm => data::write_ppm_dir(out, &ds),
        SynthFormat::Cifar => data::write_cifar10_binary(out, &ds),
    }
    .map_err(|e| runtime(format!("--out {}: {e}", out.display())))?;
    eprintln!("synth: wrote {} images to {}", ds.len(), out.display());
    Ok(())
}
