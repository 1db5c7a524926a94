//! `graphdiff` command-line front end.
//!
//! Every command resolves a [`RunConfig`] from `--config`, `--set` and
//! `--seed`, writes the resolved config to its output directory, and writes
//! all artifacts atomically.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use graphdiff::checkpoint::{Checkpoint, TrainingMetadata};
use graphdiff::data::{self, PoseDataset};
use graphdiff::denoiser::{Denoiser, DenoiserParams};
use graphdiff::diffusion::SamplerMode;
use graphdiff::evaluation::{self, DiffusionSource, GroundTruthOracle, HypothesisSource};
use graphdiff::training::{self, metrics_csv, Trainer};
use graphdiff::Error;

pub use config::RunConfig;

/// Parameter count quoted for the reference configuration.
pub const REFERENCE_PARAMETERS: f64 = 3.22e6;

pub mod exit {
    pub const CONFIG: u8 = 2;
    pub const MISSING_FILE: u8 = 3;
    pub const MISMATCH: u8 = 4;
    pub const VALIDATION: u8 = 5;
    pub const OTHER: u8 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::MissingFile(_) => exit::MISSING_FILE,
            CliError::Mismatch(_) => exit::MISMATCH,
            CliError::Validation(_) => exit::VALIDATION,
            CliError::Other(_) => exit::OTHER,
        }
    }

    pub(crate) fn from_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Other(format!("{}: {e}", path.display()))
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { path, source } => CliError::from_io(&path, source),
            Error::SkeletonMismatch(_) => CliError::Mismatch(e.to_string()),
            Error::InvalidConfig(_) => CliError::Config(e.to_string()),
            Error::InvalidSkeleton(_)
            | Error::InvalidSchedule(_)
            | Error::TimestepOutOfRange { .. }
            | Error::ShapeMismatch { .. }
            | Error::Format { .. }
            | Error::NonFinite(_)
            | Error::MissingGroundTruth(_)
            | Error::EmptyBatch
            | Error::Json(_) => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "graphdiff", version, about = "Diffusion-based 2D-to-3D human pose lifting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=10` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Top-level seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ddpm,
    Ddim,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a denoiser on the configured dataset.
    Train(Common),
    /// Draw 3D hypotheses for 2D detections.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory or CSV file with detections.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        num_hypotheses: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        ddim_steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        /// Output CSV; defaults to `<out>/samples.csv`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Report MPJPE and P-MPJPE on the evaluation split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Required unless `--gt-oracle` is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score the ground truth itself instead of model samples.
        #[arg(long)]
        gt_oracle: bool,
    },
    /// Print the noise schedule as CSV.
    InspectSchedule(Common),
    /// Print the parameter count of the configured model.
    ModelInfo(Common),
    /// Generate a synthetic dataset.
    SynthData(Common),
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(exit::CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn workers() -> Result<usize, CliError> {
    Ok(evaluation::configured_workers()?)
}

/// Resolves the run config. Without `--out` it is logged to stderr; with
/// one, each command echoes it into the directory.
fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let config = RunConfig::resolve(common.config.as_deref(), &common.overrides, common.seed)?;
    if common.out.is_none() {
        eprintln!("# resolved config\n{}", config.to_toml()?);
    }
    Ok(config)
}

fn out_dir(common: &Common) -> Result<Option<PathBuf>, CliError> {
    match &common.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))?;
            Ok(Some(dir.clone()))
        }
        None => Ok(None),
    }
}

fn require_out(common: &Common, command: &str) -> Result<PathBuf, CliError> {
    out_dir(common)?.ok_or_else(|| CliError::Config(format!("{command} requires --out")))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(data::write_atomic(path, text.as_bytes())?)
}

fn echo_config(dir: &Path, config: &RunConfig) -> Result<(), CliError> {
    write(&dir.join("resolved_config.toml"), &config.to_toml()?)
}

fn dataset_dir(config: &RunConfig) -> Result<&Path, CliError> {
    config
        .data
        .dir
        .as_deref()
        .ok_or_else(|| CliError::Config("data.dir is not set".into()))
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(common) => train(&common),
        Command::Sample {
            common,
            checkpoint,
            input,
            num_hypotheses,
            mode,
            ddim_steps,
            eta,
            output,
        } => {
            let mut config = resolve(&common)?;
            if let Some(n) = num_hypotheses {
                config.sampler.num_hypotheses = n;
            }
            if let Some(m) = mode {
                config.sampler.mode = match m {
                    ModeArg::Ddpm => SamplerMode::Ddpm,
                    ModeArg::Ddim => SamplerMode::Ddim,
                };
            }
            if let Some(s) = ddim_steps {
                config.sampler.ddim_steps = s;
            }
            if let Some(e) = eta {
                config.sampler.ddim_eta = e;
            }
            sample(&common, &config, &checkpoint, &input, output)
        }
        Command::Eval {
            common,
            checkpoint,
            gt_oracle,
        } => eval(&common, checkpoint.as_deref(), gt_oracle),
        Command::InspectSchedule(common) => inspect_schedule(&common),
        Command::ModelInfo(common) => model_info(&common),
        Command::SynthData(common) => synth_data(&common),
    }
}

fn train(common: &Common) -> Result<(), CliError> {
    let config = resolve(common)?;
    let out = require_out(common, "train")?;
    echo_config(&out, &config)?;
    let dir = dataset_dir(&config)?;
    let skeleton = config.skeleton()?;
    let dataset = data::load_dataset(dir, &config.data.train_split, Some(&skeleton))?;
    if dataset.skeleton != skeleton {
        return Err(CliError::Mismatch("dataset skeleton differs from model.skeleton".into()));
    }
    let pairs = dataset.training_pairs()?;
    let train_config = config.train_config();
    let denoiser = Denoiser::new(config.denoiser_config()?, config.seed)?;
    let normalization = dataset.units;
    let seed = config.seed;
    let schedule = config.schedule;
    let every = train_config.checkpoint_every;
    let epochs = train_config.epochs;
    let mut history = Vec::new();
    let observer = |m: &training::EpochMetrics, t: &Trainer| -> graphdiff::Result<()> {
        eprintln!("epoch {:>5}  loss {:.6}  l1 {:.6}  l2 {:.6}  lr {:.3e}", m.epoch, m.loss, m.l1, m.l2, m.lr);
        history.push(*m);
        data::write_atomic(&out.join("metrics.csv"), metrics_csv(&history).as_bytes())?;
        let metadata = TrainingMetadata { epoch: m.epoch, seed };
        if every.is_some_and(|k| m.epoch % k == 0) {
            Checkpoint::new(t.denoiser(), schedule, normalization, metadata)
                .save(&out.join(format!("checkpoint_epoch{:04}.json", m.epoch)))?;
        }
        if m.epoch == epochs {
            Checkpoint::new(t.denoiser(), schedule, normalization, metadata).save(&out.join("checkpoint.json"))?;
        }
        Ok(())
    };
    training::train(&pairs, denoiser, train_config, config.loss.clone(), observer)?;
    println!("{}", out.join("checkpoint.json").display());
    Ok(())
}

fn load_input(path: &Path, config: &RunConfig, ckpt: &Checkpoint) -> Result<PoseDataset, CliError> {
    let skeleton = &ckpt.config.skeleton;
    let ds = if path.is_dir() {
        data::load_dataset(path, &config.data.eval_split, Some(skeleton))?
    } else if path.exists() {
        data::import_csv(path, skeleton, ckpt.normalization)?
    } else {
        return Err(CliError::MissingFile(path.to_path_buf()));
    };
    ckpt.check_skeleton(&ds.skeleton)?;
    Ok(ds)
}

fn sample(
    common: &Common,
    config: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: Option<PathBuf>,
) -> Result<(), CliError> {
    let out = out_dir(common)?;
    let output = match (output, &out) {
        (Some(p), _) => p,
        (None, Some(dir)) => dir.join("samples.csv"),
        (None, None) => return Err(CliError::Config("sample requires --output or --out".into())),
    };
    if let Some(dir) = &out {
        echo_config(dir, config)?;
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let denoiser = ckpt.denoiser()?;
    let schedule = ckpt.schedule.build()?;
    let ds = load_input(input, config, &ckpt)?;
    let sampler = config.sampler_config();
    let detections: Vec<_> = ds.items().iter().map(|i| i.keypoints.clone()).collect();
    let results = evaluation::sample_items(&denoiser, &detections, &schedule, &sampler, workers()?)?;
    let scale = ckpt.normalization.pose_scale_mm;
    let mut csv = String::from("item,hypothesis,joint,x_mm,y_mm,z_mm\n");
    for (i, (hyps, mean)) in results.iter().enumerate() {
        let rows = hyps.iter().enumerate().map(|(h, p)| (h.to_string(), p)).chain([("mean".to_string(), mean)]);
        for (label, pose) in rows {
            for (j, r) in pose.rows().into_iter().enumerate() {
                csv.push_str(&format!("{i},{label},{j},{},{},{}\n", r[0] * scale, r[1] * scale, r[2] * scale));
            }
        }
    }
    write(&output, &csv)?;
    println!("{}", output.display());
    Ok(())
}

fn eval(common: &Common, checkpoint: Option<&Path>, gt_oracle: bool) -> Result<(), CliError> {
    let config = resolve(common)?;
    let out = out_dir(common)?;
    if let Some(dir) = &out {
        echo_config(dir, &config)?;
    }
    let dir = dataset_dir(&config)?;
    let eval_config = config.eval_config();
    let workers = workers()?;
    let report = if gt_oracle {
        let ds = data::load_dataset(dir, &config.data.eval_split, None)?;
        evaluation::evaluate(&ds, &GroundTruthOracle, &eval_config, workers)?
    } else {
        let path = checkpoint.ok_or_else(|| CliError::Config("eval requires --checkpoint or --gt-oracle".into()))?;
        let ckpt = Checkpoint::load(path)?;
        let ds = data::load_dataset(dir, &config.data.eval_split, Some(&ckpt.config.skeleton))?;
        ckpt.check_skeleton(&ds.skeleton)?;
        let denoiser = ckpt.denoiser()?;
        let schedule = ckpt.schedule.build()?;
        let source = DiffusionSource {
            denoiser: &denoiser,
            schedule: &schedule,
            sampler: config.sampler_config(),
            pose_scale_mm: ckpt.normalization.pose_scale_mm,
        };
        evaluation::evaluate(&ds, &source as &dyn HypothesisSource, &eval_config, workers)?
    };
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = &out {
        write(&dir.join("report.csv"), &report.to_csv())?;
        write(&dir.join("report.txt"), &table)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
        write(&dir.join("report.json"), &json)?;
    }
    Ok(())
}

fn inspect_schedule(common: &Common) -> Result<(), CliError> {
    let config = resolve(common)?;
    let schedule = config.schedule.build()?;
    let csv = schedule.to_csv();
    match out_dir(common)? {
        Some(dir) => {
            echo_config(&dir, &config)?;
            write(&dir.join("schedule.csv"), &csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn model_info(common: &Common) -> Result<(), CliError> {
    let config = resolve(common)?;
    let denoiser_config = config.denoiser_config()?;
    let params = DenoiserParams::init(&denoiser_config, config.seed)?;
    let total = params.num_parameters();
    let delta = (total as f64 - REFERENCE_PARAMETERS) / REFERENCE_PARAMETERS;
    let mut text = format!(
        "model_dim {}\nnum_blocks {}\ntime_blocks {}\ntime_embed_dim {}\njoints {}\nparameters {total}\nreference {:.0}\nrelative_delta {:+.4}\n",
        denoiser_config.model_dim,
        denoiser_config.num_blocks,
        denoiser_config.num_time_blocks(),
        denoiser_config.time_embed_dim(),
        denoiser_config.skeleton.num_joints(),
        REFERENCE_PARAMETERS,
        delta
    );
    for (name, t) in params.tensors() {
        text.push_str(&format!("  {name} {:?} {}\n", t.shape(), t.len()));
    }
    print!("{text}");
    if let Some(dir) = out_dir(common)? {
        echo_config(&dir, &config)?;
        write(&dir.join("model_info.txt"), &text)?;
    }
    Ok(())
}

fn synth_data(common: &Common) -> Result<(), CliError> {
    let config = resolve(common)?;
    let out = require_out(common, "synth-data")?;
    let skeleton = config.skeleton()?;
    let camera = config.synth.camera;
    let train = data::synth_toy_dataset(&config.synth_config(config.synth.size, 0), &skeleton, &camera)?;
    let test = if config.synth.test_size > 0 {
        Some(data::synth_toy_dataset(&config.synth_config(config.synth.test_size, 1), &skeleton, &camera)?)
    } else {
        None
    };
    let mut splits = vec![(config.data.train_split.as_str(), &train)];
    if let Some(t) = &test {
        splits.push((config.data.eval_split.as_str(), t));
    }
    data::save_dataset(&out, &splits)?;
    echo_config(&out, &config)?;
    println!("{}", out.display());
    Ok(())
}
