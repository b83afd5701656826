//! Command-line front end: `gen-data`, `train`, `eval`, `predict`.
//!
//! Every subcommand also accepts `--config FILE`, a plain `key = value`
//! file whose keys are flag names without the leading dashes. Flags given
//! on the command line win over the file.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::load_checkpoint;
use crate::data::{generate_phantom, read_sample, AugmentConfig, Dataset, PhantomSpec, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::Domain;
use crate::metrics::{evaluate, EvalConfig};
use crate::network::{AttentionUNet, ModelConfig};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig, TrainData};

pub const SEED_ENV: &str = "UNISEG_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "uniseg",
    version,
    about = "Attention U-Net for joint MRI/CT lesion segmentation"
)]
#[command(args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic two-domain phantom dataset.
    GenData(GenDataArgs),
    /// CT-only pretraining followed by balanced joint training.
    Train(TrainArgs),
    /// Per-domain metrics of a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Probability and mask images for one sample.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of MRI-like samples.
    #[arg(long)]
    pub n_mri: usize,
    /// Number of CT-like samples.
    #[arg(long)]
    pub n_ct: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Random seed [default: $UNISEG_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write into a non-empty directory.
    #[arg(long)]
    pub force: bool,
    /// key = value file with defaults for these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory containing manifest.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Joint training epochs.
    #[arg(long)]
    pub epochs: usize,
    /// CT-only pretraining epochs.
    #[arg(long, default_value_t = 5)]
    pub pretrain_epochs: usize,
    /// Minibatch size, split evenly between domains.
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Pretraining rate and one-cycle peak rate.
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    /// Training resolution; samples are resized to it.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Encoder widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,128")]
    pub stage_channels: Vec<usize>,
    /// Train without data augmentation.
    #[arg(long)]
    pub no_augment: bool,
    /// Random seed [default: $UNISEG_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for best.ckpt and curves.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Also keep epoch_k.ckpt for every joint epoch.
    #[arg(long)]
    pub keep_all: bool,
    /// key = value file with defaults for these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Report CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Split to evaluate.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Resize samples to this side length [default: as stored].
    #[arg(long)]
    pub size: Option<usize>,
    /// Seed of the AUC pixel subsample [default: $UNISEG_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input .useg sample.
    #[arg(long)]
    pub input: PathBuf,
    /// Writes PREFIX_prob.pgm and PREFIX_mask.pgm.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] clap::Error),
    #[error(transparent)]
    Run(#[from] Error),
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_file(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let content = line.split('#').next().unwrap_or("").trim();
        if !content.is_empty() {
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Format {
                context: path.display().to_string(),
                offset,
                reason: format!("expected `key = value`, found {content:?}"),
            })?;
            pairs.push((key.trim().replace('_', "-"), value.trim().to_string()));
        }
        offset += line.len() as u64 + 1;
    }
    Ok(pairs)
}

/// Splices `--config` file entries in front of the command-line flags so
/// that the flags override them.
fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(pos) = args.iter().position(|a| a == "--config") else {
        return Ok(args);
    };
    let Some(path) = args.get(pos + 1).map(PathBuf::from) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut injected = Vec::new();
    for (key, value) in parse_config_file(&text, &path)? {
        match value.as_str() {
            "true" => injected.push(OsString::from(format!("--{key}"))),
            "false" => {}
            _ => {
                injected.push(OsString::from(format!("--{key}")));
                injected.push(OsString::from(value));
            }
        }
    }
    // program name and subcommand come first
    let split = 2.min(args.len());
    let mut out: Vec<OsString> = args[..split].to_vec();
    out.extend(injected);
    out.extend(args[split..].iter().cloned());
    Ok(out)
}

fn resolve_seed(seed: Option<u64>) -> Result<u64> {
    if let Some(seed) = seed {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid("seed", format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> std::result::Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = expand_config(args.into_iter().map(Into::into).collect())?;
    let cli = Cli::try_parse_from(args)?;
    match cli.command {
        Command::GenData(a) => gen_data(&a)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Predict(a) => cmd_predict(&a)?,
    }
    Ok(())
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    if args.n_mri == 0 {
        return Err(Error::Empty("MRI domain (--n-mri 0)".into()));
    }
    if args.n_ct == 0 {
        return Err(Error::Empty("CT domain (--n-ct 0)".into()));
    }
    let non_empty = std::fs::read_dir(&args.out).is_ok_and(|mut d| d.next().is_some());
    if non_empty && !args.force {
        return Err(Error::invalid(
            "out",
            format!("{} is not empty (use --force to overwrite)", args.out.display()),
        ));
    }
    let spec = PhantomSpec::new(args.size, seed);
    let mut samples = generate_phantom(&spec, Domain::Mri, args.n_mri)?;
    samples.extend(generate_phantom(&spec, Domain::Ct, args.n_ct)?);
    let dataset = Dataset::create(&args.out, &samples, true)?;
    for split in Split::ALL {
        info!(
            "{split}: {} MRI, {} CT",
            dataset.count(split, Domain::Mri),
            dataset.count(split, Domain::Ct)
        );
    }
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn by_domain(samples: Vec<Sample>) -> (Vec<Sample>, Vec<Sample>) {
    samples.into_iter().partition(|s| s.domain == Domain::Mri)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let seed = resolve_seed(args.seed)?;
    let model_config = ModelConfig {
        input_size: args.size,
        ..ModelConfig::with_stages(args.stage_channels.clone())
    };
    model_config.validate()?;
    model_config.check_size(args.size)?;
    let config = TrainConfig {
        pretrain_epochs: args.pretrain_epochs,
        joint_epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        weight_decay: args.weight_decay,
        augment: if args.no_augment {
            AugmentConfig::none()
        } else {
            AugmentConfig::default()
        },
        seed,
        image_size: args.size,
        checkpoint_dir: Some(args.out.clone()),
        curves_path: Some(args.out.join("curves.csv")),
        keep_all: args.keep_all,
        ..TrainConfig::default()
    };
    config.validate()?;
    let dataset = Dataset::open(&args.data)?;
    let (mri_train, ct_train) = by_domain(dataset.load(Split::Train, Some(args.size))?);
    let (mri_val, ct_val) = by_domain(dataset.load(Split::Val, Some(args.size))?);
    let data = TrainData {
        mri_train,
        ct_train,
        mri_val,
        ct_val,
    };
    let mut model = AttentionUNet::new(model_config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let outcome = train(&mut model, &data, &config)?;
    match outcome.best_epoch {
        Some(epoch) => {
            let r = &outcome.records[epoch - 1];
            println!(
                "best epoch {epoch}: macro Dice {:.4} (MRI {:.4}, CT {:.4})",
                r.macro_dice, r.val_dice.mri, r.val_dice.ct
            );
        }
        None => println!("no joint epochs; best.ckpt holds the pretrained weights"),
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<AttentionUNet> {
    let params = load_checkpoint(path)?;
    let config = ModelConfig::infer(&params)?;
    AttentionUNet::from_params(config, params)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    let dataset = Dataset::open(&args.data)?;
    let samples = dataset.load(args.split, args.size)?;
    if samples.is_empty() {
        return Err(Error::Empty(format!("{} split", args.split)));
    }
    let config = EvalConfig {
        seed: resolve_seed(args.seed)?,
        ..EvalConfig::default()
    };
    let report = evaluate(&model, &samples, &config)?;
    report.write_csv(&args.out)?;
    print!("{}", report.summary());
    Ok(())
}

/// 16-bit binary PGM of values in `[0, 1]` scaled to `0..=65535`.
pub fn encode_pgm16(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &v in values {
        let level = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&level.to_be_bytes());
    }
    out
}

/// 8-bit binary PGM with foreground 255 and background 0.
pub fn encode_pgm8_mask(mask: &[bool], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let model = load_model(&args.ckpt)?;
    let sample = read_sample(&args.input)?;
    let [c, h, w] = *sample.image.shape() else {
        unreachable!("validated sample")
    };
    let input = Tensor::new([1, c, h, w], sample.image.data().to_vec())?;
    let probs = model.predict(&input)?;
    let mask = crate::metrics::binarize(probs.data(), 0.5);
    let prob_path = with_suffix(&args.out, "_prob.pgm");
    let mask_path = with_suffix(&args.out, "_mask.pgm");
    write_file(&prob_path, &encode_pgm16(probs.data(), h, w))?;
    write_file(&mask_path, &encode_pgm8_mask(&mask, h, w))?;
    println!("wrote {} and {}", prob_path.display(), mask_path.display());
    Ok(())
}
