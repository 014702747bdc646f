//! `spcl` — partitioned-view contrastive pre-training from the command line.
//!
//! Logs go to stderr (`RUST_LOG` overrides the `info` default); data goes
//! to files or stdout. Exit codes: 0 success, 1 usage or configuration
//! error, 2 data/format/I/O error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use spcl::dataio::{
    export_embeddings, load_checkpoint, load_dataset, load_embeddings, write_synthetic_dataset, SyntheticConfig,
};
use spcl::encoder::init_params;
use spcl::flops::spcl_step_cost;
use spcl::partition::sample_partition;
use spcl::probes::{embed_dataset, knn_probe, linear_probe, LinearProbeConfig};
use spcl::rng::{Purpose, StreamRng};
use spcl::trainer::{fresh_state, pretrain, PretrainOptions};
use spcl::{EncoderConfig, Error, RunConfig};

const MANIFEST: &str = "manifest.tsv";

#[derive(Parser)]
#[command(name = "spcl", version, about = "Partitioned-view contrastive pre-training for grayscale ViTs")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset (PGM images + manifest.tsv)
    GenData(GenDataArgs),
    /// Pre-train an encoder and write metrics.tsv plus checkpoints
    Pretrain(PretrainArgs),
    /// Export frozen full-sequence embeddings of a dataset
    Embed(EmbedArgs),
    /// Evaluate exported embeddings with a linear or kNN probe
    Probe(ProbeArgs),
    /// Print the analytic compute cost of one training image
    Flops(FlopsArgs),
    /// Sample and print one partition plan
    Partition(PartitionArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    /// Training images
    #[arg(long)]
    count: usize,
    /// Test images, written after the training ones
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    noise: Option<f32>,
}

/// Configuration sources, applied in order: defaults, file, `--set`, `--seed`.
#[derive(Args)]
struct ConfigArgs {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=5` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.overrides.is_empty() && self.seed.is_none()
    }

    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        cfg.encoder.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory containing manifest.tsv
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; its stored configuration is used
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many optimizer steps in total
    #[arg(long)]
    stop_after: Option<u64>,
    /// Worker threads; 1 selects sequential, bitwise-reproducible mode
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct EmbedArgs {
    /// Trained checkpoint; omit together with `--random-init` for a baseline
    #[arg(long, conflicts_with = "random_init")]
    checkpoint: Option<PathBuf>,
    /// Embed with freshly initialized parameters (seeded by the config)
    #[arg(long)]
    random_init: bool,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Manifest split to embed (all records when omitted)
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// k-nearest-neighbour probe with this k
    #[arg(long, conflicts_with = "linear")]
    knn: Option<usize>,
    /// Linear probe (the default)
    #[arg(long)]
    linear: bool,
    #[arg(long, default_value_t = LinearProbeConfig::default().epochs)]
    epochs: usize,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, default_value_t = EncoderConfig::default().depth)]
    depth: usize,
    #[arg(long, default_value_t = EncoderConfig::default().dim)]
    dim: usize,
    #[arg(long, default_value_t = EncoderConfig::default().heads)]
    heads: usize,
    #[arg(long, default_value_t = EncoderConfig::default().mlp_ratio)]
    mlp_ratio: usize,
    #[arg(long, default_value_t = EncoderConfig::default().patch)]
    patch: usize,
    #[arg(long, default_value_t = EncoderConfig::default().image)]
    image: usize,
    #[arg(long, default_value_t = spcl::partition::DEFAULT_MASK_RATIO)]
    ratio: f64,
}

#[derive(Args)]
struct PartitionArgs {
    /// Number of patches
    #[arg(long)]
    n: usize,
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    substream: u64,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Ratio { .. } => 1,
        Error::NonFinite(_) | Error::DegenerateEmbedding { .. } => 3,
        _ => 2,
    }
}

fn set_threads(threads: usize) -> Result<(), Error> {
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn echo_config(cfg: &RunConfig) {
    info!("effective configuration:");
    for line in cfg.to_text().lines() {
        info!("  {line}");
    }
}

fn gen_data(a: &GenDataArgs) -> Result<(), Error> {
    let mut cfg = SyntheticConfig {
        classes: a.classes,
        size: a.size,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    if let Some(noise) = a.noise {
        cfg.noise_std = noise;
    }
    let manifest = write_synthetic_dataset(&a.out, &cfg, a.count, a.test)?;
    info!("wrote {} + {} images, manifest {}", a.count, a.test, manifest.display());
    Ok(())
}

fn run_pretrain(a: &PretrainArgs) -> Result<(), Error> {
    set_threads(a.threads)?;
    let images: Vec<_> = load_dataset(&a.data.join(MANIFEST), Some(&a.split))?
        .into_iter()
        .map(|(img, _)| img)
        .collect();
    if images.is_empty() {
        return Err(Error::Config(format!("split `{}` of {} is empty", a.split, a.data.display())));
    }
    let state = match &a.resume {
        Some(path) => {
            if !a.config.is_empty() {
                return Err(Error::Config("--resume uses the checkpoint's configuration; drop --config/--set/--seed".into()));
            }
            let mut state = load_checkpoint(path)?;
            state.train.parallel = a.threads != 1;
            info!("resuming {} at step {}", path.display(), state.step());
            state
        }
        None => {
            let mut cfg = a.config.resolve()?;
            cfg.train.parallel = a.threads != 1;
            let state = fresh_state(cfg.encoder, cfg.train, images.len())?;
            if images.iter().any(|i| i.width() != state.encoder.image || i.height() != state.encoder.image) {
                return Err(Error::Config(format!("images must be {0}x{0} for this encoder", state.encoder.image)));
            }
            state
        }
    };
    echo_config(&RunConfig {
        encoder: state.encoder.clone(),
        train: state.train.clone(),
    });
    let opts = PretrainOptions {
        out_dir: Some(a.out.clone()),
        stop_after: a.stop_after,
    };
    let out = pretrain(state, &images, &opts)?;
    if out.collapse_warnings > 0 {
        warn!("{} collapse warnings during the run", out.collapse_warnings);
    }
    if let Some(last) = out.metrics.last() {
        info!("finished at step {}: loss {:.5}, tau {:.3}", out.state.step(), last.loss, last.tau);
    }
    Ok(())
}

fn embed(a: &EmbedArgs) -> Result<(), Error> {
    set_threads(a.threads)?;
    let (encoder, params) = match (&a.checkpoint, a.random_init) {
        (Some(path), false) => {
            if !a.config.is_empty() {
                return Err(Error::Config("--checkpoint carries its own configuration".into()));
            }
            let state = load_checkpoint(path)?;
            (state.encoder, state.params)
        }
        (None, true) => {
            let cfg = a.config.resolve()?;
            echo_config(&cfg);
            let params = init_params(&cfg.encoder, &mut StreamRng::new(cfg.train.seed, Purpose::Init, 0))?;
            (cfg.encoder, params)
        }
        _ => return Err(Error::Config("pass either --checkpoint or --random-init".into())),
    };
    let data = load_dataset(&a.data.join(MANIFEST), a.split.as_deref())?;
    let emb = embed_dataset(&encoder, &params, &data)?;
    export_embeddings(&emb, &a.out)?;
    info!("wrote {} embeddings of dimension {} to {}", emb.len(), emb.dim(), a.out.display());
    Ok(())
}

fn probe(a: &ProbeArgs) -> Result<(), Error> {
    let train = load_embeddings(&a.train)?;
    let test = load_embeddings(&a.test)?;
    match a.knn {
        Some(k) => println!("knn{k}_accuracy\t{:.6}", knn_probe(&train, &test, k)?),
        None => {
            let cfg = LinearProbeConfig {
                epochs: a.epochs,
                ..LinearProbeConfig::default()
            };
            let r = linear_probe(&train, &test, &cfg)?;
            println!("linear_accuracy\t{:.6}", r.accuracy);
            println!("train_accuracy\t{:.6}", r.train_accuracy);
            for (c, acc) in r.per_class.iter().enumerate() {
                match acc {
                    Some(acc) => println!("class_{c}_accuracy\t{acc:.6}"),
                    None => println!("class_{c}_accuracy\tNA"),
                }
            }
        }
    }
    Ok(())
}

fn flops(a: &FlopsArgs) -> Result<(), Error> {
    let cfg = EncoderConfig {
        depth: a.depth,
        dim: a.dim,
        heads: a.heads,
        mlp_ratio: a.mlp_ratio,
        patch: a.patch,
        image: a.image,
        ..EncoderConfig::default()
    };
    for (k, v) in spcl_step_cost(&cfg, a.ratio)?.rows() {
        println!("{k}\t{v}");
    }
    Ok(())
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn partition(a: &PartitionArgs) -> Result<(), Error> {
    let plan = sample_partition(a.n, a.ratio, &mut StreamRng::new(a.seed, Purpose::Partition, a.substream))?;
    println!("patches\t{}", plan.patches);
    println!("ratio\t{}", a.ratio);
    println!("seed\t{}", plan.seed);
    println!("substream\t{}", plan.substream);
    println!("visible\t{}", join(&plan.visible));
    println!("group_a\t{}", join(&plan.group_a));
    println!("group_b\t{}", join(&plan.group_b));
    println!("discarded\t{}", plan.discarded.map_or("-".to_string(), |d| d.to_string()));
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();

    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => run_pretrain(a),
        Command::Embed(a) => ensure_parent(&a.out).and_then(|_| embed(a)),
        Command::Probe(a) => probe(a),
        Command::Flops(a) => flops(a),
        Command::Partition(a) => partition(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
