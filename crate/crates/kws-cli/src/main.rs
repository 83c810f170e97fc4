//! `kws` — train, evaluate, and run the streaming keyword spotter.
//!
//! Exit codes: 0 success, 2 input error (bad config, missing or malformed
//! files, bad audio), 3 state error (checkpoint incompatible or corrupt).

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use kws_core::audio;
use kws_core::checkpoint;
use kws_core::config::RunConfig;
use kws_core::dataset::{load_clips, load_manifest, LoadedClip};
use kws_core::detector::{StreamingSmoother, TriggerGate};
use kws_core::error::{Error, Result};
use kws_core::eval::{default_threshold_grid, det_curve, frr_at_faph, EvalCorpus, ScoredCorpus};
use kws_core::features::{StreamingFeatureExtractor, FRAME_RATE, N_MELS};
use kws_core::model::{count_parameters, ModelConfig, ModelParams, StreamingDetector};
use kws_core::train::{train, write_metrics_csv, TrainItem, TrainSet};

#[derive(Parser)]
#[command(name = "kws", about = "Streaming keyword-spotting engine", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from manifests listed in the config
    Train(TrainArgs),
    /// Sweep thresholds over an evaluation corpus and report FRR/FApH
    Eval(EvalArgs),
    /// Stream trigger events for a WAV file or raw PCM on stdin
    Detect(DetectArgs),
    /// Report per-component parameter counts
    Params(ParamsArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Override the training seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Override the checkpoint output path
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run configuration (TOML); its [model] section must match the checkpoint
    #[arg(long)]
    config: PathBuf,
    /// Trained model checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override the DET CSV output path
    #[arg(long)]
    det_out: Option<PathBuf>,
    /// Comma-separated threshold grid (default: 99 points over 0.01..0.99)
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct DetectArgs {
    /// Trained model checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Optional run configuration for the [detector] section
    #[arg(long)]
    config: Option<PathBuf>,
    /// WAV file to score; omit to read raw 16-bit LE mono 16 kHz PCM from stdin
    #[arg(long)]
    wav: Option<PathBuf>,
    /// Override the trigger threshold
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Run configuration (TOML); defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also print the same architecture with sharing, low-rank projections,
    /// and the group-separable feedforward all disabled, plus the ratio
    #[arg(long)]
    compare_vanilla: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Detect(args) => cmd_detect(args),
        Command::Params(args) => cmd_params(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn require(path: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config(format!("[data] {key} is required")))
}

/// Load manifests and split the clips by label.
fn load_split(paths: &[&Path]) -> Result<(Vec<LoadedClip>, Vec<LoadedClip>)> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for path in paths {
        let entries = load_manifest(path)?;
        for clip in load_clips(&entries)? {
            if clip.is_positive {
                positives.push(clip);
            } else {
                negatives.push(clip);
            }
        }
    }
    Ok((positives, negatives))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let pos_manifest = require(&cfg.data.train_positives, "train_positives")?;
    let neg_manifest = require(&cfg.data.train_negatives, "train_negatives")?;
    let (positives, negatives) = load_split(&[pos_manifest.as_path(), neg_manifest.as_path()])?;
    let noise = match &cfg.data.noise {
        Some(path) => load_manifest(path)?
            .iter()
            .map(|e| audio::read_wav(&e.path))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let to_item = |c: LoadedClip| TrainItem {
        keyword_end_frame: c.keyword_end.map(|(frame, _)| frame),
        clip: c.clip,
    };
    let data = TrainSet {
        positives: positives.into_iter().map(to_item).collect(),
        negatives: negatives.into_iter().map(to_item).collect(),
        noise,
    };

    let checkpoint_path = args.checkpoint.unwrap_or_else(|| cfg.checkpoint_out());
    let mut params: ModelParams<f32> = ModelParams::build(cfg.model.clone(), cfg.train.seed)?;
    let log = train(&mut params, &data, &cfg.train, &cfg.loss, &cfg.labels, |_, p| {
        checkpoint::save(&checkpoint_path, p)
    })?;
    write_metrics_csv(&cfg.metrics_out(), &log)?;
    println!("checkpoint: {}", checkpoint_path.display());
    println!("metrics: {}", cfg.metrics_out().display());
    if let Some(last) = log.last() {
        println!("final loss: {:.6}", last.loss);
    }
    Ok(())
}

fn build_eval_corpus(cfg: &RunConfig) -> Result<EvalCorpus> {
    let pos_manifest = require(&cfg.data.eval_positives, "eval_positives")?;
    let neg_manifest = require(&cfg.data.eval_negatives, "eval_negatives")?;
    let (positives, _) = load_split(&[pos_manifest.as_path()])?;
    let (_, negatives) = load_split(&[neg_manifest.as_path()])?;
    let corpus = EvalCorpus {
        positives: positives
            .into_iter()
            .filter_map(|c| {
                let end_s = c.keyword_end.map(|(_, s)| s)?;
                Some((c.clip, end_s))
            })
            .collect(),
        negatives: negatives.into_iter().map(|c| c.clip).collect(),
    };
    corpus.validate()?;
    Ok(corpus)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let params = checkpoint::load(&args.checkpoint)?;
    if params.config != cfg.model {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} was built with a different [model] section than the config",
            args.checkpoint.display()
        )));
    }
    let corpus = build_eval_corpus(&cfg)?;
    let scored = ScoredCorpus::score(&params, &corpus, &cfg.detector)?;
    let grid = if args.thresholds.is_empty() { default_threshold_grid() } else { args.thresholds };
    let curve = det_curve(&scored, &grid)?;
    let det_path = args.det_out.unwrap_or_else(|| cfg.det_out());
    kws_core::eval::write_det_csv(&det_path, &curve)?;
    println!("det: {}", det_path.display());
    println!("positives: {}", scored.num_positives());
    println!("negative_hours: {:.4}", scored.negative_hours());
    for target in [10.0, 0.5] {
        let at = frr_at_faph(&curve, target)?;
        println!(
            "frr_at_faph {{ target: {target}, frr: {:.6}, threshold: {:.4}, clamped: {} }}",
            at.frr, at.threshold, at.clamped
        );
    }
    Ok(())
}

fn cmd_detect(args: DetectArgs) -> Result<()> {
    let params = checkpoint::load(&args.checkpoint)?;
    let mut detector_cfg = match &args.config {
        Some(path) => RunConfig::load(path)?.detector,
        None => Default::default(),
    };
    if let Some(t) = args.threshold {
        detector_cfg.threshold = t;
    }
    detector_cfg.validate()?;
    let seconds_per_step = params.config.step_size() as f64 / FRAME_RATE as f64;

    let mut frontend = StreamingFeatureExtractor::new();
    let mut model = StreamingDetector::new(params)?;
    let mut smoother = StreamingSmoother::new(detector_cfg.window_len);
    let mut gate = TriggerGate::new(detector_cfg, seconds_per_step);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();

    let mut feed = |samples: &[f64], out: &mut dyn Write| -> Result<()> {
        let frames: Vec<f32> = frontend.push_samples(samples);
        if frames.is_empty() {
            return Ok(());
        }
        debug_assert_eq!(frames.len() % N_MELS, 0);
        for posterior in model.push_frames(&frames)? {
            let smoothed = smoother.push(posterior as f64);
            if let Some(event) = gate.push(smoothed) {
                writeln!(out, "{:.3},{:.4}", event.time_s, event.score)?;
                out.flush()?;
            }
        }
        Ok(())
    };

    match &args.wav {
        Some(path) => {
            let clip = audio::read_wav(path)?;
            // stream the file through the same bounded-state path
            for chunk in clip.samples.chunks(4096) {
                feed(chunk, &mut out)?;
            }
        }
        None => {
            let stdin = std::io::stdin();
            let mut reader = stdin.lock();
            let mut buf = [0u8; 8192];
            let mut carry: Option<u8> = None;
            loop {
                use std::io::Read;
                let n = reader.read(&mut buf)?;
                if n == 0 {
                    break;
                }
                // reassemble little-endian i16 across chunk boundaries
                let mut bytes: Vec<u8> = Vec::with_capacity(n + 1);
                if let Some(c) = carry.take() {
                    bytes.push(c);
                }
                bytes.extend_from_slice(&buf[..n]);
                if bytes.len() % 2 != 0 {
                    carry = bytes.pop();
                }
                let samples: Vec<f64> = bytes
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0)
                    .collect();
                feed(&samples, &mut out)?;
            }
            if carry.is_some() {
                return Err(Error::Audio("raw PCM stream ended mid-sample".into()));
            }
        }
    }
    Ok(())
}

fn print_counts(label: &str, cfg: &ModelConfig) -> usize {
    let counts = count_parameters(cfg);
    println!("{label}");
    for (name, value) in counts.components() {
        println!("  {name:<14} {value:>8}");
    }
    println!("  {:<14} {:>8}", "total", counts.total());
    counts.total()
}

fn cmd_params(args: ParamsArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.model.validate()?;
    let total = print_counts("model", &cfg.model);
    if args.compare_vanilla {
        let vanilla = ModelConfig {
            share_attention: false,
            use_lrd: false,
            use_group_separable: false,
            ..cfg.model.clone()
        };
        let vanilla_total = print_counts("vanilla (no sharing / low-rank / separable)", &vanilla);
        // per-set effect of the low-rank projections alone
        let one_set = ModelConfig { attn_blocks: 1, share_attention: true, ..cfg.model.clone() };
        let lrd_set = count_parameters(&one_set).attention_projections;
        let dense_set =
            count_parameters(&ModelConfig { use_lrd: false, ..one_set }).attention_projections;
        println!(
            "attention per-set ratio: {lrd_set}/{dense_set} = {:.4}",
            lrd_set as f64 / dense_set as f64
        );
        let a = count_parameters(&cfg.model).attention_projections;
        let b = count_parameters(&vanilla).attention_projections;
        println!("attention total ratio: {a}/{b} = {:.4}", a as f64 / b as f64);
        println!(
            "total ratio: {total}/{vanilla_total} = {:.4}",
            total as f64 / vanilla_total as f64
        );
    }
    Ok(())
}
