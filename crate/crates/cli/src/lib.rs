//! `ethoclip` subcommands. Every command returns a JSON summary that
//! `main` prints on stdout; logs go to stderr.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ethoclip::ethogram::Ethogram;
use ethoclip::lora::Placement;
use serde::de::DeserializeOwned;
use serde_json::Value;

pub mod cmd;

#[derive(Debug, Parser)]
#[command(name = "ethoclip", version, about = "Video-text retrieval for animal behaviour footage")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic corpora, clip extraction and manifest checks.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Turn raw videos into a filtered pair manifest.
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Train a model: LoRA on top of a base checkpoint, or every weight with --full.
    Train(TrainArgs),
    /// Train and evaluate every (rank, placement) cell of a grid.
    Sweep(SweepArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
    #[command(subcommand)]
    Index(IndexCommand),
    /// Serve an index over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Write a procedural corpus: frames/, assets.json and manifest.jsonl.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// SyntheticSpec as JSON; defaults otherwise.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write one montage PNG per manifest clip, at model resolution.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
    },
    /// Check a manifest, and optionally its frames and labels.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        source: Option<PathBuf>,
        #[command(flatten)]
        ethogram: EthogramArg,
    },
}

#[derive(Debug, Subcommand)]
pub enum PipelineCommand {
    Run(PipelineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Backends {
    /// Deterministic offline stand-ins; needs --transcripts.
    Fake,
    /// HTTP services configured through ETHOCLIP_* environment variables.
    Remote,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// JSON array of video assets.
    #[arg(long)]
    pub assets: PathBuf,
    /// Frame directory, `<video_id>/<index:05>.png`.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long, value_enum, default_value_t = Backends::Fake)]
    pub backends: Backends,
    /// Scripted transcripts for the fake transcriber, keyed by video id.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    /// PipelineConfig as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory with prompt overrides (quality.txt, behavior.txt, translate.txt).
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[command(flatten)]
    pub ethogram: EthogramArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EthogramArg {
    /// JSON array of {name, description}; the built-in capuchin ethogram otherwise.
    #[arg(long = "ethogram")]
    pub path: Option<PathBuf>,
}

impl EthogramArg {
    pub fn load(&self) -> Result<Ethogram> {
        match &self.path {
            Some(p) => Ok(Ethogram::load(p)?),
            None => Ok(Ethogram::capuchin()),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    /// Full checkpoint to adapt; required unless --full.
    #[arg(long, required_unless_present = "full")]
    pub base: Option<PathBuf>,
    /// Train every weight of a fresh model instead of attaching adapters.
    #[arg(long, conflicts_with_all = ["base", "rank", "placement"])]
    pub full: bool,
    #[arg(long, required_unless_present = "full")]
    pub rank: Option<usize>,
    #[arg(long, required_unless_present = "full", value_parser = parse_placement)]
    pub placement: Option<Placement>,
    /// Frames per clip.
    #[arg(long, value_parser = parse_frames)]
    pub frames: usize,
    /// ModelConfig as JSON, for --full.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// TrainConfig as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reset the temperature before training.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Output directory; also where a resumable bundle is kept.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue the bundle already in --out.
    #[arg(long)]
    pub resume: bool,
    /// Save the bundle every this many updates.
    #[arg(long)]
    pub save_every: Option<usize>,
    /// Stop once this many updates have been taken in total; finish later with --resume.
    #[arg(long)]
    pub max_updates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// SweepGrid as JSON.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub base: PathBuf,
    #[command(flatten)]
    pub ethogram: EthogramArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[command(flatten)]
    pub ethogram: EthogramArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Hits@K and per-behaviour NDCG@5.
    Retrieval(EvalArgs),
    /// Top-K zero-shot classification over the ethogram.
    Zeroshot(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum IndexCommand {
    /// Embed manifest clips with a checkpoint and write an index file.
    Build {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        /// Write the index even if some clips cannot be extracted.
        #[arg(long)]
        allow_partial: bool,
    },
    /// Print an index header and behaviour counts.
    Inspect {
        #[arg(long)]
        index: PathBuf,
        /// Also list every entry's metadata.
        #[arg(long)]
        entries: bool,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: std::net::SocketAddr,
    /// Frame directory for montages.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[command(flatten)]
    pub ethogram: EthogramArg,
}

fn parse_frames(s: &str) -> Result<usize, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err(format!("clips have 8 or 16 frames, not {s}")),
    }
}

fn parse_placement(s: &str) -> Result<Placement, String> {
    s.parse().map_err(|e: ethoclip::Error| e.to_string())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    ethoclip::checkpoint::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::Corpus(c) => cmd::corpus::run(c),
        Command::Pipeline(PipelineCommand::Run(a)) => cmd::pipeline::run(a),
        Command::Train(a) => cmd::train::train(a),
        Command::Sweep(a) => cmd::train::sweep(a),
        Command::Eval(c) => cmd::eval::run(c),
        Command::Index(c) => cmd::index::run(c),
        Command::Serve(a) => cmd::index::serve(a),
    }
}
