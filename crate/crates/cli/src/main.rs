use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use regionblip::data::dataset::{dataset_file, Split};
use regionblip::filter::{mine_regions, FilterConfig};
use regionblip::model::{ModelConfig, RegionBlip, BASE_MODALITY};
use regionblip::pipeline::{self, jsonl_logger};
use regionblip::trainer::{load_checkpoint, pretrain_image_encoder, save_checkpoint, TrainConfig};
use regionblip::{Error, ModalityId};

/// Region-aware multi-modal pre-training at toy scale.
#[derive(Parser, Debug)]
#[command(name = "regionblip", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (gen-data) or file (everything else).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `total_steps`.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    modality: Option<ModalityId>,
    #[arg(long, global = true)]
    dataset_root: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Train and evaluate region modalities without position-assisted
    /// feature extraction.
    #[arg(long, global = true)]
    no_pafe: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize train and test splits for every modality.
    GenData {
        #[arg(long, default_value_t = 400)]
        train_scenes: usize,
        #[arg(long, default_value_t = 40)]
        test_scenes: usize,
    },
    /// Pre-train the image encoder on generated scenes and freeze it.
    PretrainEncoder,
    /// Pre-train the toy language model and freeze it. Starts from
    /// `--checkpoint` when given, else from a fresh model.
    PretrainLm {
        #[arg(long, default_value_t = 500)]
        corpus_scenes: usize,
    },
    /// Pre-train the Q-Former base on image-text data and freeze it.
    PretrainBase,
    /// Register a new modality's adapter set on a frozen base.
    Extend,
    /// Semi-hybrid adapter training over the registered modalities.
    Pretrain,
    /// Write an evaluation report.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Discover, caption and filter regions of an image-text dataset.
    MineRegions {
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
    },
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

type Outcome = Result<serde_json::Value, Failure>;

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T, Failure> {
    v.as_ref().ok_or_else(|| Failure::Config(format!("missing required flag --{flag}")))
}

fn train_config(c: &Common) -> Result<TrainConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(l) = c.lambda {
        cfg.lambda = l;
    }
    if let Some(s) = c.steps {
        cfg.total_steps = s;
        if s > 0 && cfg.warmup_steps >= s {
            cfg.warmup_steps = s / 10;
            log::warn!("warmup shortened to {} steps to fit --steps {s}", cfg.warmup_steps);
        }
    }
    if c.no_pafe {
        cfg.use_pafe = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn log_path(out: &Path) -> PathBuf {
    out.with_extension("log.jsonl")
}

fn train_logger(out: &Path) -> Result<impl FnMut(&regionblip::trainer::LogRecord), Failure> {
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(Error::from)?;
    }
    let file = File::create(log_path(out)).map_err(Error::from)?;
    let mut write = jsonl_logger(BufWriter::new(file));
    Ok(move |r: &regionblip::trainer::LogRecord| {
        if r.step % 50 == 0 {
            log::info!("step {} {} total {:.4} lr {:.3e}", r.step, r.modality, r.total, r.lr);
        }
        write(r);
    })
}

fn run(cli: Cli) -> Outcome {
    let c = &cli.common;
    match cli.command {
        Command::GenData { train_scenes, test_scenes } => {
            let out = require(&c.out, "out")?;
            let summary = pipeline::gen_data(out, train_scenes, test_scenes, c.seed.unwrap_or(0))?;
            Ok(json!({ "command": "gen-data", "root": out, "splits": summary }))
        }
        Command::PretrainEncoder => {
            let out = require(&c.out, "out")?;
            let cfg = train_config(c)?;
            let mut model = RegionBlip::new(ModelConfig::default(), cfg.seed)?;
            let losses = pretrain_image_encoder(&mut model, &cfg, train_logger(out)?)?;
            save_checkpoint(out, &model)?;
            Ok(json!({ "command": "pretrain-encoder", "checkpoint": out, "steps": losses.len(), "final_loss": losses.last() }))
        }
        Command::PretrainLm { corpus_scenes } => {
            let out = require(&c.out, "out")?;
            let cfg = train_config(c)?;
            let mut model = match &c.checkpoint {
                Some(ckpt) => load_checkpoint(ckpt)?,
                None => RegionBlip::new(ModelConfig::default(), cfg.seed)?,
            };
            let losses = pipeline::run_pretrain_lm(&mut model, &cfg, corpus_scenes, train_logger(out)?)?;
            save_checkpoint(out, &model)?;
            Ok(json!({ "command": "pretrain-lm", "checkpoint": out, "steps": losses.len(), "final_loss": losses.last() }))
        }
        Command::PretrainBase => {
            let (out, ckpt, root) = (require(&c.out, "out")?, require(&c.checkpoint, "checkpoint")?, require(&c.dataset_root, "dataset-root")?);
            let cfg = train_config(c)?;
            let mut model = load_checkpoint(ckpt)?;
            pipeline::run_pretrain_base(&mut model, root, &cfg, train_logger(out)?)?;
            save_checkpoint(out, &model)?;
            Ok(json!({ "command": "pretrain-base", "checkpoint": out, "steps": cfg.total_steps }))
        }
        Command::Extend => {
            let (out, ckpt, m) = (require(&c.out, "out")?, require(&c.checkpoint, "checkpoint")?, *require(&c.modality, "modality")?);
            let mut model = load_checkpoint(ckpt)?;
            pipeline::extend(&mut model, m, c.seed.unwrap_or(0))?;
            save_checkpoint(out, &model)?;
            Ok(json!({ "command": "extend", "checkpoint": out, "modality": m }))
        }
        Command::Pretrain => {
            let (out, ckpt, root) = (require(&c.out, "out")?, require(&c.checkpoint, "checkpoint")?, require(&c.dataset_root, "dataset-root")?);
            let mut cfg = train_config(c)?;
            let mut model = load_checkpoint(ckpt)?;
            cfg.modality_order = match c.modality {
                Some(m) => vec![m],
                None => cfg.modality_order.into_iter().filter(|m| *m != BASE_MODALITY && model.adapters.contains_key(m)).collect(),
            };
            if cfg.modality_order.is_empty() {
                return Err(Failure::Config("no registered modality to train; run extend first".into()));
            }
            if cfg.total_steps > 0 {
                pipeline::run_pretrain(&mut model, root, &cfg, train_logger(out)?)?;
            }
            save_checkpoint(out, &model)?;
            Ok(json!({ "command": "pretrain", "checkpoint": out, "steps": cfg.total_steps, "modalities": cfg.modality_order }))
        }
        Command::Eval { split, limit } => {
            let (ckpt, root) = (require(&c.checkpoint, "checkpoint")?, require(&c.dataset_root, "dataset-root")?);
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                s => return Err(Failure::Config(format!("unknown split `{s}`"))),
            };
            let model = load_checkpoint(ckpt)?;
            let m = c.modality.unwrap_or(BASE_MODALITY);
            let report = pipeline::evaluate(&model, root, m, split, c.seed.unwrap_or(0), !c.no_pafe, limit)?;
            let value = serde_json::to_value(&report).map_err(Error::from)?;
            if let Some(out) = &c.out {
                if let Some(dir) = out.parent() {
                    std::fs::create_dir_all(dir).map_err(Error::from)?;
                }
                std::fs::write(out, serde_json::to_string_pretty(&value).map_err(Error::from)? + "\n").map_err(Error::from)?;
            }
            Ok(value)
        }
        Command::MineRegions { tau } => {
            let (out, root) = (require(&c.out, "out")?, require(&c.dataset_root, "dataset-root")?);
            let cfg = FilterConfig { tau, ..Default::default() };
            let (pairs, stats) = mine_regions(&dataset_file(root, ModalityId::ImgText, Split::Train), &cfg)?;
            let mut text = String::new();
            for p in &pairs {
                text += &serde_json::to_string(p).map_err(Error::from)?;
                text.push('\n');
            }
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir).map_err(Error::from)?;
            }
            std::fs::write(out, text).map_err(Error::from)?;
            Ok(json!({ "command": "mine-regions", "out": out, "stats": stats }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            let (code, kind, msg) = match f {
                Failure::Config(m) => (2, "config", m),
                Failure::Run(m) => (1, "runtime", m),
            };
            eprintln!("{}", json!({ "error": kind, "message": msg }));
            ExitCode::from(code)
        }
    }
}
