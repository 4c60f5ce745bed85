//! `tagforge`: preprocess dumps, build vocabularies, train, evaluate and
//! serve tag recommenders.

use std::cell::Cell;
use std::fs::File;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use tagforge_core::checkpoint::{load_checkpoint, save_checkpoint};
use tagforge_core::corpus::{build_dataset, chronological_split, read_dataset, write_dataset, Post};
use tagforge_core::encoder::{BackboneAssets, Registry};
use tagforge_core::metrics::{evaluate_corpus, AblationReport, MetricsReport};
use tagforge_core::model::{parse_components, variant_components, Component, ModelConfig, TagModel};
use tagforge_core::synth::{SynthConfig, SyntheticTask};
use tagforge_core::train::{
    prepare_examples, train, TrainConfig, TrainOptions, TrainingState, DEFAULT_BATCH_SIZE, DEFAULT_LR, DEFAULT_SEED,
};
use tagforge_core::vocab::{build_vocab, count_tags, TagVocabulary, DEFAULT_THETA};
use tagforge_service::{ServiceConfig, SuggestRequest, Tagger, DEFAULT_K, DEFAULT_MAX_IN_FLIGHT};
use tracing_subscriber::EnvFilter;

const EVAL_BATCH: usize = 64;

#[derive(Parser)]
#[command(name = "tagforge", version, about = "Tag recommendation for question posts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a Posts.xml dump into a JSONL dataset.
    Preprocess {
        #[arg(long)]
        dump: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many kept posts.
        #[arg(long)]
        limit: Option<u64>,
    },
    /// Count tags and write the vocabulary of common tags.
    BuildVocab {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THETA)]
        theta: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Hold out the latest posts as a test set.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test_size: usize,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
    /// Fine-tune a model and write a checkpoint.
    Train {
        #[command(flatten)]
        run: TrainArgs,
        #[arg(long, default_value = "title,description,code")]
        components: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint saved with training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Per-step JSONL log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a test set with a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per component variant.
    Ablate {
        #[command(flatten)]
        run: TrainArgs,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "all,notitle,nodesp,nocode")]
        variants: String,
        /// Directory for per-variant checkpoints.
        #[arg(long)]
        work_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Suggest tags for one post.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        title: String,
        /// Body as HTML or plain text.
        #[arg(long)]
        body_file: Option<PathBuf>,
        #[arg(short, default_value_t = DEFAULT_K)]
        k: usize,
    },
    /// Run the HTTP suggestion service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, default_value_t = DEFAULT_MAX_IN_FLIGHT)]
        max_in_flight: usize,
        /// Allowed cross-origin caller; repeat for several. Any origin when omitted.
        #[arg(long = "cors-origin")]
        cors_origins: Vec<String>,
    },
    /// Write a synthetic keyword-planted dataset.
    Synth {
        #[arg(long, default_value_t = 3000)]
        posts: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    backbone: String,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    epochs: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    warmup_steps: usize,
    /// Disable gradient clipping.
    #[arg(long)]
    no_clip: bool,
    /// One backbone for all components.
    #[arg(long)]
    share_encoders: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let mut config = TrainConfig {
            batch_size: self.batch_size,
            initial_lr: self.lr,
            epochs: self.epochs,
            seed: self.seed,
            warmup_steps: self.warmup_steps,
            ..TrainConfig::default()
        };
        if self.no_clip {
            config.clip_norm = None;
        }
        config
    }
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Preprocess { dump, out, limit } => {
            let reader = BufReader::new(File::open(&dump).with_context(|| format!("opening {}", dump.display()))?);
            let summary = build_dataset(reader, &out, limit)?;
            println!("{}", serde_json::to_string(&summary)?);
        }
        Command::BuildVocab { data, theta, out } => {
            let posts = read_dataset(&data)?;
            let vocab = build_vocab(&count_tags(&posts), theta)?;
            vocab.save(&out)?;
            println!("{} tags with count >= {theta}", vocab.len());
        }
        Command::Split {
            data,
            test_size,
            train_out,
            test_out,
        } => {
            let (train_posts, test_posts) = chronological_split(read_dataset(&data)?, test_size);
            write_dataset(&train_out, &train_posts)?;
            write_dataset(&test_out, &test_posts)?;
            println!("train {} test {}", train_posts.len(), test_posts.len());
        }
        Command::Train {
            run,
            components,
            out,
            resume,
            log,
        } => {
            let digest = train_command(
                &run,
                parse_components(&components)?,
                &out,
                resume.as_deref(),
                log.as_deref(),
            )?;
            println!("{digest}");
        }
        Command::Evaluate { checkpoint, test, out } => {
            let ckpt = load_checkpoint(&checkpoint, DType::F32, &Device::Cpu)?;
            let posts = read_dataset(&test)?;
            let report = evaluate_corpus(&ckpt.model, &ckpt.vocab, &posts, EVAL_BATCH, Some(ckpt.digest))?;
            std::fs::write(&out, serde_json::to_string_pretty(&report.to_json())?)?;
            print!("{}", report.table());
        }
        Command::Ablate {
            run,
            test,
            variants,
            work_dir,
            out,
        } => {
            let report = ablate(&run, &test, &variants, &work_dir)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report.to_json())?)?;
            print!("{}", report.table());
        }
        Command::Predict {
            checkpoint,
            title,
            body_file,
            k,
        } => {
            let body = match body_file {
                Some(path) => std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?,
                None => String::new(),
            };
            let tagger = Tagger::load(&checkpoint)?;
            let response = tagger.predict(&SuggestRequest { title, body, k })?;
            for tag in response.tags {
                println!("{}\t{:.4}", tag.name, tag.score);
            }
        }
        Command::Serve {
            checkpoint,
            bind,
            max_in_flight,
            cors_origins,
        } => {
            if max_in_flight == 0 {
                bail!("--max-in-flight must be at least 1");
            }
            let tagger = Arc::new(Tagger::load(&checkpoint)?);
            let config = ServiceConfig {
                max_in_flight,
                cors_origins,
            };
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(tagforge_service::serve_with_shutdown(
                tagger,
                bind,
                &config,
                |addr| tracing::info!(%addr, "listening"),
                tagforge_service::ctrl_c(),
            ))?;
        }
        Command::Synth { posts, seed, out } => {
            let task = SyntheticTask::new(SynthConfig {
                posts,
                seed,
                ..SynthConfig::default()
            })?;
            write_dataset(&out, &task.generate())?;
        }
    }
    Ok(())
}

fn fresh_model(run: &TrainArgs, components: Vec<Component>, vocab: &TagVocabulary) -> Result<TagModel> {
    let registry = Registry::from_env()?;
    let assets = BackboneAssets::resolve(&registry.resolve(&run.backbone)?)?;
    let mut config = ModelConfig::new(components, &run.backbone, vocab.len(), assets.spec.hidden_size);
    config.share_encoders = run.share_encoders;
    Ok(TagModel::initialize(
        config,
        &assets,
        run.seed,
        DType::F32,
        &Device::Cpu,
    )?)
}

/// Trains into `out`, saving resumable state after every epoch. Returns
/// the model digest.
fn train_command(
    run: &TrainArgs,
    components: Vec<Component>,
    out: &Path,
    resume: Option<&Path>,
    log: Option<&Path>,
) -> Result<String> {
    let posts = read_dataset(&run.data)?;
    let vocab = TagVocabulary::load(&run.vocab)?;
    let (model, state) = match resume {
        Some(dir) => {
            let ckpt = load_checkpoint(dir, DType::F32, &Device::Cpu)?;
            if ckpt.vocab != vocab {
                bail!("vocabulary differs from the one in {}", dir.display());
            }
            let state = ckpt
                .training
                .with_context(|| format!("{} has no training state", dir.display()))?;
            (ckpt.model, Some(state))
        }
        None => (fresh_model(run, components, &vocab)?, None),
    };
    let examples = prepare_examples(&model, &posts, &vocab)?;
    tracing::info!(posts = posts.len(), examples = examples.len(), "prepared");

    let digest = Cell::new(None);
    let mut save = |state: &TrainingState| {
        digest.set(Some(save_checkpoint(&model, &vocab, out, Some(state))?));
        Ok(())
    };
    train(
        &model,
        &examples,
        &run.config(),
        TrainOptions {
            log_path: log,
            resume: state,
            on_checkpoint: Some(&mut save),
        },
    )?;
    match digest.take() {
        Some(d) => Ok(d),
        None => Ok(save_checkpoint(&model, &vocab, out, None)?),
    }
}

fn ablate(run: &TrainArgs, test: &Path, variants: &str, work_dir: &Path) -> Result<AblationReport> {
    let test_posts: Vec<Post> = read_dataset(test)?;
    let mut reports: Vec<(String, MetricsReport)> = Vec::new();
    for variant in variants.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let components = variant_components(variant)?;
        let out = work_dir.join(variant);
        tracing::info!(variant, "training");
        let digest = train_command(run, components, &out, None, None)?;
        let ckpt = load_checkpoint(&out, DType::F32, &Device::Cpu)?;
        let report = evaluate_corpus(&ckpt.model, &ckpt.vocab, &test_posts, EVAL_BATCH, Some(digest))?;
        reports.push((variant.to_string(), report));
    }
    let Some((baseline, _)) = reports.first() else {
        bail!("no variants given");
    };
    let baseline = baseline.clone();
    Ok(AblationReport::new(&baseline, reports)?)
}
