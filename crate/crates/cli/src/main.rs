//! `sae`: generate stroke datasets, pre-train the autoencoders, fine-tune a
//! stroke recognizer with parameter surgery, and export evaluations,
//! reconstructions and embeddings.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sae_core::checkpoint::ModelCheckpoint;
use sae_core::pipeline::{self, Arch, Dataset, RunConfig};
use sae_core::strokegen::Form;
use sae_core::zeroshot::Recognizer;
use sae_core::{Result, SaeError};

#[derive(Parser)]
#[command(name = "sae", version, about = "Stroke-sequence autoencoders for Chinese characters")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Autoencoder: vit or rnt.
    #[arg(long, global = true)]
    arch: Option<Arch>,
    /// Target frames: A (cumulative) or B (one stroke each).
    #[arg(long, global = true)]
    form: Option<Form>,
    /// Number of seen (training) classes.
    #[arg(long, global = true)]
    n_seen: Option<usize>,
    /// Pre-training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Peak learning rate.
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Output directory; must be new or empty.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write stroke specs, golden renders and the split manifest.
    GenData {
        /// Stroke-JSON lines file; the synthetic alphabet is used otherwise.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Pre-train the selected autoencoder on the seen classes.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train a stroke recognizer, apply surgery from a pre-trained
    /// checkpoint and keep training the tunable parameters.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pre-trained reconstruction checkpoint (rnt).
        #[arg(long)]
        pretrained: PathBuf,
        /// Already trained recognizer; trained from scratch when absent.
        #[arg(long)]
        trained: Option<PathBuf>,
    },
    /// Zero-shot evaluation of a fine-tuned recognizer on the held-out classes.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Original and reconstructed stroke sequences as PGM strips.
    Reconstruct {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Character embeddings, similarities and clusters from a ViT checkpoint.
    Embed {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of characters to embed.
        #[arg(long)]
        count: Option<usize>,
    },
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(a) = self.arch {
            cfg.arch = a;
        }
        if let Some(f) = self.form {
            cfg.form = Some(f);
        }
        if let Some(n) = self.n_seen {
            cfg.n_seen = n;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(lr) = self.lr {
            cfg.optim.lr_max = lr;
        }
        Ok(cfg)
    }
}

fn data_root(flag: Option<&PathBuf>, cfg: &RunConfig) -> PathBuf {
    flag.cloned()
        .or_else(|| std::env::var_os("SAE_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| cfg.data_dir.clone())
}

fn out_dir(common: &Common, cfg: &RunConfig, command: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.out_dir.join(command))
}

fn load_data(flag: Option<&PathBuf>, cfg: &mut RunConfig) -> Result<Dataset> {
    let dir = data_root(flag, cfg);
    cfg.data_dir = dir.clone();
    Dataset::load(&dir)
}

fn start(out: &Path, cfg: &mut RunConfig) -> Result<()> {
    cfg.validate()?;
    cfg.out_dir = out.to_path_buf();
    pipeline::prepare_run_dir(out, cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = cli.common.config()?;
    match &cli.command {
        Command::GenData { source } => {
            if source.is_some() {
                cfg.source = source.clone();
            }
            let out = cli.common.out.clone().unwrap_or_else(|| data_root(None, &cfg));
            cfg.data_dir = out.clone();
            let ds = pipeline::gen_data(&cfg, &out)?;
            println!(
                "{} characters: {} seen, {} held out, written to {}",
                ds.specs.len(),
                ds.split.train.len(),
                ds.split.test.len(),
                out.display()
            );
        }
        Command::Pretrain { data } => {
            let ds = load_data(data.as_ref(), &mut cfg)?;
            if ds.split.train.len() != cfg.n_seen {
                log::warn!("dataset has {} seen classes; --n-seen is ignored for existing data", ds.split.train.len());
            }
            let out = out_dir(&cli.common, &cfg, "pretrain");
            start(&out, &mut cfg)?;
            let p = pipeline::pretrain(&cfg, &ds)?;
            pipeline::save_pretrained(&p, &out)?;
            let r = &p.report;
            println!(
                "best epoch {} held-out MSE {:.6} (blank {:.6}); checkpoint {}",
                r.best_epoch,
                r.best_val_mse,
                r.blank_mse,
                out.join("best.ckpt").display()
            );
        }
        Command::Finetune { data, pretrained, trained } => {
            let ds = load_data(data.as_ref(), &mut cfg)?;
            let pre = ModelCheckpoint::load(pretrained)?;
            let tr = trained.as_ref().map(ModelCheckpoint::load).transpose()?;
            let out = out_dir(&cli.common, &cfg, "finetune");
            start(&out, &mut cfg)?;
            let f = pipeline::finetune(&cfg, &ds, &pre, tr.as_ref())?;
            pipeline::save_finetuned(&f, &out)?;
            println!(
                "surgery: {} overwritten, {} frozen, {} tuned; seen exact match {:.4}; checkpoint {}",
                f.report.overwrite,
                f.report.freeze,
                f.report.tune,
                f.report.seen_match,
                out.join("finetuned.ckpt").display()
            );
        }
        Command::Eval { data, checkpoint } => {
            let ds = load_data(data.as_ref(), &mut cfg)?;
            let model = Recognizer::from_checkpoint(&ModelCheckpoint::load(checkpoint)?)?;
            let out = out_dir(&cli.common, &cfg, "eval");
            start(&out, &mut cfg)?;
            let (e, sets) = pipeline::evaluate(&cfg, &ds, &model)?;
            pipeline::save_evaluation(&e, &sets, &out)?;
            print!("{}", e.report.summary_csv());
            println!("random baseline {:.6}", e.random_baseline);
        }
        Command::Reconstruct { data, checkpoint } => {
            let ds = load_data(data.as_ref(), &mut cfg)?;
            let ck = ModelCheckpoint::load(checkpoint)?;
            let out = out_dir(&cli.common, &cfg, "reconstruct");
            start(&out, &mut cfg)?;
            let n = pipeline::reconstruct(&ds, &ck, &out)?;
            println!("{n} strips in {}", out.join("strips").display());
        }
        Command::Embed { data, checkpoint, count } => {
            if count.is_some() {
                cfg.embed_count = *count;
            }
            let ds = load_data(data.as_ref(), &mut cfg)?;
            let ck = ModelCheckpoint::load(checkpoint)?;
            let out = out_dir(&cli.common, &cfg, "embed");
            start(&out, &mut cfg)?;
            let r = pipeline::embed(&cfg, &ds, &ck, &out)?;
            println!("{} embeddings in {}", r.characters, out.join("embeddings.csv").display());
            if let Some(c) = r.radical_check {
                println!("radical MRR {:.4}; beats {}/{} shuffled labellings", c.mrr, c.wins, c.shuffled_mrr.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &SaeError) -> u8 {
    e.exit_code() as u8
}
