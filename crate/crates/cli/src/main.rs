use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use multigrain::dataset::{generate_shapes_video, generate_shapes_world, Dataset, Lexicon, MultiGrainedSample, ShapesConfig};
use multigrain::evaluate::{eval_curve_tsv, eval_grounding, eval_retrieval, loss_curve_tsv, EvalConfig};
use multigrain::math::GradCheckOptions;
use multigrain::trainer::{check_loss_gradients, swap_text_module, train, Checkpoint, TextModule, TrainConfig, TrainOptions};
use multigrain::{Error, Model, Result, Vocab};

#[derive(Parser, Debug)]
#[command(name = "multigrain", version, about = "Multi-grained vision-language pre-training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LexiconArg {
    English,
    Synthetic,
}

impl From<LexiconArg> for Lexicon {
    fn from(l: LexiconArg) -> Self {
        match l {
            LexiconArg::English => Lexicon::English,
            LexiconArg::Synthetic => Lexicon::Synthetic,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a shapes-world corpus.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = LexiconArg::English)]
        lexicon: LexiconArg,
        /// Generate moving-shape clips with this many frames instead of images.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train from a key-value config file; flags override file values.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override any config key, e.g. `--set total_steps=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        video_data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start from the weights of this checkpoint with a fresh optimizer.
        #[arg(long, conflicts_with = "resume")]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        checkpoint_interval: u64,
    },
    /// Two-stage retrieval over the captioned samples of a dataset.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        /// Line-delimited metrics file (appended).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Also write per-query rankings as JSON.
        #[arg(long)]
        rankings: Option<PathBuf>,
    },
    /// Box prediction for every annotation of a dataset.
    EvalGrounding {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Also write per-instance predictions as line-delimited JSON.
        #[arg(long)]
        instances: Option<PathBuf>,
    },
    /// Replace the text module of a checkpoint.
    SwapText {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Take the text module (and vocab) from this checkpoint.
        #[arg(long, conflicts_with = "vocab")]
        text_from: Option<PathBuf>,
        /// Freshly initialize a text module for this vocab file.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of the full objective on a tiny model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        /// Exit nonzero when the max relative error is at or above this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Write loss and evaluation curves from a metrics log as TSV tables.
    EmitCurves {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}

fn append_metrics(path: &Path, line: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

fn default_metrics(ckpt: &Path, suffix: &str) -> PathBuf {
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint");
    ckpt.with_file_name(format!("{stem}.{suffix}.jsonl"))
}

fn load_for_eval(ckpt: &Path, data: &Path) -> Result<(Model<f32>, Dataset)> {
    let ck = Checkpoint::load(ckpt)?;
    let data = Dataset::load(data)?;
    if ck.vocab != data.vocab {
        return Err(Error::Checkpoint(
            "checkpoint vocabulary differs from the dataset vocabulary".into(),
        ));
    }
    Ok((ck.to_model()?, data))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            seed,
            n,
            out,
            lexicon,
            frames,
        } => {
            let cfg = ShapesConfig {
                lexicon: lexicon.into(),
                ..ShapesConfig::default()
            };
            let data = match frames {
                Some(f) => generate_shapes_video(seed, n, f, &cfg)?,
                None => generate_shapes_world(seed, n, &cfg)?,
            };
            data.save(&out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Command::Train {
            config,
            overrides,
            data,
            video_data,
            out,
            seed,
            steps,
            resume,
            init,
            checkpoint_interval,
        } => {
            let mut cfg = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override {kv:?} is not KEY=VALUE")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(d) = data {
                cfg.data = d;
            }
            if let Some(v) = video_data {
                cfg.video_data = Some(v);
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.total_steps = s;
            }
            let images = Dataset::load(&cfg.data)?;
            let videos = cfg.video_data.as_deref().map(Dataset::load).transpose()?;
            let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
            let init = init.as_deref().map(Checkpoint::load).transpose()?;
            fs::create_dir_all(&cfg.out)?;
            fs::write(cfg.out.join("config.cfg"), cfg.to_kv_string())?;
            let outcome = train(
                &cfg,
                &images,
                videos.as_ref(),
                TrainOptions {
                    resume,
                    init,
                    out_dir: Some(cfg.out.clone()),
                    checkpoint_interval,
                    ..TrainOptions::default()
                },
            )?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "step {} total {:.4} (cl {:.4} match {:.4} mlm {:.4} bbox {:.4})",
                    last.step, last.total, last.cl, last.matching, last.mlm, last.bbox
                );
            }
            println!("checkpoint {}", cfg.out.join("final.ckpt").display());
        }
        Command::EvalRetrieval {
            ckpt,
            data,
            k,
            frames,
            metrics,
            rankings,
        } => {
            let (model, data) = load_for_eval(&ckpt, &data)?;
            let samples: Vec<&MultiGrainedSample> = data.samples.iter().map(|s| s.as_ref()).collect();
            let cfg = EvalConfig {
                k,
                frames_per_step: frames,
                ..EvalConfig::default()
            };
            let r = eval_retrieval(&model, &samples, &data.vocab, &cfg)?;
            print!("{}", r.table());
            let path = metrics.unwrap_or_else(|| default_metrics(&ckpt, "retrieval"));
            append_metrics(&path, &r.summary_json())?;
            if let Some(p) = rankings {
                fs::write(p, serde_json::to_string(&r)?)?;
            }
        }
        Command::EvalGrounding {
            ckpt,
            data,
            metrics,
            instances,
        } => {
            let (model, data) = load_for_eval(&ckpt, &data)?;
            let samples: Vec<&MultiGrainedSample> = data.samples.iter().map(|s| s.as_ref()).collect();
            let r = eval_grounding(&model, &samples, &data.vocab, &EvalConfig::default())?;
            print!("{}", r.table());
            let path = metrics.unwrap_or_else(|| default_metrics(&ckpt, "grounding"));
            append_metrics(&path, &r.summary_json())?;
            if let Some(p) = instances {
                let mut body = String::new();
                for i in &r.instances {
                    body.push_str(&serde_json::to_string(i)?);
                    body.push('\n');
                }
                fs::write(p, body)?;
            }
        }
        Command::SwapText {
            ckpt,
            out,
            text_from,
            vocab,
            seed,
        } => {
            let base = Checkpoint::load(&ckpt)?;
            let replacement = match (text_from, vocab) {
                (Some(p), _) => TextModule::from_checkpoint(&Checkpoint::load(&p)?),
                (None, Some(v)) => TextModule::fresh(&base.config, Vocab::load(&v)?, seed)?,
                (None, None) => {
                    return Err(Error::Config("swap-text needs --text-from or --vocab".into()));
                }
            };
            let swapped = swap_text_module(&base, &replacement)?;
            swapped.save(&out)?;
            println!("wrote {} ({} words)", out.display(), swapped.vocab.len());
        }
        Command::GradCheck {
            seed,
            coords,
            epsilon,
            tolerance,
        } => {
            let opts = GradCheckOptions {
                epsilon,
                max_coords: Some(coords),
                seed,
                ..GradCheckOptions::default()
            };
            let r = check_loss_gradients(seed, &opts)?;
            println!("coordinates {} max relative error {:.3e}", r.coords_checked, r.max_rel_error);
            if let Some(w) = &r.worst {
                println!(
                    "worst {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
            if !(r.max_rel_error < tolerance) {
                return Err(Error::InvalidInput(format!(
                    "gradient check failed: {:.3e} >= {tolerance:.1e}",
                    r.max_rel_error
                )));
            }
        }
        Command::EmitCurves { metrics, out } => {
            let log = fs::read_to_string(&metrics)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("loss.tsv"), loss_curve_tsv(&log)?)?;
            fs::write(out.join("eval.tsv"), eval_curve_tsv(&log)?)?;
            println!("wrote {} and {}", out.join("loss.tsv").display(), out.join("eval.tsv").display());
        }
    }
    Ok(())
}
