//! Optimization loop, schedules and checkpoints.

mod checkpoint;
mod config;
mod optim;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    swap_text_module, Checkpoint, CheckpointManifest, OptimizerState, TensorEntry, TextModule, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{lr_at, TrainConfig, CONFIG_KEYS};
pub use optim::AdamW;

use crate::dataset::{
    generate_shapes_video, generate_shapes_world, resolve_sources, BatchSampler, Dataset, MultiGrainedSample, ShapesConfig,
    View,
};
use crate::error::{Error, Result};
use crate::evaluate::{eval_grounding, eval_retrieval, EvalConfig};
use crate::math::{grad_check, GradCheckOptions, GradCheckReport, Graph, Real};
use crate::model::{Model, ModelConfig};
use crate::objectives::{total_loss, LossBreakdown, ObjectiveConfig};
use crate::text::Vocab;

const SAMPLER_SALT: u64 = 0x5a4d_504c_4552_0001;
const EVAL_SAMPLES: usize = 64;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub cl: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub mlm: f64,
    pub bbox: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub temperature: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub r1_t2v: f64,
    pub r1_v2t: f64,
    pub mean_iou: f64,
    pub acc50: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Forward, backward and one optimizer update on `samples`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Real, R: Rng + ?Sized>(
    model: &mut Model<T>,
    vocab: &Vocab,
    samples: &[&MultiGrainedSample],
    opt: &mut AdamW<T>,
    objective: &ObjectiveConfig,
    lr: f64,
    clip: f64,
    rng: &mut R,
) -> Result<StepOutput> {
    let (grads, breakdown) = {
        let mut g = Graph::new(&model.params);
        let terms = total_loss(model, &mut g, vocab, samples, objective, rng)?;
        if let Some(term) = terms.breakdown.first_non_finite() {
            return Err(Error::NonFinite(format!(
                "loss term {term} ({})",
                serde_json::to_string(&terms.breakdown)?
            )));
        }
        (g.backward(terms.total)?, terms.breakdown)
    };
    let grad_norm = opt.step(&mut model.params, &grads, lr, clip)?;
    model.heads.clamp_temperature(&mut model.params);
    Ok(StepOutput { breakdown, grad_norm })
}

/// Per-step randomness: masking, frame and concept sampling, source draws.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint (weights, optimizer, sampler).
    pub resume: Option<Checkpoint>,
    /// Start from these weights with a fresh optimizer and schedule.
    pub init: Option<Checkpoint>,
    /// Stop after this many completed steps, counting resumed ones.
    pub stop_after: Option<u64>,
    /// Directory for `metrics.jsonl` and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

fn append_line(path: &Option<PathBuf>, line: &str) -> Result<()> {
    if let Some(p) = path {
        let mut f = OpenOptions::new().create(true).append(true).open(p)?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

fn evaluate_at(
    model: &Model<f32>,
    data: &Dataset,
    vocab: &Vocab,
    config: &TrainConfig,
    step: u64,
) -> Result<EvalRecord> {
    let samples: Vec<&MultiGrainedSample> = data.samples.iter().take(EVAL_SAMPLES).map(|s| s.as_ref()).collect();
    let cfg = EvalConfig {
        seed: config.seed,
        ..EvalConfig::default()
    };
    let r = eval_retrieval(model, &samples, vocab, &cfg)?;
    let gr = eval_grounding(model, &samples, vocab, &cfg)?;
    Ok(EvalRecord {
        step,
        r1_t2v: r.t2v.r1,
        r1_v2t: r.v2t.r1,
        mean_iou: gr.mean_iou,
        acc50: gr.accuracy,
    })
}

/// Trains on `data` (plus `videos` if the mix names them) following `config`.
pub fn train(config: &TrainConfig, data: &Dataset, videos: Option<&Dataset>, opts: TrainOptions) -> Result<TrainOutcome> {
    let mut config = config.clone();
    config.model.vocab_size = data.vocab.len();
    config.validate()?;
    let m = &data.manifest;
    if m.image_height != config.model.image_size || m.image_width != config.model.image_size {
        return Err(Error::Config(format!(
            "data images are {}x{}, model expects {}",
            m.image_height, m.image_width, config.model.image_size
        )));
    }
    if m.channels != config.model.channels {
        return Err(Error::Config(format!(
            "data has {} channels, model expects {}",
            m.channels, config.model.channels
        )));
    }
    let vocab = &data.vocab;
    let sources = resolve_sources(&config.mix, data, videos)?;
    let mut sampler = BatchSampler::new(sources, &config.mix, config.seed ^ SAMPLER_SALT)?;

    if opts.resume.is_some() && opts.init.is_some() {
        return Err(Error::Config("resume and init are mutually exclusive".into()));
    }
    let (mut model, mut opt, start) = match (&opts.resume, &opts.init) {
        (None, Some(ckpt)) => {
            if ckpt.vocab != *vocab {
                return Err(Error::Checkpoint("checkpoint vocabulary differs from the data".into()));
            }
            let model = ckpt.to_model()?;
            config.model = ckpt.config.model.clone();
            let opt = AdamW::new(&model.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
            (model, opt, 0)
        }
        (Some(ckpt), _) => {
            if ckpt.vocab != *vocab {
                return Err(Error::Checkpoint("checkpoint vocabulary differs from the data".into()));
            }
            let model = ckpt.to_model()?;
            let opt = ckpt.to_optimizer(&model)?.ok_or_else(|| {
                Error::Checkpoint("checkpoint has no optimizer state to resume from".into())
            })?;
            if let Some(s) = &ckpt.sampler {
                sampler.set_state(s.clone())?;
            }
            config.model = ckpt.config.model.clone();
            (model, opt, ckpt.step)
        }
        (None, None) => {
            let model = Model::new(config.model.clone(), config.seed)?;
            let opt = AdamW::new(&model.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
            (model, opt, 0)
        }
    };

    let metrics = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(dir.join("metrics.jsonl"))
        }
        None => None,
    };
    let end = opts.stop_after.unwrap_or(config.total_steps).min(config.total_steps);
    let mut history = Vec::new();
    let mut evals = Vec::new();
    for step in start..end {
        let mut rng = step_rng(config.seed, step);
        let batch = sampler.assemble_batch(config.batch_size, &mut rng)?;
        let lr = lr_at(step + 1, &config);
        let out = train_step(
            &mut model,
            vocab,
            &batch.samples(),
            &mut opt,
            &config.objective,
            lr,
            config.grad_clip,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("step {}: {msg}", step + 1)),
            other => other,
        })?;
        let b = out.breakdown;
        let rec = StepRecord {
            step: step + 1,
            lr,
            cl: b.cl,
            matching: b.matching,
            mlm: b.mlm,
            bbox: b.bbox,
            total: b.total,
            grad_norm: out.grad_norm,
            temperature: model.heads.temperature(&model.params),
        };
        log::info!(
            "step {:>5} lr {:.2e} total {:.4} cl {:.4} match {:.4} mlm {:.4} bbox {:.4}",
            rec.step,
            lr,
            b.total,
            b.cl,
            b.matching,
            b.mlm,
            b.bbox
        );
        append_line(&metrics, &serde_json::to_string(&rec)?)?;
        history.push(rec);
        let done = step + 1;
        if config.eval_interval > 0 && done % config.eval_interval == 0 {
            let e = evaluate_at(&model, data, vocab, &config, done)?;
            append_line(&metrics, &serde_json::to_string(&e)?)?;
            evals.push(e);
        }
        if let Some(dir) = &opts.out_dir {
            if opts.checkpoint_interval > 0 && done % opts.checkpoint_interval == 0 && done < end {
                Checkpoint::from_model(&model, &config, vocab, done, Some(&opt), Some(sampler.state()))
                    .save(&dir.join(format!("step-{done}.ckpt")))?;
            }
        }
    }
    let done = start.max(end);
    let checkpoint = Checkpoint::from_model(&model, &config, vocab, done, Some(&opt), Some(sampler.state()));
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
        evals,
    })
}

/// Tiny model used to verify gradients of the full objective.
pub fn grad_check_model_config() -> ModelConfig {
    ModelConfig {
        dim: 32,
        heads: 2,
        mlp_ratio: 2,
        vision_layers: 1,
        text_layers: 1,
        fusion_layers: 1,
        proj_dim: 16,
        init_std: 0.1,
        ..ModelConfig::default()
    }
}

/// Four mixed samples: caption-only, object-only, region-only and a video clip.
pub fn grad_check_batch(seed: u64) -> Result<(Vec<MultiGrainedSample>, Vocab)> {
    let cfg = ShapesConfig::default();
    let images = generate_shapes_world(seed, 16, &cfg)?;
    let videos = generate_shapes_video(seed, 1, 3, &cfg)?;
    let mut out = Vec::with_capacity(4);
    for view in [View::Caption, View::Object, View::Region] {
        let s = images
            .samples
            .iter()
            .find_map(|s| view.apply(s).filter(|v| !out.contains(v)))
            .ok_or_else(|| Error::Data(format!("no sample for {view:?}")))?;
        out.push(s);
    }
    out.push(videos.samples[0].as_ref().clone());
    Ok((out, images.vocab))
}

/// Finite-difference check of the summed objective on [`grad_check_batch`]
/// with a 64-bit copy of a freshly initialized tiny model.
pub fn check_loss_gradients(seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (samples, vocab) = grad_check_batch(seed)?;
    let mut mc = grad_check_model_config();
    mc.vocab_size = vocab.len();
    let model: Model<f64> = Model::<f32>::new(mc, seed)?.cast();
    let refs: Vec<&MultiGrainedSample> = samples.iter().collect();
    let objective = ObjectiveConfig::default();
    let mut params = model.params.clone();
    grad_check(
        &mut params,
        |g| {
            let mut rng = step_rng(seed, 0);
            Ok(total_loss(&model, g, &vocab, &refs, &objective, &mut rng)?.total)
        },
        opts,
    )
}
