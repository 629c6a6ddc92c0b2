use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::MixSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objectives::ObjectiveConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub mix: MixSpec,
    /// Steps between evaluation records in the metrics log; 0 disables them.
    pub eval_interval: u64,
    pub data: PathBuf,
    pub video_data: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            batch_size: 32,
            total_steps: 2000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            mix: MixSpec {
                entries: vec![
                    ("caption".into(), 1.0),
                    ("object".into(), 1.0),
                    ("region".into(), 1.0),
                ],
            },
            eval_interval: 0,
            data: PathBuf::from("data"),
            video_data: None,
            out: PathBuf::from("run"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

/// Every addressable key, in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "image_size",
    "patch_size",
    "channels",
    "dim",
    "heads",
    "mlp_ratio",
    "vision_layers",
    "text_layers",
    "fusion_layers",
    "vocab_size",
    "max_text_len",
    "proj_dim",
    "max_frames",
    "init_std",
    "ln_eps",
    "temperature",
    "mask_prob",
    "frames_per_step",
    "concepts_per_sample",
    "use_bbox",
    "concept_align",
    "batch_size",
    "total_steps",
    "warmup_steps",
    "peak_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "grad_clip",
    "seed",
    "mix",
    "eval_interval",
    "data",
    "video_data",
    "out",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.mix.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak_lr must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.objective.mask_prob) {
            return Err(Error::Config("mask_prob must be in [0, 1]".into()));
        }
        if self.objective.frames_per_step == 0 || self.objective.concepts_per_sample == 0 {
            return Err(Error::Config("frames_per_step and concepts_per_sample must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let o = &mut self.objective;
        let v = value.trim();
        match key {
            "image_size" => m.image_size = parse(key, v)?,
            "patch_size" => m.patch_size = parse(key, v)?,
            "channels" => m.channels = parse(key, v)?,
            "dim" => m.dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "vision_layers" => m.vision_layers = parse(key, v)?,
            "text_layers" => m.text_layers = parse(key, v)?,
            "fusion_layers" => m.fusion_layers = parse(key, v)?,
            "vocab_size" => m.vocab_size = parse(key, v)?,
            "max_text_len" => m.max_text_len = parse(key, v)?,
            "proj_dim" => m.proj_dim = parse(key, v)?,
            "max_frames" => m.max_frames = parse(key, v)?,
            "init_std" => m.init_std = parse(key, v)?,
            "ln_eps" => m.ln_eps = parse(key, v)?,
            "temperature" => m.init_temperature = parse(key, v)?,
            "mask_prob" => o.mask_prob = parse(key, v)?,
            "frames_per_step" => o.frames_per_step = parse(key, v)?,
            "concepts_per_sample" => o.concepts_per_sample = parse(key, v)?,
            "use_bbox" => o.use_bbox = parse(key, v)?,
            "concept_align" => o.concept_align = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "peak_lr" => self.peak_lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mix" => self.mix = v.parse()?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "data" => self.data = PathBuf::from(v),
            "video_data" => self.video_data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Textual form of one field, as accepted by [`TrainConfig::set`].
    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        let o = &self.objective;
        Ok(match key {
            "image_size" => m.image_size.to_string(),
            "patch_size" => m.patch_size.to_string(),
            "channels" => m.channels.to_string(),
            "dim" => m.dim.to_string(),
            "heads" => m.heads.to_string(),
            "mlp_ratio" => m.mlp_ratio.to_string(),
            "vision_layers" => m.vision_layers.to_string(),
            "text_layers" => m.text_layers.to_string(),
            "fusion_layers" => m.fusion_layers.to_string(),
            "vocab_size" => m.vocab_size.to_string(),
            "max_text_len" => m.max_text_len.to_string(),
            "proj_dim" => m.proj_dim.to_string(),
            "max_frames" => m.max_frames.to_string(),
            "init_std" => m.init_std.to_string(),
            "ln_eps" => m.ln_eps.to_string(),
            "temperature" => m.init_temperature.to_string(),
            "mask_prob" => o.mask_prob.to_string(),
            "frames_per_step" => o.frames_per_step.to_string(),
            "concepts_per_sample" => o.concepts_per_sample.to_string(),
            "use_bbox" => o.use_bbox.to_string(),
            "concept_align" => o.concept_align.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "peak_lr" => self.peak_lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "grad_clip" => self.grad_clip.to_string(),
            "seed" => self.seed.to_string(),
            "mix" => self.mix.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "data" => self.data.display().to_string(),
            "video_data" => self
                .video_data
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "out" => self.out.display().to_string(),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_str_with_defaults(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_str(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_str_with_defaults(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: u64, config: &TrainConfig) -> f64 {
    let (w, t, peak) = (config.warmup_steps as f64, config.total_steps as f64, config.peak_lr);
    let s = step as f64;
    if step >= config.total_steps {
        0.0
    } else if s < w {
        peak * (s / w)
    } else {
        peak * ((t - s) / (t - w))
    }
}
