//! Binary checkpoints: magic, version, manifest length, a JSON manifest,
//! then little-endian tensor payloads.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::dataset::SamplerState;
use crate::error::{Error, Result};
use crate::math::{DType, ModuleGroup, Real, Tensor};
use crate::model::Model;
use crate::text::Vocab;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"MGRNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer_updates: Option<u64>,
    pub sampler: Option<SamplerState>,
}

/// Optimizer moments keyed by parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub updates: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

/// Everything needed to rebuild a model or resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub vocab: Vocab,
    /// Model parameters in registration order (vision, text, fusion, heads).
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<OptimizerState>,
    pub sampler: Option<SamplerState>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        config: &TrainConfig,
        vocab: &Vocab,
        step: u64,
        optimizer: Option<&AdamW<f32>>,
        sampler: Option<&SamplerState>,
    ) -> Self {
        let mut config = config.clone();
        config.model = model.config.clone();
        Self {
            config,
            step,
            vocab: vocab.clone(),
            tensors: model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            optimizer: optimizer.map(|o| OptimizerState {
                updates: o.t,
                m: o.m.clone(),
                v: o.v.clone(),
            }),
            sampler: sampler.cloned(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrites every parameter of `model` from this checkpoint.
    pub fn apply_to(&self, model: &mut Model<f32>) -> Result<()> {
        if self.tensors.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {} parameters",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.tensors {
            let p = model
                .params
                .by_name_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if p.value.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Rebuilds the model described by the stored configuration.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.config.model.clone(), 0)?;
        self.apply_to(&mut model)?;
        Ok(model)
    }

    /// Optimizer restored against `model`'s parameter order.
    pub fn to_optimizer(&self, model: &Model<f32>) -> Result<Option<AdamW<f32>>> {
        let Some(state) = &self.optimizer else {
            return Ok(None);
        };
        let c = &self.config;
        let mut opt = AdamW::new(&model.params, c.beta1, c.beta2, c.adam_eps, c.weight_decay);
        if state.m.len() != opt.m.len() || state.v.len() != opt.v.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        opt.t = state.updates;
        opt.m = state.m.clone();
        opt.v = state.v.clone();
        Ok(Some(opt))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>| {
            let bytes = f32::to_le_bytes_vec(t.data());
            entries.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: f32::DTYPE,
                offset: payload.len() as u64,
                bytes: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        };
        for (name, t) in &self.tensors {
            push(name.clone(), t);
        }
        if let Some(o) = &self.optimizer {
            for (i, (name, _)) in self.tensors.iter().enumerate() {
                push(format!("{OPTIM_M}{name}"), &o.m[i]);
            }
            for (i, (name, _)) in self.tensors.iter().enumerate() {
                push(format!("{OPTIM_V}{name}"), &o.v[i]);
            }
        }
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            tensors: entries,
            optimizer_updates: self.optimizer.as_ref().map(|o| o.updates),
            sampler: self.sampler.clone(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: CheckpointManifest = serde_json::from_slice(json)?;
        if manifest.version != version {
            return Err(bad("manifest version disagrees with header"));
        }
        let payload = &bytes[20 + len..];
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &manifest.tensors {
            if e.dtype != DType::F32 {
                return Err(Error::Checkpoint(format!("tensor {} has unsupported dtype", e.name)));
            }
            let numel: usize = e.shape.iter().product();
            if e.bytes as usize != numel * 4 {
                return Err(Error::Checkpoint(format!("tensor {} size disagrees with shape", e.name)));
            }
            let raw = payload
                .get(e.offset as usize..(e.offset + e.bytes) as usize)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} is truncated", e.name)))?;
            let t = Tensor::new(e.shape.clone(), f32::from_le_bytes_slice(raw))?;
            if let Some(n) = e.name.strip_prefix(OPTIM_M) {
                m.push((n.to_string(), t));
            } else if let Some(n) = e.name.strip_prefix(OPTIM_V) {
                v.push((n.to_string(), t));
            } else {
                if ModuleGroup::of(&e.name).is_none() {
                    return Err(Error::Checkpoint(format!("tensor {} has no module prefix", e.name)));
                }
                if params.iter().any(|(n, _): &(String, _)| *n == e.name) {
                    return Err(Error::Checkpoint(format!("tensor {} appears twice", e.name)));
                }
                params.push((e.name.clone(), t));
            }
        }
        let optimizer = match manifest.optimizer_updates {
            None => None,
            Some(updates) => {
                let in_order = |xs: &[(String, Tensor<f32>)]| {
                    xs.len() == params.len() && xs.iter().zip(&params).all(|(a, b)| a.0 == b.0)
                };
                if !in_order(&m) || !in_order(&v) {
                    return Err(bad("optimizer moments do not match the parameters"));
                }
                Some(OptimizerState {
                    updates,
                    m: m.into_iter().map(|x| x.1).collect(),
                    v: v.into_iter().map(|x| x.1).collect(),
                })
            }
        };
        Ok(Self {
            config: manifest.config,
            step: manifest.step,
            vocab: Vocab::from_tokens(manifest.vocab)?,
            tensors: params,
            optimizer,
            sampler: manifest.sampler,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Replacement text module: `text.*` tensors plus their vocabulary.
#[derive(Clone, Debug)]
pub struct TextModule {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub vocab: Vocab,
}

impl TextModule {
    /// Freshly initialized text module for `vocab`, sized like `like`.
    pub fn fresh(like: &TrainConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut mc = like.model.clone();
        mc.vocab_size = vocab.len();
        let model: Model<f32> = Model::new(mc, seed)?;
        Ok(Self::from_params(&model, vocab))
    }

    pub fn from_params(model: &Model<f32>, vocab: Vocab) -> Self {
        Self {
            tensors: model
                .params
                .iter()
                .filter(|(_, p)| ModuleGroup::of(&p.name) == Some(ModuleGroup::Text))
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            vocab,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        Self {
            tensors: ckpt
                .tensors
                .iter()
                .filter(|(n, _)| ModuleGroup::of(n) == Some(ModuleGroup::Text))
                .cloned()
                .collect(),
            vocab: ckpt.vocab.clone(),
        }
    }
}

/// Replaces the text module of `ckpt`, leaving vision, fusion and heads
/// untouched. Optimizer and sampler state are dropped; the step is kept.
pub fn swap_text_module(ckpt: &Checkpoint, replacement: &TextModule) -> Result<Checkpoint> {
    let d = ckpt.config.model.dim;
    if let Some((n, _)) = replacement
        .tensors
        .iter()
        .find(|(n, _)| ModuleGroup::of(n) != Some(ModuleGroup::Text))
    {
        return Err(Error::Checkpoint(format!("replacement tensor {n} is not part of the text module")));
    }
    let find = |name: &str| {
        replacement
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("replacement lacks {name}")))
    };
    let embed = find("text.token_embed")?;
    let pos = find("text.pos_embed")?;
    if embed.shape()[1] != d {
        return Err(Error::Shape(format!(
            "replacement text width {} does not match model width {d}",
            embed.shape()[1]
        )));
    }
    if embed.shape()[0] != replacement.vocab.len() {
        return Err(Error::Shape(format!(
            "replacement embeds {} tokens but its vocab has {}",
            embed.shape()[0],
            replacement.vocab.len()
        )));
    }
    let layers = (0..)
        .take_while(|i| {
            let prefix = format!("text.layer{i}.");
            replacement.tensors.iter().any(|(n, _)| n.starts_with(&prefix))
        })
        .count();

    let mut config = ckpt.config.clone();
    config.model.vocab_size = replacement.vocab.len();
    config.model.max_text_len = pos.shape()[0];
    config.model.text_layers = layers;

    // The rebuilt model fixes the expected names and shapes.
    let template: Model<f32> = Model::new(config.model.clone(), 0)?;
    let mut tensors = Vec::with_capacity(template.params.len());
    for (_, p) in template.params.iter() {
        let t = if ModuleGroup::of(&p.name) == Some(ModuleGroup::Text) {
            find(&p.name)?.clone()
        } else {
            ckpt.tensor(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {}", p.name)))?
                .clone()
        };
        if t.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "tensor {}: shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        tensors.push((p.name.clone(), t));
    }
    if replacement.tensors.len() != tensors.iter().filter(|(n, _)| n.starts_with("text.")).count() {
        return Err(Error::Checkpoint("replacement has tensors the model does not use".into()));
    }
    Ok(Checkpoint {
        config,
        step: ckpt.step,
        vocab: replacement.vocab.clone(),
        tensors,
        optimizer: None,
        sampler: None,
    })
}
