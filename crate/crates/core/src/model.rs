//! The full model: vision, text and fusion modules plus projection heads,
//! with helpers that batch concepts and texts for the fusion module.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionEncoder, FusionInputs};
use crate::math::{Graph, ParamStore, Real, Tensor, Var};
use crate::nn::{key_bias, Initializer};
use crate::objectives::ProjectionHeads;
use crate::text::{TextBatch, TextConfig, TextEncoder};
use crate::vision::{VisionConfig, VisionEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vision_layers: usize,
    pub text_layers: usize,
    pub fusion_layers: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub proj_dim: usize,
    pub max_frames: usize,
    pub init_std: f64,
    pub ln_eps: f64,
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            vision_layers: 2,
            text_layers: 2,
            fusion_layers: 1,
            vocab_size: 32,
            max_text_len: 16,
            proj_dim: 32,
            max_frames: 8,
            init_std: 0.02,
            ln_eps: 1e-6,
            init_temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
            ("proj_dim", self.proj_dim),
            ("max_frames", self.max_frames),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn vision(&self) -> VisionConfig {
        VisionConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            dim: self.dim,
            heads: self.heads,
            hidden: self.hidden(),
            layers: self.vision_layers,
            max_frames: self.max_frames,
            eps: self.ln_eps,
        }
    }

    pub fn text(&self) -> TextConfig {
        TextConfig {
            vocab_size: self.vocab_size,
            max_len: self.max_text_len,
            dim: self.dim,
            heads: self.heads,
            hidden: self.hidden(),
            layers: self.text_layers,
            eps: self.ln_eps,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            dim: self.dim,
            heads: self.heads,
            hidden: self.hidden(),
            layers: self.fusion_layers,
            eps: self.ln_eps,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub fusion: FusionEncoder,
    pub heads: ProjectionHeads,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model; parameters are registered vision, text,
    /// fusion, heads in that order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Initializer {
            store: &mut params,
            rng: &mut rng,
            std: config.init_std,
        };
        let vision = VisionEncoder::new(&mut init, config.vision())?;
        let text = TextEncoder::new(&mut init, config.text())?;
        let fusion = FusionEncoder::new(&mut init, config.fusion())?;
        let heads = ProjectionHeads::new(&mut init, config.dim, config.proj_dim, config.init_temperature)?;
        Ok(Self {
            config,
            params,
            vision,
            text,
            fusion,
            heads,
        })
    }

    /// Same model with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            vision: self.vision.clone(),
            text: self.text.clone(),
            fusion: self.fusion.clone(),
            heads: self.heads.clone(),
        }
    }
}

/// Encoded texts ready to be paired with concepts.
pub struct TextSeqs<T> {
    /// `[N, L, D]`
    pub seq: Var,
    /// `[N, D]`, the position-0 outputs.
    pub cls: Var,
    pub live: Vec<bool>,
    pub len: usize,
    pub count: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> TextSeqs<T> {
    pub fn encode(model: &Model<T>, g: &mut Graph<'_, T>, batch: &TextBatch) -> Result<Self> {
        let seq = model.text.encode_batch(g, batch)?;
        let d = model.config.dim;
        let flat = g.reshape(seq, &[batch.batch * batch.len, d])?;
        let idx: Vec<usize> = (0..batch.batch).map(|b| b * batch.len).collect();
        let cls = g.select_rows(flat, &idx)?;
        Ok(Self {
            seq,
            cls,
            live: batch.live.clone(),
            len: batch.len,
            count: batch.batch,
            _marker: std::marker::PhantomData,
        })
    }

    /// Constant sequences from precomputed `[L_i, D]` values (all rows live).
    pub fn from_values(g: &mut Graph<'_, T>, seqs: &[&Tensor<T>]) -> Result<Self> {
        let (seq, live, len) = pad_values(g, seqs)?;
        let d = g.shape(seq)[2];
        let flat = g.reshape(seq, &[seqs.len() * len, d])?;
        let idx: Vec<usize> = (0..seqs.len()).map(|b| b * len).collect();
        let cls = g.select_rows(flat, &idx)?;
        Ok(Self {
            seq,
            cls,
            live,
            len,
            count: seqs.len(),
            _marker: std::marker::PhantomData,
        })
    }

    /// Reorders/duplicates sequences along the batch dimension.
    pub fn gather(&self, g: &mut Graph<'_, T>, idx: &[usize]) -> Result<(Var, Vec<T>)> {
        let width = g.value(self.seq).len() / self.count;
        let d = width / self.len;
        let flat = g.reshape(self.seq, &[self.count, width])?;
        let picked = g.select_rows(flat, idx)?;
        let seq = g.reshape(picked, &[idx.len(), self.len, d])?;
        let live: Vec<bool> = idx
            .iter()
            .flat_map(|&i| self.live[i * self.len..(i + 1) * self.len].iter().copied())
            .collect();
        Ok((seq, key_bias(&live)))
    }
}

/// Which patches of which encoded media item form a visual concept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptSpec {
    pub media: usize,
    pub patches: Vec<usize>,
}

/// Padded batch of concept sequences `[CLS, patch...]`.
pub struct ConceptSeqs<T> {
    /// `[C, 1 + K, D]`
    pub seq: Var,
    /// `[C, D]`
    pub cls: Var,
    pub live: Vec<bool>,
    pub len: usize,
    pub count: usize,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> ConceptSeqs<T> {
    /// `media_rows` is `[M * P, D]`: the encoded patches of every media item.
    pub fn build(g: &mut Graph<'_, T>, media_rows: Var, patches_per_item: usize, specs: &[ConceptSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidInput("no concepts to build".into()));
        }
        let rows = g.shape(media_rows)[0];
        let d = g.shape(media_rows)[1];
        let groups: Vec<Vec<usize>> = specs
            .iter()
            .map(|s| s.patches.iter().map(|&p| s.media * patches_per_item + p).collect())
            .collect();
        let cls = g.pool_rows(media_rows, &groups)?;
        let source = g.concat(&[media_rows, cls], 0)?;
        let len = 1 + specs.iter().map(|s| s.patches.len()).max().unwrap_or(0);
        let mut idx = Vec::with_capacity(specs.len() * len);
        let mut live = Vec::with_capacity(specs.len() * len);
        for (c, group) in groups.iter().enumerate() {
            idx.push(Some(rows + c));
            live.push(true);
            for k in 0..len - 1 {
                idx.push(group.get(k).copied());
                live.push(k < group.len());
            }
        }
        let seq = g.gather_rows(source, &idx)?;
        let seq = g.reshape(seq, &[specs.len(), len, d])?;
        Ok(Self {
            seq,
            cls,
            live,
            len,
            count: specs.len(),
            _marker: std::marker::PhantomData,
        })
    }

    pub fn gather(&self, g: &mut Graph<'_, T>, idx: &[usize]) -> Result<(Var, Vec<T>)> {
        let width = g.value(self.seq).len() / self.count;
        let d = width / self.len;
        let flat = g.reshape(self.seq, &[self.count, width])?;
        let picked = g.select_rows(flat, idx)?;
        let seq = g.reshape(picked, &[idx.len(), self.len, d])?;
        let live: Vec<bool> = idx
            .iter()
            .flat_map(|&i| self.live[i * self.len..(i + 1) * self.len].iter().copied())
            .collect();
        Ok((seq, key_bias(&live)))
    }

    /// Constant concept sequences from precomputed `[1 + K_i, D]` values.
    pub fn from_values(g: &mut Graph<'_, T>, seqs: &[&Tensor<T>]) -> Result<Self> {
        let (seq, live, len) = pad_values(g, seqs)?;
        let d = g.shape(seq)[2];
        let flat = g.reshape(seq, &[seqs.len() * len, d])?;
        let idx: Vec<usize> = (0..seqs.len()).map(|b| b * len).collect();
        let cls = g.select_rows(flat, &idx)?;
        Ok(Self {
            seq,
            cls,
            live,
            len,
            count: seqs.len(),
            _marker: std::marker::PhantomData,
        })
    }
}

/// Zero-pads `[L_i, D]` tensors into one `[B, max L, D]` constant.
fn pad_values<T: Real>(g: &mut Graph<'_, T>, seqs: &[&Tensor<T>]) -> Result<(Var, Vec<bool>, usize)> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::InvalidInput("no sequences given".into()))?;
    let d = first.last_dim();
    if seqs.iter().any(|t| t.ndim() != 2 || t.last_dim() != d) {
        return Err(Error::Shape("sequences must all be [L, D] with one D".into()));
    }
    let len = seqs.iter().map(|t| t.rows()).max().unwrap_or(0);
    let mut data = vec![T::zero(); seqs.len() * len * d];
    let mut live = vec![false; seqs.len() * len];
    for (b, t) in seqs.iter().enumerate() {
        data[b * len * d..][..t.len()].copy_from_slice(t.data());
        live[b * len..][..t.rows()].iter_mut().for_each(|x| *x = true);
    }
    let seq = g.constant(Tensor::new(vec![seqs.len(), len, d], data)?);
    Ok((seq, live, len))
}

impl<T: Real> Model<T> {
    /// Fuses `texts[text_idx[i]]` with `concepts[concept_idx[i]]`; returns `[B, L, D]`.
    pub fn fuse_pairs(
        &self,
        g: &mut Graph<'_, T>,
        texts: &TextSeqs<T>,
        text_idx: &[usize],
        concepts: &ConceptSeqs<T>,
        concept_idx: &[usize],
    ) -> Result<Var> {
        let (text, text_bias) = texts.gather(g, text_idx)?;
        let (vision, vision_bias) = concepts.gather(g, concept_idx)?;
        self.fusion.fuse(
            g,
            &FusionInputs {
                text,
                text_bias: &text_bias,
                vision,
                vision_bias: &vision_bias,
            },
        )
    }
}
