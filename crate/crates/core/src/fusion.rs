//! Fusion module: text queries cross-attend to vision keys/values at every
//! layer; matching, MLM and box heads read its outputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{Graph, Real, Var};
use crate::nn::{BlockDims, Initializer, LayerNorm, Linear, Mlp, MultiHeadAttention};

#[derive(Clone, Debug)]
pub struct FusionConfig {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub eps: f64,
}

/// Self-attention over text, cross-attention into vision, feed-forward.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl FusionBlock {
    fn new<T: Real, R: Rng>(init: &mut Initializer<'_, T, R>, name: &str, dims: BlockDims) -> Result<Self> {
        Ok(Self {
            ln_self: LayerNorm::new(init, &format!("{name}.ln_self"), dims.dim, dims.eps)?,
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), dims.dim, dims.heads)?,
            ln_cross: LayerNorm::new(init, &format!("{name}.ln_cross"), dims.dim, dims.eps)?,
            cross_attn: MultiHeadAttention::new(init, &format!("{name}.cross_attn"), dims.dim, dims.heads)?,
            ln_mlp: LayerNorm::new(init, &format!("{name}.ln_mlp"), dims.dim, dims.eps)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), dims.dim, dims.hidden, dims.dim)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, inputs: &FusionInputs<'_, T>) -> Result<Var> {
        let h = self.ln_self.forward(g, x)?;
        let h = self.self_attn.forward(g, h, h, Some(inputs.text_bias))?;
        let x = g.add(x, h)?;
        let h = self.ln_cross.forward(g, x)?;
        let h = self.cross_attn.forward(g, h, inputs.vision, Some(inputs.vision_bias))?;
        let x = g.add(x, h)?;
        let h = self.ln_mlp.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}

/// Paired text and vision sequences for one fusion pass.
pub struct FusionInputs<'a, T> {
    /// `[B, L, D]`
    pub text: Var,
    pub text_bias: &'a [T],
    /// `[B, K, D]`
    pub vision: Var,
    pub vision_bias: &'a [T],
}

#[derive(Clone, Debug)]
pub struct FusionEncoder {
    pub config: FusionConfig,
    pub blocks: Vec<FusionBlock>,
    pub ln_final: LayerNorm,
    pub match_head: Linear,
    pub mlm_transform: Linear,
    pub mlm_ln: LayerNorm,
    pub bbox_head: Mlp,
}

impl FusionEncoder {
    pub fn new<T: Real, R: Rng>(init: &mut Initializer<'_, T, R>, config: FusionConfig) -> Result<Self> {
        let d = config.dim;
        let dims = BlockDims {
            dim: d,
            heads: config.heads,
            hidden: config.hidden,
            eps: config.eps,
        };
        let blocks = (0..config.layers)
            .map(|i| FusionBlock::new(init, &format!("fusion.layer{i}"), dims))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ln_final: LayerNorm::new(init, "fusion.ln_final", d, config.eps)?,
            match_head: Linear::new(init, "fusion.match_head", d, 2)?,
            mlm_transform: Linear::new(init, "fusion.mlm_head.transform", d, d)?,
            mlm_ln: LayerNorm::new(init, "fusion.mlm_head.ln", d, config.eps)?,
            bbox_head: Mlp::new(init, "fusion.bbox_head", d, d, 4)?,
            blocks,
            config,
        })
    }

    /// Fused sequence `[B, L, D]`, same length as the text input.
    pub fn fuse<T: Real>(&self, g: &mut Graph<'_, T>, inputs: &FusionInputs<'_, T>) -> Result<Var> {
        let (st, sv) = (g.shape(inputs.text).to_vec(), g.shape(inputs.vision).to_vec());
        if st.len() != 3 || sv.len() != 3 || st[0] != sv[0] || st[2] != sv[2] {
            return Err(Error::Shape(format!("fuse text {st:?} with vision {sv:?}")));
        }
        if st[2] != self.config.dim {
            return Err(Error::Shape(format!("fusion width {} vs features {}", self.config.dim, st[2])));
        }
        let mut x = inputs.text;
        for block in &self.blocks {
            x = block.forward(g, x, inputs)?;
        }
        if !self.blocks.is_empty() {
            x = self.ln_final.forward(g, x)?;
        }
        Ok(x)
    }

    /// Position-0 rows of a fused `[B, L, D]` sequence, `[B, D]`.
    pub fn cls<T: Real>(&self, g: &mut Graph<'_, T>, fused: Var) -> Result<Var> {
        let s = g.shape(fused).to_vec();
        let flat = g.reshape(fused, &[s[0] * s[1], s[2]])?;
        let idx: Vec<usize> = (0..s[0]).map(|b| b * s[1]).collect();
        g.select_rows(flat, &idx)
    }

    /// `{mismatch, match}` logits, `[B, 2]`.
    pub fn predict_match<T: Real>(&self, g: &mut Graph<'_, T>, x_cls: Var) -> Result<Var> {
        self.match_head.forward(g, x_cls)
    }

    /// Vocabulary logits `[M, V]` for fused rows `[M, D]`, decoded through the
    /// (tied) token embedding table `[V, D]` plus a per-token bias.
    pub fn predict_mlm<T: Real>(&self, g: &mut Graph<'_, T>, rows: Var, token_embed: Var, mlm_bias: Var) -> Result<Var> {
        let h = self.mlm_transform.forward(g, rows)?;
        let h = g.gelu(h);
        let h = self.mlm_ln.forward(g, h)?;
        let table = g.transpose(token_embed)?;
        let logits = g.matmul(h, table)?;
        g.add(logits, mlm_bias)
    }

    /// Normalized `(cx, cy, w, h)` in `(0, 1)`, `[B, 4]`.
    pub fn predict_bbox<T: Real>(&self, g: &mut Graph<'_, T>, x_cls: Var) -> Result<Var> {
        let raw = self.bbox_head.forward(g, x_cls)?;
        Ok(g.sigmoid(raw))
    }
}
