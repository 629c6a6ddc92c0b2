//! Transformer building blocks shared by the vision, text and fusion modules.
//!
//! Blocks only hold [`ParamId`]s; values live in the model's [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::math::{truncated_normal, Graph, ParamId, ParamStore, Real, Tensor, Var};

/// Registers parameters under a dotted prefix with the standard init
/// (truncated normal weights, zero biases, unit gains).
pub struct Initializer<'a, T: Real, R: Rng> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut R,
    pub std: f64,
}

impl<'a, T: Real, R: Rng> Initializer<'a, T, R> {
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = truncated_normal(shape, self.std, self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, T::lit(value)))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(init: &mut Initializer<'_, T, R>, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            weight: init.weight(&format!("{name}.weight"), &[fan_in, fan_out])?,
            bias: Some(init.zeros(&format!("{name}.bias"), &[fan_out])?),
        })
    }

    pub fn without_bias<T: Real, R: Rng>(
        init: &mut Initializer<'_, T, R>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: init.weight(&format!("{name}.weight"), &[fan_in, fan_out])?,
            bias: None,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real, R: Rng>(init: &mut Initializer<'_, T, R>, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gain: init.constant(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: init.zeros(&format!("{name}.bias"), &[dim])?,
            eps,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(init: &mut Initializer<'_, T, R>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            query: Linear::new(init, &format!("{name}.query"), dim, dim)?,
            key: Linear::without_bias(init, &format!("{name}.key"), dim, dim)?,
            value: Linear::new(init, &format!("{name}.value"), dim, dim)?,
            output: Linear::new(init, &format!("{name}.output"), dim, dim)?,
            heads,
        })
    }

    /// `queries` `[B, Lq, D]` attend over `context` `[B, Lk, D]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        context: Var,
        key_bias: Option<&[T]>,
    ) -> Result<Var> {
        let q = self.query.forward(g, queries)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        let a = g.attention(q, k, v, self.heads, key_bias)?;
        self.output.forward(g, a)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real, R: Rng>(init: &mut Initializer<'_, T, R>, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(init, &format!("{name}.fc2"), hidden, out)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<T: Real, R: Rng>(init: &mut Initializer<'_, T, R>, name: &str, cfg: BlockDims) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(init, &format!("{name}.ln_attn"), cfg.dim, cfg.eps)?,
            attn: MultiHeadAttention::new(init, &format!("{name}.attn"), cfg.dim, cfg.heads)?,
            ln_mlp: LayerNorm::new(init, &format!("{name}.ln_mlp"), cfg.dim, cfg.eps)?,
            mlp: Mlp::new(init, &format!("{name}.mlp"), cfg.dim, cfg.hidden, cfg.dim)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, key_bias: Option<&[T]>) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let h = self.attn.forward(g, h, h, key_bias)?;
        let x = g.add(x, h)?;
        let h = self.ln_mlp.forward(g, x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub eps: f64,
}

/// Additive attention bias: `0` for a live key, `-inf` for padding.
pub fn key_bias<T: Real>(live: &[bool]) -> Vec<T> {
    live.iter()
        .map(|&l| if l { T::zero() } else { T::neg_infinity() })
        .collect()
}
