//! Vision module: patch embedding, the vision transformer, concept selection
//! from one encoding pass, and video encoding by temporal averaging.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::nn::{BlockDims, EncoderBlock, Initializer, LayerNorm, Linear};

/// Normalized `(cx, cy, w, h)` box; `(0.5, 0.5, 1, 1)` is the whole image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub const WHOLE_IMAGE: BoundingBox = BoundingBox {
        cx: 0.5,
        cy: 0.5,
        w: 1.0,
        h: 1.0,
    };

    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Box from (unclamped) corner coordinates.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [self.cx, self.cy, self.w, self.h];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidInput(format!("box {self:?} outside [0,1]")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidInput(format!("box {self:?} has zero size")));
        }
        Ok(())
    }

    /// `(x1, y1, x2, y2)` clamped to the unit square.
    pub fn corners(&self) -> [f64; 4] {
        [
            (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        ]
    }

    pub fn area(&self) -> f64 {
        let [x1, y1, x2, y2] = self.corners();
        (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Smallest box covering both.
    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        let a = self.corners();
        let b = other.corners();
        BoundingBox::from_corners(a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3]))
    }
}

/// Pixel grid in height-width-channel order, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height * width * channels != pixels.len() || pixels.is_empty() {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image with {} values",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let c = self.channels;
        let at = (y * self.width + x) * c;
        &mut self.pixels[at..at + c]
    }
}

/// Ordered frames sampled from a clip, with their timestamps in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<ImageTensor>,
    pub timestamps: Vec<f64>,
}

impl VideoClip {
    pub fn new(frames: Vec<ImageTensor>, timestamps: Vec<f64>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("empty video clip".into()));
        }
        if frames.len() != timestamps.len() {
            return Err(Error::InvalidInput("one timestamp per frame required".into()));
        }
        let (h, w, c) = (frames[0].height, frames[0].width, frames[0].channels);
        if frames.iter().any(|f| (f.height, f.width, f.channels) != (h, w, c)) {
            return Err(Error::InvalidInput("frames differ in size".into()));
        }
        Ok(Self { frames, timestamps })
    }
}

/// Encoded patch sequence of one image (or one video).
#[derive(Clone, Debug, PartialEq)]
pub struct VisionFeatures<T> {
    /// `[P, D]`, row-major over the patch grid.
    pub features: Tensor<T>,
    pub positions: Vec<usize>,
    pub grid: usize,
}

/// A visual concept: the mean-pooled `[CLS]` followed by its patches.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptFeatures<T> {
    pub cls: Vec<T>,
    /// `[K, D]`
    pub patches: Tensor<T>,
    pub positions: Vec<usize>,
    pub source: BoundingBox,
}

/// Flattens an image into `[G*G, patch*patch*C]` pixel patches, row-major.
pub fn patchify(image: &ImageTensor, patch_size: usize) -> Result<Tensor<f32>> {
    let ps = patch_size;
    if ps == 0 || image.height % ps != 0 || image.width % ps != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image not divisible by patch size {ps}",
            image.height, image.width
        )));
    }
    let (gh, gw, c) = (image.height / ps, image.width / ps, image.channels);
    let patch_dim = ps * ps * c;
    let mut out = Vec::with_capacity(gh * gw * patch_dim);
    for pr in 0..gh {
        for pc in 0..gw {
            for y in 0..ps {
                let row = (pr * ps + y) * image.width + pc * ps;
                out.extend_from_slice(&image.pixels[row * c..(row + ps) * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, patch_dim], out)
}

/// Row-major ids of the patches whose centers lie in `bbox` (half-open on the
/// far edges). Falls back to the patch holding the box center when no
/// center is covered.
pub fn select_patches(bbox: &BoundingBox, grid: usize) -> Vec<usize> {
    let [x1, y1, x2, y2] = bbox.corners();
    let g = grid as f64;
    let inside = |lo: f64, hi: f64, i: usize| {
        let c = (i as f64 + 0.5) / g;
        lo <= c && c < hi
    };
    let mut ids = Vec::new();
    for r in 0..grid {
        if !inside(y1, y2, r) {
            continue;
        }
        for c in 0..grid {
            if inside(x1, x2, c) {
                ids.push(r * grid + c);
            }
        }
    }
    if ids.is_empty() {
        let cell = |v: f64| ((v * g).floor() as usize).min(grid - 1);
        ids.push(cell(bbox.cy.clamp(0.0, 1.0)) * grid + cell(bbox.cx.clamp(0.0, 1.0)));
    }
    ids
}

/// Gathers the patches of `bbox` out of an encoded image and prepends their mean.
pub fn select_concept<T: Real>(features: &VisionFeatures<T>, bbox: &BoundingBox) -> ConceptFeatures<T> {
    let ids = select_patches(bbox, features.grid);
    let d = features.features.last_dim();
    let mut cls = vec![T::zero(); d];
    let mut patches = Vec::with_capacity(ids.len() * d);
    for &i in &ids {
        let row = features.features.row(i);
        for (c, &v) in cls.iter_mut().zip(row) {
            *c += v;
        }
        patches.extend_from_slice(row);
    }
    let inv = T::one() / T::lit(ids.len() as f64);
    cls.iter_mut().for_each(|c| *c *= inv);
    ConceptFeatures {
        cls,
        patches: Tensor::from_parts(vec![ids.len(), d], patches),
        positions: ids.iter().map(|&i| features.positions[i]).collect(),
        source: *bbox,
    }
}

/// Uniformly samples up to `count` frame indices, returned in temporal order.
pub fn sample_frames<R: Rng + ?Sized>(frames: usize, count: usize, rng: &mut R) -> Vec<usize> {
    if frames <= count {
        return (0..frames).collect();
    }
    let mut idx = rand::seq::index::sample(rng, frames, count).into_vec();
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub layers: usize,
    pub max_frames: usize,
    pub eps: f64,
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Vision transformer over patch embeddings with learned 2-D positions.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub config: VisionConfig,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub temporal_embed: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_final: LayerNorm,
}

impl VisionEncoder {
    pub fn new<T: Real, R: Rng>(init: &mut Initializer<'_, T, R>, config: VisionConfig) -> Result<Self> {
        if config.patch_size == 0 || config.image_size % config.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                config.image_size, config.patch_size
            )));
        }
        let d = config.dim;
        let patch_dim = config.patch_size * config.patch_size * config.channels;
        let dims = BlockDims {
            dim: d,
            heads: config.heads,
            hidden: config.hidden,
            eps: config.eps,
        };
        let patch_embed = Linear::new(init, "vision.patch_embed", patch_dim, d)?;
        let pos_embed = init.weight("vision.pos_embed", &[config.num_patches(), d])?;
        let temporal_embed = init.weight("vision.temporal_embed", &[config.max_frames.max(1), d])?;
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(init, &format!("vision.layer{i}"), dims))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(init, "vision.ln_final", d, config.eps)?;
        Ok(Self {
            config,
            patch_embed,
            pos_embed,
            temporal_embed,
            blocks,
            ln_final,
        })
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let c = &self.config;
        if image.height != image.width {
            return Err(Error::Shape(format!(
                "image must be square, got {}x{}",
                image.height, image.width
            )));
        }
        if image.height != c.image_size || image.channels != c.channels {
            return Err(Error::Shape(format!(
                "expected {}x{}x{} image, got {}x{}x{}",
                c.image_size, c.image_size, c.channels, image.height, image.width, image.channels
            )));
        }
        Ok(())
    }

    /// Patch embeddings plus positions, `[B, P, D]`.
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, images: &[&ImageTensor]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::InvalidInput("no images to encode".into()));
        }
        let p = self.config.num_patches();
        let mut pixels = Vec::new();
        for image in images {
            self.check_image(image)?;
            let patches = patchify(image, self.config.patch_size)?;
            pixels.extend(patches.data().iter().map(|&v| T::lit(v as f64)));
        }
        let patch_dim = pixels.len() / (images.len() * p);
        let x = g.constant(Tensor::from_parts(vec![images.len(), p, patch_dim], pixels));
        let x = self.patch_embed.forward(g, x)?;
        let pos = g.param(self.pos_embed);
        g.add(x, pos)
    }

    /// Runs the transformer stack over a batch of images, `[B, P, D]`.
    pub fn encode_batch<T: Real>(&self, g: &mut Graph<'_, T>, images: &[&ImageTensor]) -> Result<Var> {
        let mut x = self.embed(g, images)?;
        for block in &self.blocks {
            x = block.forward(g, x, None)?;
        }
        if !self.blocks.is_empty() {
            x = self.ln_final.forward(g, x)?;
        }
        Ok(x)
    }

    /// Adds one temporal embedding per frame slot to encoded frames `[F, P, D]`
    /// and averages over frames, giving `[P, D]`.
    pub fn pool_frames<T: Real>(&self, g: &mut Graph<'_, T>, frames: Var) -> Result<Var> {
        let shape = g.shape(frames).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("frames must be [F, P, D], got {shape:?}")));
        }
        let (f, p, d) = (shape[0], shape[1], shape[2]);
        if f > self.config.max_frames.max(1) {
            return Err(Error::InvalidInput(format!(
                "{f} frames exceed {} temporal slots",
                self.config.max_frames
            )));
        }
        let slots: Vec<usize> = (0..f).flat_map(|s| std::iter::repeat_n(s, p)).collect();
        let temporal = g.param(self.temporal_embed);
        let temporal = g.select_rows(temporal, &slots)?;
        let flat = g.reshape(frames, &[f * p, d])?;
        let x = g.add(flat, temporal)?;
        let groups: Vec<Vec<usize>> = (0..p).map(|pi| (0..f).map(|fi| fi * p + pi).collect()).collect();
        g.pool_rows_canonical(x, &groups)
    }

    /// Encodes one image outside of training.
    pub fn encode_image<T: Real>(&self, params: &ParamStore<T>, image: &ImageTensor) -> Result<VisionFeatures<T>> {
        let mut g = Graph::new(params);
        let x = self.encode_batch(&mut g, &[image])?;
        self.features(&g, x)
    }

    /// Encodes `frames_per_step` uniformly sampled frames and averages them.
    pub fn encode_video<T: Real, R: Rng + ?Sized>(
        &self,
        params: &ParamStore<T>,
        clip: &VideoClip,
        frames_per_step: usize,
        rng: &mut R,
    ) -> Result<VisionFeatures<T>> {
        if clip.frames.is_empty() {
            return Err(Error::InvalidInput("empty video clip".into()));
        }
        let picked = sample_frames(clip.frames.len(), frames_per_step.max(1), rng);
        let frames: Vec<&ImageTensor> = picked.iter().map(|&i| &clip.frames[i]).collect();
        let mut g = Graph::new(params);
        let x = self.encode_batch(&mut g, &frames)?;
        let pooled = self.pool_frames(&mut g, x)?;
        self.features(&g, pooled)
    }

    fn features<T: Real>(&self, g: &Graph<'_, T>, x: Var) -> Result<VisionFeatures<T>> {
        let p = self.config.num_patches();
        let features = g.value(x).clone().reshaped(&[p, self.config.dim])?;
        Ok(VisionFeatures {
            features,
            positions: (0..p).collect(),
            grid: self.config.grid(),
        })
    }
}
