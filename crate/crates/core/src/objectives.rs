//! Pre-training losses: contrastive, matching with hard negatives, masked
//! language modeling, box regression, and their sum over a mixed batch.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Media, MultiGrainedSample};
use crate::error::{Error, Result};
use crate::math::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::model::{ConceptSeqs, ConceptSpec, Model, TextSeqs};
use crate::nn::{Initializer, Linear};
use crate::text::{mask_tokens, tokenize, MaskedText, TextBatch, Vocab};
use crate::vision::{sample_frames, select_patches, BoundingBox, ImageTensor};

pub const MIN_TEMPERATURE: f64 = 0.001;
pub const MAX_TEMPERATURE: f64 = 0.5;
const NORM_EPS: f64 = 1e-12;

/// Projections `g_v`, `g_w` into the shared space and the learnable temperature.
#[derive(Clone, Debug)]
pub struct ProjectionHeads {
    pub vision: Linear,
    pub text: Linear,
    pub log_temp: ParamId,
}

impl ProjectionHeads {
    pub fn new<T: Real, R: Rng>(
        init: &mut Initializer<'_, T, R>,
        dim: usize,
        proj_dim: usize,
        temperature: f64,
    ) -> Result<Self> {
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&temperature) {
            return Err(Error::Config(format!(
                "temperature {temperature} outside [{MIN_TEMPERATURE}, {MAX_TEMPERATURE}]"
            )));
        }
        Ok(Self {
            vision: Linear::new(init, "heads.proj_vision", dim, proj_dim)?,
            text: Linear::new(init, "heads.proj_text", dim, proj_dim)?,
            log_temp: init.constant("heads.log_temp", &[1], temperature.ln())?,
        })
    }

    /// Unit-norm projections of vision `[CLS]` rows.
    pub fn project_vision<T: Real>(&self, g: &mut Graph<'_, T>, cls: Var) -> Result<Var> {
        let z = self.vision.forward(g, cls)?;
        Ok(g.l2_normalize(z, NORM_EPS))
    }

    /// Unit-norm projections of text `[CLS]` rows.
    pub fn project_text<T: Real>(&self, g: &mut Graph<'_, T>, cls: Var) -> Result<Var> {
        let z = self.text.forward(g, cls)?;
        Ok(g.l2_normalize(z, NORM_EPS))
    }

    /// `1 / τ` as a differentiable `[1]` node.
    pub fn inv_temperature<T: Real>(&self, g: &mut Graph<'_, T>) -> Var {
        let lt = g.param(self.log_temp);
        let neg = g.scale(lt, -1.0);
        g.exp(neg)
    }

    pub fn temperature<T: Real>(&self, params: &ParamStore<T>) -> f64 {
        params.get(self.log_temp).value.data()[0].as_f64().exp()
    }

    /// Keeps `τ` inside `[MIN_TEMPERATURE, MAX_TEMPERATURE]`.
    pub fn clamp_temperature<T: Real>(&self, params: &mut ParamStore<T>) {
        let v = &mut params.get_mut(self.log_temp).value.data_mut()[0];
        let clamped = v.as_f64().clamp(MIN_TEMPERATURE.ln(), MAX_TEMPERATURE.ln());
        *v = T::lit(clamped);
    }
}

/// `S[i][j] = s(V_i, T_j)` for a batch of projected pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::Shape(format!("similarity matrix of {} values for n={n}", values.len())));
        }
        Ok(Self { n, values })
    }

    /// From unit-norm projections `v` `[N, d]` and `w` `[N, d]`.
    pub fn from_projections<T: Real>(v: &Tensor<T>, w: &Tensor<T>) -> Result<Self> {
        if v.shape() != w.shape() || v.ndim() != 2 {
            return Err(Error::Shape(format!("projections {:?} vs {:?}", v.shape(), w.shape())));
        }
        let n = v.rows();
        let mut values = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                values.push(v.row(i).iter().zip(w.row(j)).map(|(a, b)| a.as_f64() * b.as_f64()).sum());
            }
        }
        Ok(Self { n, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// `½ (mean row CE + mean column CE)` of `logits` `[N, N]` against the identity.
pub fn contrastive_from_logits<T: Real>(g: &mut Graph<'_, T>, logits: Var) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Shape(format!("contrastive logits must be square, got {s:?}")));
    }
    let n = s[0];
    let mut eye = Tensor::zeros(&[n, n]);
    for i in 0..n {
        eye.data_mut()[i * n + i] = T::one();
    }
    let v2t = g.cross_entropy(logits, &eye)?;
    let v2t = g.mean_all(v2t);
    let lt = g.transpose(logits)?;
    let t2v = g.cross_entropy(lt, &eye)?;
    let t2v = g.mean_all(t2v);
    let sum = g.add(v2t, t2v)?;
    Ok(g.scale(sum, 0.5))
}

/// In-batch contrastive loss between projected concepts `[N, d]` and texts `[N, d]`.
pub fn contrastive_loss<T: Real>(
    g: &mut Graph<'_, T>,
    heads: &ProjectionHeads,
    v_cls: Var,
    w_cls: Var,
) -> Result<Var> {
    if g.shape(v_cls)[0] == 0 || g.shape(v_cls)[0] != g.shape(w_cls)[0] {
        return Err(Error::InvalidInput("contrastive loss needs N >= 1 aligned pairs".into()));
    }
    let v = heads.project_vision(g, v_cls)?;
    let w = heads.project_text(g, w_cls)?;
    let wt = g.transpose(w)?;
    let sim = g.matmul(v, wt)?;
    let inv_t = heads.inv_temperature(g);
    let logits = g.mul_scalar(sim, inv_t)?;
    contrastive_from_logits(g, logits)
}

/// Per concept `i` a negative text, per text `j` a negative concept.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegatives {
    pub texts: Vec<usize>,
    pub concepts: Vec<usize>,
}

pub fn sample_hard_negatives<R: Rng + ?Sized>(sim: &SimilarityMatrix, tau: f64, rng: &mut R) -> Result<HardNegatives> {
    let groups: Vec<usize> = (0..sim.n()).collect();
    sample_hard_negatives_grouped(sim, tau, &groups, rng)
}

/// Like [`sample_hard_negatives`], but candidates in the anchor's group
/// (e.g. the same caption text) are skipped unless nothing else is left.
pub fn sample_hard_negatives_grouped<R: Rng + ?Sized>(
    sim: &SimilarityMatrix,
    tau: f64,
    groups: &[usize],
    rng: &mut R,
) -> Result<HardNegatives> {
    let n = sim.n();
    if n < 2 {
        return Err(Error::InvalidInput(format!("hard negatives need N >= 2, got {n}")));
    }
    if groups.len() != n {
        return Err(Error::Shape(format!("{} groups for {n} pairs", groups.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {tau}")));
    }
    let pick = |anchor: usize, score: &dyn Fn(usize) -> f64, rng: &mut R| -> usize {
        let mut cands: Vec<usize> = (0..n).filter(|&j| j != anchor && groups[j] != groups[anchor]).collect();
        if cands.is_empty() {
            cands = (0..n).filter(|&j| j != anchor).collect();
        }
        let mx = cands.iter().map(|&j| score(j)).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = cands.iter().map(|&j| ((score(j) - mx) / tau).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (&j, &w) in cands.iter().zip(&weights) {
            if u < w {
                return j;
            }
            u -= w;
        }
        *cands.last().expect("at least one candidate")
    };
    let texts = (0..n).map(|i| pick(i, &|j| sim.get(i, j), rng)).collect();
    let concepts = (0..n).map(|j| pick(j, &|i| sim.get(i, j), rng)).collect();
    Ok(HardNegatives { texts, concepts })
}

/// Mean two-way cross-entropy of `{mismatch, match}` logits `[M, 2]`.
pub fn matching_loss_from_logits<T: Real>(g: &mut Graph<'_, T>, logits: Var, labels: &[bool]) -> Result<Var> {
    let m = labels.len();
    if g.shape(logits) != [m, 2] {
        return Err(Error::Shape(format!("matching logits {:?} for {m} labels", g.shape(logits))));
    }
    let mut target = Tensor::zeros(&[m, 2]);
    for (i, &l) in labels.iter().enumerate() {
        target.data_mut()[i * 2 + usize::from(l)] = T::one();
    }
    let ce = g.cross_entropy(logits, &target)?;
    Ok(g.mean_all(ce))
}

/// Matching loss over one positive, one negative-text and one
/// negative-concept pair per anchor.
pub fn matching_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    texts: &TextSeqs<T>,
    text_of: &[usize],
    concepts: &ConceptSeqs<T>,
    concept_of: &[usize],
    negatives: &HardNegatives,
) -> Result<Var> {
    let n = text_of.len();
    if concept_of.len() != n || negatives.texts.len() != n || negatives.concepts.len() != n {
        return Err(Error::Shape("matching inputs disagree on anchor count".into()));
    }
    let mut t_idx = Vec::with_capacity(3 * n);
    let mut c_idx = Vec::with_capacity(3 * n);
    let mut labels = Vec::with_capacity(3 * n);
    for i in 0..n {
        t_idx.extend([text_of[i], text_of[negatives.texts[i]], text_of[i]]);
        c_idx.extend([concept_of[i], concept_of[i], concept_of[negatives.concepts[i]]]);
        labels.extend([true, false, false]);
    }
    let fused = model.fuse_pairs(g, texts, &t_idx, concepts, &c_idx)?;
    let cls = model.fusion.cls(g, fused)?;
    let logits = model.fusion.predict_match(g, cls)?;
    matching_loss_from_logits(g, logits, &labels)
}

/// Mean cross-entropy of vocabulary logits `[M, V]` at masked positions.
pub fn mlm_loss_from_logits<T: Real>(g: &mut Graph<'_, T>, logits: Var, labels: &[u32]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape(format!("mlm logits {s:?} for {} labels", labels.len())));
    }
    let v = s[1];
    let mut target = Tensor::zeros(&s);
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= v {
            return Err(Error::InvalidInput(format!("label {l} outside vocab of {v}")));
        }
        target.data_mut()[i * v + l as usize] = T::one();
    }
    let ce = g.cross_entropy(logits, &target)?;
    Ok(g.mean_all(ce))
}

/// Predicts masked tokens of `masked[i]` given concept `concept_of[i]`.
///
/// Returns the loss and the number of masked positions; zero positions give a
/// constant zero loss.
pub fn mlm_loss<T: Real>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    masked: &[MaskedText],
    concepts: &ConceptSeqs<T>,
    concept_of: &[usize],
) -> Result<(Var, usize)> {
    let count: usize = masked.iter().map(|m| m.positions.len()).sum();
    if count == 0 {
        return Ok((g.constant(Tensor::zeros(&[1])), 0));
    }
    if concept_of.len() != masked.len() {
        return Err(Error::Shape("one concept per masked text expected".into()));
    }
    let batch = TextBatch::new(masked.iter().map(|m| (m.ids.as_slice(), m.mask.as_slice())))?;
    let texts = TextSeqs::encode(model, g, &batch)?;
    let idx: Vec<usize> = (0..masked.len()).collect();
    let fused = model.fuse_pairs(g, &texts, &idx, concepts, concept_of)?;
    let d = model.config.dim;
    let flat = g.reshape(fused, &[batch.batch * batch.len, d])?;
    let mut rows = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for (b, m) in masked.iter().enumerate() {
        for &p in &m.positions {
            rows.push(b * batch.len + p);
            labels.push(m.labels[p].expect("masked position has a label"));
        }
    }
    let picked = g.select_rows(flat, &rows)?;
    let table = g.param(model.text.token_embed);
    let bias = g.param(model.text.mlm_bias);
    let logits = model.fusion.predict_mlm(g, picked, table, bias)?;
    Ok((mlm_loss_from_logits(g, logits, &labels)?, count))
}

fn overlap(a: &BoundingBox, b: &BoundingBox) -> (f64, f64, f64) {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    (inter, union, enclosing)
}

fn check_area(b: &BoundingBox) -> Result<()> {
    b.validate()?;
    if b.area() <= 0.0 {
        return Err(Error::InvalidInput(format!("degenerate zero-area box {b:?}")));
    }
    Ok(())
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    check_area(a)?;
    check_area(b)?;
    let (inter, union, _) = overlap(a, b);
    Ok(inter / union)
}

/// Generalized IoU, in `(-1, 1]`.
pub fn giou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    check_area(a)?;
    check_area(b)?;
    let (inter, union, enclosing) = overlap(a, b);
    Ok(inter / union - ((enclosing - union) / enclosing).max(0.0))
}

/// `(1 - GIoU) + L1` for one box pair.
pub fn bbox_loss(pred: &BoundingBox, target: &BoundingBox) -> Result<f64> {
    let l1: f64 = pred
        .to_array()
        .iter()
        .zip(target.to_array())
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(1.0 - giou(pred, target)? + l1)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCounts {
    pub cl: usize,
    #[serde(rename = "match")]
    pub matching: usize,
    pub mlm: usize,
    pub bbox: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cl: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub mlm: f64,
    pub bbox: f64,
    pub total: f64,
    pub counts: TermCounts,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.cl, self.matching, self.mlm, self.bbox, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("cl", self.cl),
            ("match", self.matching),
            ("mlm", self.mlm),
            ("bbox", self.bbox),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(k, _)| k)
    }
}

/// Loss nodes of one forward pass; unsupported terms are constant zeros.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cl: Var,
    pub matching: Var,
    pub mlm: Var,
    pub bbox: Var,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub mask_prob: f64,
    pub frames_per_step: usize,
    /// Annotations sampled per sample per step.
    pub concepts_per_sample: usize,
    pub use_bbox: bool,
    /// Annotation-level aligning pairs; off leaves only caption-level pairs.
    pub concept_align: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.4,
            frames_per_step: 3,
            concepts_per_sample: 2,
            use_bbox: true,
            concept_align: true,
        }
    }
}

struct Pair {
    concept: usize,
    text: String,
}

/// Encodes every media item of `samples`; returns `[M * P, D]` patch rows
/// with media item `i` at rows `i * P .. (i + 1) * P`.
pub fn encode_media<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    media: &[&Media],
    frames_per_step: usize,
    rng: &mut R,
) -> Result<Var> {
    let p = model.config.num_patches();
    let d = model.config.dim;
    let mut images: Vec<&ImageTensor> = Vec::new();
    let mut plan: Vec<(usize, usize)> = Vec::with_capacity(media.len());
    for m in media {
        let start = images.len();
        match m {
            Media::Image(img) => images.push(img),
            Media::Video(clip) => {
                let count = frames_per_step.min(clip.frames.len()).min(model.config.max_frames);
                for f in sample_frames(clip.frames.len(), count, rng) {
                    images.push(&clip.frames[f]);
                }
            }
        }
        plan.push((start, images.len() - start));
    }
    if images.is_empty() {
        return Err(Error::InvalidInput("no media to encode".into()));
    }
    let enc = model.vision.encode_batch(g, &images)?;
    let flat = g.reshape(enc, &[images.len() * p, d])?;
    let mut parts = Vec::with_capacity(media.len());
    for (m, &(start, count)) in media.iter().zip(&plan) {
        let rows: Vec<usize> = (start * p..(start + count) * p).collect();
        let x = g.select_rows(flat, &rows)?;
        let x = match m {
            Media::Image(_) => x,
            Media::Video(_) => {
                let frames = g.reshape(x, &[count, p, d])?;
                model.vision.pool_frames(g, frames)?
            }
        };
        parts.push(x);
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(&parts, 0)
    }
}

fn tokenize_all(texts: &[&str], vocab: &Vocab, max_len: usize) -> Result<Vec<crate::text::TokenSequence>> {
    texts.iter().map(|t| tokenize(t, vocab, max_len)).collect()
}

/// One forward pass of the full objective over a mixed batch.
///
/// Caption pairs align the whole image or video; annotations give concept
/// pairs and box targets against whole-image fusion. Each term is averaged
/// over the part of the batch that supports it.
pub fn total_loss<T: Real, R: Rng + ?Sized>(
    model: &Model<T>,
    g: &mut Graph<'_, T>,
    vocab: &Vocab,
    samples: &[&MultiGrainedSample],
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<LossTerms> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Config(format!(
            "vocab of {} words for a model with vocab_size {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    let grid = model.config.grid();
    let p = model.config.num_patches();
    let max_len = model.config.max_text_len;

    let mut specs: Vec<ConceptSpec> = Vec::new();
    let mut spec_index: HashMap<(usize, Vec<usize>), usize> = HashMap::new();
    let mut concept_for = |media: usize, patches: Vec<usize>, specs: &mut Vec<ConceptSpec>| -> usize {
        *spec_index.entry((media, patches.clone())).or_insert_with(|| {
            specs.push(ConceptSpec { media, patches });
            specs.len() - 1
        })
    };
    let all_patches: Vec<usize> = (0..p).collect();
    let mut pairs: Vec<Pair> = Vec::new();
    let mut boxes: Vec<(usize, String, BoundingBox)> = Vec::new();
    for (m, s) in samples.iter().enumerate() {
        if let Some(caption) = &s.caption {
            let c = concept_for(m, all_patches.clone(), &mut specs);
            pairs.push(Pair {
                concept: c,
                text: caption.clone(),
            });
        }
        if s.annotations.is_empty() {
            continue;
        }
        let k = cfg.concepts_per_sample.min(s.annotations.len());
        let mut chosen = sample(rng, s.annotations.len(), k).into_vec();
        chosen.sort_unstable();
        for a in chosen.into_iter().map(|i| &s.annotations[i]) {
            if cfg.concept_align {
                let c = concept_for(m, select_patches(&a.bbox, grid), &mut specs);
                pairs.push(Pair {
                    concept: c,
                    text: a.text.clone(),
                });
            }
            if cfg.use_bbox && matches!(s.media, Media::Image(_)) {
                let c = concept_for(m, all_patches.clone(), &mut specs);
                boxes.push((c, a.text.clone(), a.bbox));
            }
        }
    }
    if pairs.is_empty() && boxes.is_empty() {
        return Err(Error::InvalidInput("batch supports no loss term".into()));
    }

    let media: Vec<&Media> = samples.iter().map(|s| &s.media).collect();
    let media_rows = encode_media(model, g, &media, cfg.frames_per_step, rng)?;
    let concepts = ConceptSeqs::build(g, media_rows, p, &specs)?;

    let mut texts: Vec<&str> = pairs.iter().map(|q| q.text.as_str()).collect();
    texts.extend(boxes.iter().map(|b| b.1.as_str()));
    let tokens = tokenize_all(&texts, vocab, max_len)?;
    let text_batch = TextBatch::new(tokens.iter().map(|t| (t.ids.as_slice(), t.mask.as_slice())))?;
    let text_seqs = TextSeqs::encode(model, g, &text_batch)?;

    let zero = |g: &mut Graph<'_, T>| g.constant(Tensor::zeros(&[1]));
    let mut counts = TermCounts::default();
    let n = pairs.len();
    let pair_concepts: Vec<usize> = pairs.iter().map(|q| q.concept).collect();
    let pair_texts: Vec<usize> = (0..n).collect();

    let (cl, matching, mlm) = if n == 0 {
        (zero(g), zero(g), zero(g))
    } else {
        let v_cls = g.select_rows(concepts.cls, &pair_concepts)?;
        let w_cls = g.select_rows(text_seqs.cls, &pair_texts)?;
        let cl = contrastive_loss(g, &model.heads, v_cls, w_cls)?;
        counts.cl = n;

        let matching = if n >= 2 {
            let v = model.heads.project_vision(g, v_cls)?;
            let w = model.heads.project_text(g, w_cls)?;
            let sim = SimilarityMatrix::from_projections(g.value(v), g.value(w))?;
            let mut group_of: HashMap<&str, usize> = HashMap::new();
            let groups: Vec<usize> = pairs
                .iter()
                .map(|q| {
                    let next = group_of.len();
                    *group_of.entry(q.text.as_str()).or_insert(next)
                })
                .collect();
            let tau = model.heads.temperature(g.params());
            let negatives = sample_hard_negatives_grouped(&sim, tau, &groups, rng)?;
            counts.matching = 3 * n;
            matching_loss(model, g, &text_seqs, &pair_texts, &concepts, &pair_concepts, &negatives)?
        } else {
            zero(g)
        };

        let masked: Vec<MaskedText> = tokens[..n]
            .iter()
            .map(|t| mask_tokens(t, vocab, cfg.mask_prob, rng))
            .collect();
        let (mlm, count) = mlm_loss(model, g, &masked, &concepts, &pair_concepts)?;
        counts.mlm = count;
        (cl, matching, mlm)
    };

    let bbox = if boxes.is_empty() {
        zero(g)
    } else {
        let t_idx: Vec<usize> = (n..n + boxes.len()).collect();
        let c_idx: Vec<usize> = boxes.iter().map(|b| b.0).collect();
        let fused = model.fuse_pairs(g, &text_seqs, &t_idx, &concepts, &c_idx)?;
        let cls = model.fusion.cls(g, fused)?;
        let pred = model.fusion.predict_bbox(g, cls)?;
        let target: Vec<f64> = boxes.iter().flat_map(|b| b.2.to_array()).collect();
        let target = Tensor::<T>::from_f64(&[boxes.len(), 4], &target)?;
        let per_box = g.box_loss(pred, &target)?;
        counts.bbox = boxes.len();
        g.mean_all(per_box)
    };

    let a = g.add(cl, matching)?;
    let b = g.add(mlm, bbox)?;
    let total = g.add(a, b)?;
    let value = |v: Var| g.scalar(v).as_f64();
    let (cl_v, m_v, mlm_v, bb_v) = (value(cl), value(matching), value(mlm), value(bbox));
    let breakdown = LossBreakdown {
        cl: cl_v,
        matching: m_v,
        mlm: mlm_v,
        bbox: bb_v,
        total: cl_v + m_v + mlm_v + bb_v,
        counts,
    };
    Ok(LossTerms {
        cl,
        matching,
        mlm,
        bbox,
        total,
        breakdown,
    })
}
