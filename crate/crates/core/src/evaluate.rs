//! Two-stage retrieval, grounding and masked-word evaluation.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Media, MultiGrainedSample};
use crate::error::{Error, Result};
use crate::math::{Graph, Real, Tensor};
use crate::model::{ConceptSeqs, ConceptSpec, Model, TextSeqs};
use crate::objectives::{encode_media, iou, SimilarityMatrix};
use crate::text::{tokenize, TextBatch, Vocab, MASK};
use crate::vision::BoundingBox;

const CHUNK: usize = 64;
const PAIR_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Candidates reranked by the matching head.
    pub k: usize,
    pub frames_per_step: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 8,
            frames_per_step: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

impl Recall {
    /// From 0-based ranks of the gold candidate.
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let at = |m: usize| ranks.iter().filter(|&&r| r < m).count() as f64 / n;
        Self {
            r1: at(1),
            r5: at(5),
            r10: at(10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub query: usize,
    pub gold: usize,
    /// All candidates by similarity.
    pub stage1: Vec<usize>,
    /// The top `k` reranked by matching probability, then the rest of stage 1.
    pub stage2: Vec<usize>,
}

impl QueryRanking {
    pub fn gold_rank(&self) -> usize {
        self.stage2.iter().position(|&c| c == self.gold).unwrap_or(usize::MAX)
    }

    pub fn stage1_gold_rank(&self) -> usize {
        self.stage1.iter().position(|&c| c == self.gold).unwrap_or(usize::MAX)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub k: usize,
    pub text_to_vision: Vec<QueryRanking>,
    pub vision_to_text: Vec<QueryRanking>,
    pub t2v: Recall,
    pub v2t: Recall,
}

impl RetrievalResult {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "direction        R@1     R@5     R@10   (k={}, n={})", self.k, self.text_to_vision.len());
        for (name, r) in [("text->vision", self.t2v), ("vision->text", self.v2t)] {
            let _ = writeln!(s, "{name:<14} {:>7.4} {:>7.4} {:>7.4}", r.r1, r.r5, r.r10);
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "kind": "retrieval",
            "k": self.k,
            "n": self.text_to_vision.len(),
            "t2v": self.t2v,
            "v2t": self.v2t,
        })
        .to_string()
    }
}

/// Ranks candidates by `scores` (higher first), ties by candidate id.
fn rank_by(cands: &mut [usize], score: impl Fn(usize) -> f64) {
    cands.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
}

/// Which pair a reranking score is for: `(vision index, text index)`.
pub type PairIndex = (usize, usize);

/// Stage 1 ranks by `sim` (rows vision, columns text); stage 2 reorders each
/// query's top `k` by `score_pairs`. Item `i` of each side is the gold for `i`.
pub fn rank_two_stage(
    sim: &SimilarityMatrix,
    k: usize,
    mut score_pairs: impl FnMut(&[PairIndex]) -> Result<Vec<f64>>,
) -> Result<RetrievalResult> {
    let n = sim.n();
    if n == 0 {
        return Err(Error::InvalidInput("no retrieval candidates".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    let k = if k > n {
        log::warn!("k={k} exceeds {n} candidates; clamped");
        n
    } else {
        k
    };
    let stage1 = |query: usize, t2v: bool| {
        let mut c: Vec<usize> = (0..n).collect();
        if t2v {
            rank_by(&mut c, |i| sim.get(i, query));
        } else {
            rank_by(&mut c, |j| sim.get(query, j));
        }
        c
    };
    let t2v_s1: Vec<Vec<usize>> = (0..n).map(|q| stage1(q, true)).collect();
    let v2t_s1: Vec<Vec<usize>> = (0..n).map(|q| stage1(q, false)).collect();
    let mut pairs = Vec::with_capacity(2 * n * k);
    for (q, r) in t2v_s1.iter().enumerate() {
        pairs.extend(r[..k].iter().map(|&i| (i, q)));
    }
    for (q, r) in v2t_s1.iter().enumerate() {
        pairs.extend(r[..k].iter().map(|&j| (q, j)));
    }
    let scores = score_pairs(&pairs)?;
    if scores.len() != pairs.len() {
        return Err(Error::Shape("one rerank score per pair expected".into()));
    }
    let finish = |s1: Vec<Vec<usize>>, offset: usize| -> Vec<QueryRanking> {
        s1.into_iter()
            .enumerate()
            .map(|(q, stage1)| {
                let base = offset + q * k;
                let mut top: Vec<usize> = (0..k).collect();
                rank_by(&mut top, |t| scores[base + t]);
                let mut stage2: Vec<usize> = top.iter().map(|&t| stage1[t]).collect();
                stage2.extend_from_slice(&stage1[k..]);
                QueryRanking {
                    query: q,
                    gold: q,
                    stage1,
                    stage2,
                }
            })
            .collect()
    };
    let text_to_vision = finish(t2v_s1, 0);
    let vision_to_text = finish(v2t_s1, n * k);
    let ranks = |r: &[QueryRanking]| r.iter().map(QueryRanking::gold_rank).collect::<Vec<_>>();
    Ok(RetrievalResult {
        k,
        t2v: Recall::from_ranks(&ranks(&text_to_vision)),
        v2t: Recall::from_ranks(&ranks(&vision_to_text)),
        text_to_vision,
        vision_to_text,
    })
}

/// Whole-media concept sequences and their projections.
struct EncodedMedia<T> {
    seqs: Vec<Tensor<T>>,
    proj: Vec<Vec<T>>,
}

struct EncodedTexts<T> {
    seqs: Vec<Tensor<T>>,
    proj: Vec<Vec<T>>,
}

fn split_rows<T: Real>(t: &Tensor<T>, rows_each: &[usize], stride: usize) -> Result<Vec<Tensor<T>>> {
    let d = t.last_dim();
    rows_each
        .iter()
        .enumerate()
        .map(|(b, &r)| Tensor::new(vec![r, d], t.data()[b * stride * d..][..r * d].to_vec()))
        .collect()
}

fn rows_of<T: Real>(t: &Tensor<T>) -> Vec<Vec<T>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn encode_all_media<T: Real>(model: &Model<T>, media: &[&Media], cfg: &EvalConfig) -> Result<EncodedMedia<T>> {
    let p = model.config.num_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = EncodedMedia {
        seqs: Vec::with_capacity(media.len()),
        proj: Vec::with_capacity(media.len()),
    };
    for chunk in media.chunks(CHUNK) {
        let mut g = Graph::new(&model.params);
        let rows = encode_media(model, &mut g, chunk, cfg.frames_per_step, &mut rng)?;
        let specs: Vec<ConceptSpec> = (0..chunk.len())
            .map(|m| ConceptSpec {
                media: m,
                patches: (0..p).collect(),
            })
            .collect();
        let concepts = ConceptSeqs::build(&mut g, rows, p, &specs)?;
        let proj = model.heads.project_vision(&mut g, concepts.cls)?;
        out.seqs
            .extend(split_rows(g.value(concepts.seq), &vec![concepts.len; chunk.len()], concepts.len)?);
        out.proj.extend(rows_of(g.value(proj)));
    }
    Ok(out)
}

fn encode_all_texts<T: Real>(model: &Model<T>, texts: &[&str], vocab: &Vocab) -> Result<EncodedTexts<T>> {
    let mut out = EncodedTexts {
        seqs: Vec::with_capacity(texts.len()),
        proj: Vec::with_capacity(texts.len()),
    };
    for chunk in texts.chunks(CHUNK) {
        let tokens = chunk
            .iter()
            .map(|t| tokenize(t, vocab, model.config.max_text_len))
            .collect::<Result<Vec<_>>>()?;
        let batch = TextBatch::new(tokens.iter().map(|t| (t.ids.as_slice(), t.mask.as_slice())))?;
        let mut g = Graph::new(&model.params);
        let seqs = TextSeqs::encode(model, &mut g, &batch)?;
        let proj = model.heads.project_text(&mut g, seqs.cls)?;
        let lens: Vec<usize> = tokens.iter().map(|t| t.real_len()).collect();
        out.seqs.extend(split_rows(g.value(seqs.seq), &lens, batch.len)?);
        out.proj.extend(rows_of(g.value(proj)));
    }
    Ok(out)
}

fn match_scores<T: Real>(
    model: &Model<T>,
    texts: &[Tensor<T>],
    visions: &[Tensor<T>],
    pairs: &[PairIndex],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(PAIR_CHUNK) {
        let mut g = Graph::new(&model.params);
        let mut t_ids: Vec<usize> = chunk.iter().map(|p| p.1).collect();
        let mut v_ids: Vec<usize> = chunk.iter().map(|p| p.0).collect();
        let t_refs: Vec<&Tensor<T>> = t_ids.iter().map(|&j| &texts[j]).collect();
        let v_refs: Vec<&Tensor<T>> = v_ids.iter().map(|&i| &visions[i]).collect();
        let ts = TextSeqs::from_values(&mut g, &t_refs)?;
        let vs = ConceptSeqs::from_values(&mut g, &v_refs)?;
        t_ids = (0..chunk.len()).collect();
        v_ids = t_ids.clone();
        let fused = model.fuse_pairs(&mut g, &ts, &t_ids, &vs, &v_ids)?;
        let cls = model.fusion.cls(&mut g, fused)?;
        let logits = model.fusion.predict_match(&mut g, cls)?;
        let l = g.value(logits);
        // P(match) = sigmoid(l_match - l_mismatch)
        out.extend((0..chunk.len()).map(|r| {
            let z = l.row(r)[1].as_f64() - l.row(r)[0].as_f64();
            1.0 / (1.0 + (-z).exp())
        }));
    }
    Ok(out)
}

/// Captioned media pairs used for retrieval, in dataset order.
pub fn retrieval_pairs(samples: &[&MultiGrainedSample]) -> Vec<(usize, String)> {
    samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.caption.clone().map(|c| (i, c)))
        .collect()
}

/// Retrieval over every captioned sample; each caption's gold is its own media.
pub fn eval_retrieval<T: Real>(
    model: &Model<T>,
    samples: &[&MultiGrainedSample],
    vocab: &Vocab,
    cfg: &EvalConfig,
) -> Result<RetrievalResult> {
    let pairs = retrieval_pairs(samples);
    if pairs.is_empty() {
        return Err(Error::Data("no captioned samples to retrieve".into()));
    }
    let media: Vec<&Media> = pairs.iter().map(|(i, _)| &samples[*i].media).collect();
    let texts: Vec<&str> = pairs.iter().map(|(_, c)| c.as_str()).collect();
    let ev = encode_all_media(model, &media, cfg)?;
    let et = encode_all_texts(model, &texts, vocab)?;
    let n = pairs.len();
    let mut values = Vec::with_capacity(n * n);
    for v in &ev.proj {
        for w in &et.proj {
            values.push(v.iter().zip(w).map(|(a, b)| a.as_f64() * b.as_f64()).sum());
        }
    }
    let sim = SimilarityMatrix::new(n, values)?;
    rank_two_stage(&sim, cfg.k, |p| match_scores(model, &et.seqs, &ev.seqs, p))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingInstance {
    pub sample_id: String,
    pub text: String,
    pub predicted: [f64; 4],
    pub gold: BoundingBox,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingResult {
    pub instances: Vec<GroundingInstance>,
    pub mean_iou: f64,
    /// Fraction with IoU >= 0.5.
    pub accuracy: f64,
    /// Samples without annotations.
    pub skipped: usize,
}

/// IoU with degenerate predictions scored as zero.
pub fn box_iou(pred: &[f64; 4], gold: &BoundingBox) -> f64 {
    let p = BoundingBox {
        cx: pred[0],
        cy: pred[1],
        w: pred[2],
        h: pred[3],
    };
    iou(&p, gold).unwrap_or(0.0)
}

impl GroundingResult {
    pub fn from_instances(instances: Vec<GroundingInstance>, skipped: usize) -> Self {
        let n = instances.len().max(1) as f64;
        let mean_iou = instances.iter().map(|i| i.iou).sum::<f64>() / n;
        let accuracy = instances.iter().filter(|i| i.iou >= 0.5).count() as f64 / n;
        Self {
            instances,
            mean_iou,
            accuracy,
            skipped,
        }
    }

    pub fn table(&self) -> String {
        format!(
            "instances  mean IoU  acc@0.5  skipped\n{:>9} {:>9.4} {:>8.4} {:>8}\n",
            self.instances.len(),
            self.mean_iou,
            self.accuracy,
            self.skipped
        )
    }

    pub fn summary_json(&self) -> String {
        serde_json::json!({
            "kind": "grounding",
            "instances": self.instances.len(),
            "mean_iou": self.mean_iou,
            "accuracy": self.accuracy,
            "skipped": self.skipped,
        })
        .to_string()
    }
}

/// Predicts each annotation's box from whole-image features and its text.
pub fn eval_grounding<T: Real>(
    model: &Model<T>,
    samples: &[&MultiGrainedSample],
    vocab: &Vocab,
    cfg: &EvalConfig,
) -> Result<GroundingResult> {
    let usable: Vec<&MultiGrainedSample> = samples
        .iter()
        .copied()
        .filter(|s| !s.annotations.is_empty() && !s.media.is_video())
        .collect();
    let skipped = samples.len() - usable.len();
    let media: Vec<&Media> = usable.iter().map(|s| &s.media).collect();
    let ev = encode_all_media(model, &media, cfg)?;
    let mut queries: Vec<(usize, usize)> = Vec::new();
    for (i, s) in usable.iter().enumerate() {
        queries.extend((0..s.annotations.len()).map(|a| (i, a)));
    }
    let texts: Vec<&str> = queries
        .iter()
        .map(|&(i, a)| usable[i].annotations[a].text.as_str())
        .collect();
    let et = encode_all_texts(model, &texts, vocab)?;
    let mut instances = Vec::with_capacity(queries.len());
    for (c, chunk) in queries.chunks(PAIR_CHUNK).enumerate() {
        let mut g = Graph::new(&model.params);
        let t_refs: Vec<&Tensor<T>> = (0..chunk.len()).map(|q| &et.seqs[c * PAIR_CHUNK + q]).collect();
        let v_refs: Vec<&Tensor<T>> = chunk.iter().map(|&(i, _)| &ev.seqs[i]).collect();
        let ts = TextSeqs::from_values(&mut g, &t_refs)?;
        let vs = ConceptSeqs::from_values(&mut g, &v_refs)?;
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let fused = model.fuse_pairs(&mut g, &ts, &idx, &vs, &idx)?;
        let cls = model.fusion.cls(&mut g, fused)?;
        let boxes = model.fusion.predict_bbox(&mut g, cls)?;
        let b = g.value(boxes);
        for (r, &(i, a)) in chunk.iter().enumerate() {
            let row = b.row(r);
            let predicted = [row[0].as_f64(), row[1].as_f64(), row[2].as_f64(), row[3].as_f64()];
            let ann = &usable[i].annotations[a];
            instances.push(GroundingInstance {
                sample_id: usable[i].id.clone(),
                text: ann.text.clone(),
                predicted,
                gold: ann.bbox,
                iou: box_iou(&predicted, &ann.bbox),
            });
        }
    }
    Ok(GroundingResult::from_instances(instances, skipped))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MlmAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

/// Masks each occurrence of a `words` token in every caption, one at a time,
/// and checks the top prediction given the whole image.
pub fn eval_mlm_words<T: Real>(
    model: &Model<T>,
    samples: &[&MultiGrainedSample],
    vocab: &Vocab,
    words: &[&str],
    cfg: &EvalConfig,
) -> Result<MlmAccuracy> {
    let targets: HashSet<u32> = words.iter().filter_map(|w| vocab.id(w)).collect();
    let pairs = retrieval_pairs(samples);
    let media: Vec<&Media> = pairs.iter().map(|(i, _)| &samples[*i].media).collect();
    let ev = encode_all_media(model, &media, cfg)?;
    // (pair, masked ids, position, label)
    let mut queries: Vec<(usize, Vec<u32>, usize, u32)> = Vec::new();
    for (p, (_, caption)) in pairs.iter().enumerate() {
        let tokens = tokenize(caption, vocab, model.config.max_text_len)?;
        for (pos, &id) in tokens.ids.iter().enumerate() {
            if targets.contains(&id) {
                let mut ids = tokens.ids.clone();
                ids[pos] = MASK;
                queries.push((p, ids, pos, id));
            }
        }
    }
    let mut correct = 0;
    for chunk in queries.chunks(PAIR_CHUNK) {
        let masks: Vec<Vec<bool>> = chunk.iter().map(|q| vec![true; q.1.len()]).collect();
        let batch = TextBatch::new(chunk.iter().zip(&masks).map(|(q, m)| (q.1.as_slice(), m.as_slice())))?;
        let mut g = Graph::new(&model.params);
        let ts = TextSeqs::encode(model, &mut g, &batch)?;
        let v_refs: Vec<&Tensor<T>> = chunk.iter().map(|q| &ev.seqs[q.0]).collect();
        let vs = ConceptSeqs::from_values(&mut g, &v_refs)?;
        let idx: Vec<usize> = (0..chunk.len()).collect();
        let fused = model.fuse_pairs(&mut g, &ts, &idx, &vs, &idx)?;
        let d = model.config.dim;
        let flat = g.reshape(fused, &[chunk.len() * batch.len, d])?;
        let rows: Vec<usize> = chunk.iter().enumerate().map(|(b, q)| b * batch.len + q.2).collect();
        let picked = g.select_rows(flat, &rows)?;
        let table = g.param(model.text.token_embed);
        let bias = g.param(model.text.mlm_bias);
        let logits = model.fusion.predict_mlm(&mut g, picked, table, bias)?;
        let l = g.value(logits);
        for (r, q) in chunk.iter().enumerate() {
            let row = l.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].as_f64().total_cmp(&row[b].as_f64()).then(b.cmp(&a)))
                .expect("non-empty vocab");
            if best as u32 == q.3 {
                correct += 1;
            }
        }
    }
    let total = queries.len();
    Ok(MlmAccuracy {
        correct,
        total,
        accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
    })
}

/// Loss curves from a metrics log as tab-separated values.
pub fn loss_curve_tsv(log: &str) -> Result<String> {
    let mut out = String::from("step\tlr\tcl\tmatch\tmlm\tbbox\ttotal\n");
    let keys = ["step", "lr", "cl", "match", "mlm", "bbox", "total"];
    for line in log.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("total").is_none() {
            continue;
        }
        let fields = keys
            .iter()
            .map(|k| {
                v.get(*k)
                    .map(|x| x.to_string())
                    .ok_or_else(|| Error::Data(format!("metrics record lacks {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

/// Evaluation curves from a metrics log as tab-separated values.
pub fn eval_curve_tsv(log: &str) -> Result<String> {
    let mut out = String::from("step\tr1_t2v\tr1_v2t\tmean_iou\tacc50\n");
    let keys = ["step", "r1_t2v", "r1_v2t", "mean_iou", "acc50"];
    for line in log.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("r1_t2v").is_none() {
            continue;
        }
        let fields: Vec<String> = keys
            .iter()
            .map(|k| v.get(*k).map(|x| x.to_string()).unwrap_or_default())
            .collect();
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> SimilarityMatrix {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        SimilarityMatrix::new(n, v).unwrap()
    }

    #[test]
    fn oracle_similarities_give_perfect_recall() {
        let r = rank_two_stage(&identity(12), 4, |p| Ok(vec![0.5; p.len()])).unwrap();
        assert_eq!(r.t2v.r1, 1.0);
        assert_eq!(r.v2t.r1, 1.0);
    }

    #[test]
    fn rerank_with_k_one_keeps_stage_one() {
        let mut v = vec![0.0; 9];
        v[1] = 0.9; // vision 0 looks like text 1
        let sim = SimilarityMatrix::new(3, v).unwrap();
        let r = rank_two_stage(&sim, 1, |p| Ok(p.iter().map(|&(i, j)| f64::from(u8::from(i == j))).collect())).unwrap();
        for q in r.text_to_vision.iter().chain(&r.vision_to_text) {
            assert_eq!(q.stage1, q.stage2);
        }
    }

    #[test]
    fn stage_two_permutes_only_the_top_k() {
        let sim = SimilarityMatrix::new(5, (0..25).map(|x| ((x * 7) % 11) as f64).collect()).unwrap();
        let r = rank_two_stage(&sim, 3, |p| Ok(p.iter().map(|&(i, j)| (i * 3 + j) as f64).collect())).unwrap();
        for q in &r.text_to_vision {
            let mut a = q.stage1[..3].to_vec();
            let mut b = q.stage2[..3].to_vec();
            a.sort();
            b.sort();
            assert_eq!(a, b);
            assert_eq!(q.stage1[3..], q.stage2[3..]);
        }
    }

    #[test]
    fn ties_break_by_candidate_id() {
        let sim = SimilarityMatrix::new(3, vec![0.0; 9]).unwrap();
        let r = rank_two_stage(&sim, 3, |p| Ok(vec![0.0; p.len()])).unwrap();
        assert_eq!(r.text_to_vision[2].stage2, vec![0, 1, 2]);
        assert_eq!(r.t2v.r1, 1.0 / 3.0);
    }

    #[test]
    fn k_larger_than_n_is_clamped() {
        let r = rank_two_stage(&identity(3), 10, |p| Ok(vec![0.0; p.len()])).unwrap();
        assert_eq!(r.k, 3);
    }

    #[test]
    fn recall_is_monotone() {
        let r = Recall::from_ranks(&[0, 3, 7, 12]);
        assert_eq!((r.r1, r.r5, r.r10), (0.25, 0.5, 0.75));
    }

    #[test]
    fn exact_prediction_scores_one() {
        let gold = BoundingBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        assert_eq!(box_iou(&[0.5, 0.5, 0.5, 0.5], &gold), 1.0);
        assert_eq!(box_iou(&[0.5, 0.5, 0.0, 0.5], &gold), 0.0);
        let g = GroundingResult::from_instances(
            vec![GroundingInstance {
                sample_id: "a".into(),
                text: "t".into(),
                predicted: [0.5; 4],
                gold,
                iou: 1.0,
            }],
            0,
        );
        assert_eq!((g.mean_iou, g.accuracy), (1.0, 1.0));
    }

    #[test]
    fn curves_pick_the_right_records() {
        let log = "{\"step\":1,\"lr\":0.1,\"cl\":1.0,\"match\":0.5,\"mlm\":2.0,\"bbox\":0.0,\"total\":3.5}\n\
                   {\"step\":1,\"r1_t2v\":0.5,\"r1_v2t\":0.25,\"mean_iou\":0.1,\"acc50\":0.0}\n";
        let loss = loss_curve_tsv(log).unwrap();
        assert_eq!(loss.lines().count(), 2);
        assert!(loss.lines().nth(1).unwrap().starts_with("1\t0.1\t1.0"));
        assert_eq!(eval_curve_tsv(log).unwrap().lines().count(), 2);
    }
}
