//! Acceptance run: one PASS/FAIL line per criterion.

use std::process::ExitCode;
use std::time::Instant;

use multigrain::dataset::{generate_shapes_world, Dataset, Lexicon, MultiGrainedSample, ShapesConfig, View};
use multigrain::evaluate::{eval_grounding, eval_mlm_words, eval_retrieval, EvalConfig};
use multigrain::math::{GradCheckOptions, Graph, Tensor};
use multigrain::model::{ConceptSeqs, ConceptSpec};
use multigrain::objectives::{giou, iou, total_loss, ObjectiveConfig};
use multigrain::text::{mask_tokens, Corruption, TokenSequence, CLS, PAD};
use multigrain::trainer::{
    check_loss_gradients, step_rng, swap_text_module, train, Checkpoint, TextModule, TrainConfig, TrainOptions,
    TrainOutcome,
};
use multigrain::vision::{select_concept, select_patches, BoundingBox, VideoClip};
use multigrain::{Model, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn report(id: &str, title: &str, started: Instant, r: Result<Outcome>) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match r {
        Ok(o) => {
            println!("{id} {} {title}: {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            o.pass
        }
        Err(e) => {
            println!("{id} FAIL {title}: error {e} [{secs:.1}s]");
            false
        }
    }
}

fn refs(data: &Dataset) -> Vec<&MultiGrainedSample> {
    data.samples.iter().map(|s| s.as_ref()).collect()
}

fn a1() -> Result<Outcome> {
    let started = Instant::now();
    let opts = GradCheckOptions {
        max_coords: Some(500),
        ..GradCheckOptions::default()
    };
    let r = check_loss_gradients(0, &opts)?;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        r.coords_checked >= 500 && r.max_rel_error < 1e-4 && secs < 60.0,
        format!("{} coords, max rel error {:.2e} (< 1e-4), {secs:.1}s (< 60s)", r.coords_checked, r.max_rel_error),
    )
}

/// Training setup shared by A2, A7 and A8.
fn a2_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.init_std = 0.1;
    cfg.peak_lr = 2e-3;
    cfg
}

struct Scores {
    r1: f64,
    mean_iou: f64,
    acc50: f64,
    mlm: f64,
}

fn score(model: &Model<f32>, data: &Dataset) -> Result<Scores> {
    let samples = refs(data);
    let ec = EvalConfig::default();
    let r = eval_retrieval(model, &samples, &data.vocab, &ec)?;
    let gr = eval_grounding(model, &samples, &data.vocab, &ec)?;
    let lex = Lexicon::English;
    let words: Vec<&str> = lex.color_words().into_iter().chain(lex.shape_words()).collect();
    let mlm = eval_mlm_words(model, &samples, &data.vocab, &words, &ec)?;
    Ok(Scores {
        r1: r.t2v.r1,
        mean_iou: gr.mean_iou,
        acc50: gr.accuracy,
        mlm: mlm.accuracy,
    })
}

fn a2(data: &Dataset) -> Result<(Outcome, TrainOutcome, Scores)> {
    let started = Instant::now();
    let run = train(&a2_config(), data, None, TrainOptions::default())?;
    let secs = started.elapsed().as_secs_f64();
    let s = score(&run.model, data)?;
    let pass = s.r1 >= 0.90 && s.mean_iou >= 0.60 && s.acc50 >= 0.70 && s.mlm >= 0.80 && secs <= 1200.0;
    let detail = format!(
        "R@1 t2v {:.3} (>= 0.90), mean IoU {:.3} (>= 0.60), acc@0.5 {:.3} (>= 0.70), MLM {:.3} (>= 0.80), train {secs:.0}s (<= 1200s)",
        s.r1, s.mean_iou, s.acc50, s.mlm
    );
    Ok((Outcome { pass, detail }, run, s))
}

fn a3(data: &Dataset) -> Result<Outcome> {
    let mut cfg = TrainConfig::default();
    cfg.model.vocab_size = data.vocab.len();
    let model: Model<f32> = Model::new(cfg.model.clone(), 0)?;
    let batch: Vec<MultiGrainedSample> = data.samples.iter().take(32).filter_map(|s| View::Caption.apply(s)).collect();
    let batch_refs: Vec<&MultiGrainedSample> = batch.iter().collect();
    let mut g = Graph::new(&model.params);
    let mut rng = step_rng(0, 0);
    let b = total_loss(&model, &mut g, &data.vocab, &batch_refs, &ObjectiveConfig::default(), &mut rng)?.breakdown;
    let ln_n = (batch.len() as f64).ln();
    let ln_v = (data.vocab.len() as f64).ln();
    let cl_ok = batch.len() == 32 && (0.85 * ln_n..=1.15 * ln_n).contains(&b.cl);
    let m_ok = (b.matching - 0.69).abs() <= 0.05;
    let mlm_ok = (0.9 * ln_v..=1.1 * ln_v).contains(&b.mlm);
    outcome(
        cl_ok && m_ok && mlm_ok,
        format!(
            "contrastive {:.3} in [{:.3}, {:.3}], matching {:.3} in 0.69 +- 0.05, MLM {:.3} in [{:.3}, {:.3}]",
            b.cl,
            0.85 * ln_n,
            1.15 * ln_n,
            b.matching,
            b.mlm,
            0.9 * ln_v,
            1.1 * ln_v
        ),
    )
}

fn monte_carlo_giou(a: &BoundingBox, b: &BoundingBox, points: usize, rng: &mut ChaCha8Rng) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let (cx1, cy1, cx2, cy2) = (ax1.min(bx1), ay1.min(by1), ax2.max(bx2), ay2.max(by2));
    let (mut inter, mut union) = (0usize, 0usize);
    for _ in 0..points {
        let x = rng.random_range(cx1..cx2);
        let y = rng.random_range(cy1..cy2);
        let in_a = (ax1..ax2).contains(&x) && (ay1..ay2).contains(&y);
        let in_b = (bx1..bx2).contains(&x) && (by1..by2).contains(&y);
        inter += usize::from(in_a && in_b);
        union += usize::from(in_a || in_b);
    }
    let (i, u) = (inter as f64 / points as f64, union as f64 / points as f64);
    i / u - (1.0 - u)
}

fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    let (x1, x2): (f64, f64) = (rng.random_range(0.0..0.95), rng.random_range(0.0..0.95));
    let (y1, y2): (f64, f64) = (rng.random_range(0.0..0.95), rng.random_range(0.0..0.95));
    let w = (x2 - x1).abs().max(0.01);
    let h = (y2 - y1).abs().max(0.01);
    BoundingBox::from_corners(x1.min(x2), y1.min(y2), x1.min(x2) + w, y1.min(y2) + h)
}

fn a4() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mc_rng = ChaCha8Rng::seed_from_u64(40);
    let (mut symmetric, mut in_range, mut below_iou) = (true, true, true);
    let mut worst_mc: f64 = 0.0;
    for _ in 0..10_000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (ab, ba) = (giou(&a, &b)?, giou(&b, &a)?);
        symmetric &= ab == ba;
        in_range &= ab > -1.0 && ab <= 1.0;
        below_iou &= ab <= iou(&a, &b)?;
        worst_mc = worst_mc.max((ab - monte_carlo_giou(&a, &b, 100_000, &mut mc_rng)).abs());
    }
    let tl = BoundingBox::from_corners(0.0, 0.0, 0.5, 0.5);
    let br = BoundingBox::from_corners(0.5, 0.5, 1.0, 1.0);
    let hand = giou(&tl, &br)?;
    outcome(
        symmetric && in_range && below_iou && worst_mc < 1e-2 && hand == -0.5,
        format!(
            "10^4 pairs: symmetric {symmetric}, in (-1, 1] {in_range}, <= IoU {below_iou}, max |GIoU - MC| {worst_mc:.2e} (< 1e-2), quadrant pair {hand}"
        ),
    )
}

fn a5() -> Result<Outcome> {
    let vocab = Lexicon::English.vocab();
    let words: Vec<u32> = vocab.word_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut eligible, mut selected) = (0usize, 0usize);
    let mut kinds = [0usize; 3];
    let mut reserved_touched = false;
    while eligible < 100_000 {
        let mut ids = vec![CLS];
        ids.extend((0..14).map(|_| words[rng.random_range(0..words.len())]));
        ids.push(PAD);
        let mask: Vec<bool> = (0..ids.len()).map(|i| i < 15).collect();
        let seq = TokenSequence { ids, mask };
        let m = mask_tokens(&seq, &vocab, 0.4, &mut rng);
        eligible += 14;
        selected += m.positions.len();
        for c in &m.corruptions {
            kinds[match c {
                Corruption::Mask => 0,
                Corruption::Random => 1,
                Corruption::Unchanged => 2,
            }] += 1;
        }
        reserved_touched |= m.ids[0] != CLS || m.ids[15] != PAD || m.labels[0].is_some() || m.labels[15].is_some();
    }
    let rate = selected as f64 / eligible as f64;
    let split: Vec<f64> = kinds.iter().map(|&k| k as f64 / selected as f64).collect();
    let pass = (rate - 0.4).abs() <= 0.01
        && (split[0] - 0.8).abs() <= 0.01
        && (split[1] - 0.1).abs() <= 0.01
        && (split[2] - 0.1).abs() <= 0.01
        && !reserved_touched;
    outcome(
        pass,
        format!(
            "{eligible} tokens: rate {rate:.4}, split {:.4}/{:.4}/{:.4}, reserved corrupted {reserved_touched}",
            split[0], split[1], split[2]
        ),
    )
}

fn a6(data: &Dataset) -> Result<Outcome> {
    let mut cfg = TrainConfig::default();
    cfg.model.vocab_size = data.vocab.len();
    let grid = cfg.model.grid();
    let p = grid * grid;
    let whole = select_patches(&BoundingBox::WHOLE_IMAGE, grid) == (0..p).collect::<Vec<_>>();

    let mut seen = vec![0usize; p];
    for (x, y) in [(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)] {
        for i in select_patches(&BoundingBox::from_corners(x, y, x + 0.5, y + 0.5), grid) {
            seen[i] += 1;
        }
    }
    let partition = seen.iter().all(|&c| c == 1);

    let mut model: Model<f32> = Model::new(cfg.model.clone(), 6)?;
    let image = data.samples[0].media.as_image().expect("image sample");
    let features = model.vision.encode_image(&model.params, image)?;
    let bbox = BoundingBox::from_corners(0.25, 0.0, 1.0, 0.75);
    let concept = select_concept(&features, &bbox);
    let ids = select_patches(&bbox, grid);
    let mut cls_err: f64 = 0.0;
    {
        let mut g = Graph::new(&model.params);
        let rows = g.constant(features.features.clone());
        let built = ConceptSeqs::build(&mut g, rows, p, &[ConceptSpec { media: 0, patches: ids.clone() }])?;
        let pooled = g.value(built.cls).data().to_vec();
        for c in 0..features.features.last_dim() {
            let mean = ids.iter().map(|&i| features.features.row(i)[c] as f64).sum::<f64>() / ids.len() as f64;
            cls_err = cls_err.max((mean - concept.cls[c] as f64).abs()).max((mean - pooled[c] as f64).abs());
        }
    }

    let temporal = model.vision.temporal_embed;
    let shape = model.params.get(temporal).value.shape().to_vec();
    model.params.get_mut(temporal).value = Tensor::zeros(&shape);
    let frames: Vec<_> = data.samples[..3].iter().map(|s| s.media.as_image().unwrap().clone()).collect();
    let clip = |order: &[usize]| {
        VideoClip::new(order.iter().map(|&i| frames[i].clone()).collect(), (0..order.len()).map(|t| t as f64).collect())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let forward = model.vision.encode_video(&model.params, &clip(&[0, 1, 2])?, 3, &mut rng)?;
    let permuted = model.vision.encode_video(&model.params, &clip(&[2, 0, 1])?, 3, &mut rng)?;
    let invariant = forward.features.data() == permuted.features.data();
    let single = model.vision.encode_video(&model.params, &clip(&[0])?, 3, &mut rng)?;
    let as_image = model.vision.encode_image(&model.params, &frames[0])?;
    let single_ok = single.features.data() == as_image.features.data();

    outcome(
        whole && partition && cls_err < 1e-6 && invariant && single_ok,
        format!(
            "whole image {whole}, quadrants partition {partition}, [CLS] error {cls_err:.1e} (< 1e-6), frame permutation invariant {invariant}, F=1 equals image {single_ok}"
        ),
    )
}

fn a7(base: &Checkpoint, english: &Dataset) -> Result<Outcome> {
    let started = Instant::now();
    let synth_cfg = ShapesConfig {
        lexicon: Lexicon::Synthetic,
        ..ShapesConfig::default()
    };
    let synth = generate_shapes_world(7, 256, &synth_cfg)?;
    let fresh = TextModule::fresh(&base.config, synth.vocab.clone(), 7)?;
    let swapped = swap_text_module(base, &fresh)?;

    let before = base.to_model()?;
    let after = swapped.to_model()?;
    let image = english.samples[0].media.as_image().expect("image sample");
    let va = before.vision.encode_image(&before.params, image)?;
    let vb = after.vision.encode_image(&after.params, image)?;
    let vision_same = va.features.data() == vb.features.data();
    let kept = |n: &str| n.starts_with("vision.") || n.starts_with("fusion.");
    let tensors_same = base
        .tensors
        .iter()
        .filter(|(n, _)| kept(n))
        .all(|(n, t)| swapped.tensor(n).is_some_and(|u| u.data() == t.data() && u.shape() == t.shape()));

    let mut cfg = a2_config();
    cfg.total_steps = 300;
    cfg.warmup_steps = 30;
    let tuned = train(
        &cfg,
        &synth,
        None,
        TrainOptions {
            init: Some(swapped),
            ..TrainOptions::default()
        },
    )?;
    let scratch = train(&cfg, &synth, None, TrainOptions::default())?;
    let ec = EvalConfig::default();
    let samples = refs(&synth);
    let r_tuned = eval_retrieval(&tuned.model, &samples, &synth.vocab, &ec)?.t2v.r1;
    let r_scratch = eval_retrieval(&scratch.model, &samples, &synth.vocab, &ec)?.t2v.r1;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        vision_same && tensors_same && r_tuned >= r_scratch + 0.10 && secs <= 600.0,
        format!(
            "vision outputs identical {vision_same}, vision/fusion tensors identical {tensors_same}, R@1 swapped {r_tuned:.3} vs scratch {r_scratch:.3} (margin >= 0.10), {secs:.0}s (<= 600s)"
        ),
    )
}

fn a8(data: &Dataset, full: &Scores) -> Result<Outcome> {
    let mut no_bbox = a2_config();
    no_bbox.objective.use_bbox = false;
    let run = train(&no_bbox, data, None, TrainOptions::default())?;
    let ec = EvalConfig::default();
    let samples = refs(data);
    let iou_no_bbox = eval_grounding(&run.model, &samples, &data.vocab, &ec)?.mean_iou;

    let mut no_align = a2_config();
    no_align.objective.concept_align = false;
    let run = train(&no_align, data, None, TrainOptions::default())?;
    let r1_no_align = eval_retrieval(&run.model, &samples, &data.vocab, &ec)?.t2v.r1;
    outcome(
        iou_no_bbox <= full.mean_iou - 0.20 && r1_no_align < full.r1,
        format!(
            "w/o bbox mean IoU {iou_no_bbox:.3} vs full {:.3} (drop >= 0.20), w/o concept align R@1 {r1_no_align:.3} vs full {:.3} (strictly lower)",
            full.mean_iou, full.r1
        ),
    )
}

fn a9() -> Result<Outcome> {
    let data = generate_shapes_world(9, 32, &ShapesConfig::default())?;
    let cfg = TrainConfig {
        batch_size: 8,
        total_steps: 12,
        warmup_steps: 3,
        ..TrainConfig::default()
    };
    let bytes = |o: &TrainOutcome| o.checkpoint.to_bytes();
    let a = train(&cfg, &data, None, TrainOptions::default())?;
    let b = train(&cfg, &data, None, TrainOptions::default())?;
    let repeat = bytes(&a)? == bytes(&b)?;

    let half = train(
        &cfg,
        &data,
        None,
        TrainOptions {
            stop_after: Some(5),
            ..TrainOptions::default()
        },
    )?;
    let resumed = train(
        &cfg,
        &data,
        None,
        TrainOptions {
            resume: Some(half.checkpoint.clone()),
            ..TrainOptions::default()
        },
    )?;
    let resume_ok = bytes(&resumed)? == bytes(&a)?;
    let losses_ok = a.history[5..]
        .iter()
        .zip(&resumed.history)
        .all(|(x, y)| x.total.to_bits() == y.total.to_bits());
    outcome(
        repeat && resume_ok && losses_ok,
        format!("repeat run identical {repeat}, resume at step 5 identical {resume_ok}, resumed losses identical {losses_ok}"),
    )
}

fn main() -> ExitCode {
    let data = match generate_shapes_world(0, 256, &ShapesConfig::default()) {
        Ok(d) => d,
        Err(e) => {
            println!("setup FAIL: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut all = true;

    let t = Instant::now();
    all &= report("A1", "gradient fidelity", t, a1());

    let t = Instant::now();
    let (a2_result, trained) = match a2(&data) {
        Ok((o, run, s)) => (Ok(o), Some((run, s))),
        Err(e) => (Err(e), None),
    };
    all &= report("A2", "overfit and align", t, a2_result);

    let t = Instant::now();
    all &= report("A3", "loss calibration at init", t, a3(&data));
    let t = Instant::now();
    all &= report("A4", "GIoU oracle", t, a4());
    let t = Instant::now();
    all &= report("A5", "masking statistics", t, a5());
    let t = Instant::now();
    all &= report("A6", "concept selection invariants", t, a6(&data));

    let t = Instant::now();
    match &trained {
        Some((run, scores)) => {
            all &= report("A7", "modular text swap", t, a7(&run.checkpoint, &data));
            let t = Instant::now();
            all &= report("A8", "ablation direction", t, a8(&data, scores));
        }
        None => {
            println!("A7 FAIL modular text swap: needs the A2 model");
            println!("A8 FAIL ablation direction: needs the A2 model");
            all = false;
        }
    }

    let t = Instant::now();
    all &= report("A9", "determinism", t, a9());

    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
