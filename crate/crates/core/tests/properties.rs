use multigrain::dataset::{
    generate_shapes_world, validate_and_filter, Annotation, AnnotationKind, FilterConfig, Media, MixSpec,
    MultiGrainedSample, ShapesConfig,
};
use multigrain::evaluate::{rank_two_stage, Recall};
use multigrain::math::{Graph, ParamStore, Tensor};
use multigrain::objectives::{contrastive_from_logits, giou, iou, sample_hard_negatives, SimilarityMatrix};
use multigrain::text::{mask_tokens, tokenize, Vocab};
use multigrain::trainer::{lr_at, TrainConfig};
use multigrain::vision::{select_patches, BoundingBox, ImageTensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_box() -> impl Strategy<Value = BoundingBox> {
    (0.01f64..0.99, 0.01f64..0.99, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(cx, cy, w, h)| {
        let w = w.min(2.0 * cx.min(1.0 - cx)).max(1e-3);
        let h = h.min(2.0 * cy.min(1.0 - cy)).max(1e-3);
        BoundingBox::new(cx, cy, w, h).unwrap()
    })
}

fn softmax_of(values: &[f64]) -> Vec<f64> {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_f64(&[values.len()], values).unwrap());
    let y = g.softmax(x, 0).unwrap();
    g.value(y).data().to_vec()
}

fn contrastive_of(n: usize, logits: &[f64]) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::from_f64(&[n, n], logits).unwrap());
    let l = contrastive_from_logits(&mut g, x).unwrap();
    g.scalar(l)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let p = softmax_of(&values);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn softmax_is_shift_invariant(values in prop::collection::vec(-20f64..20.0, 1..20), c in -50f64..50.0) {
        let shifted: Vec<f64> = values.iter().map(|v| v + c).collect();
        for (a, b) in softmax_of(&values).iter().zip(softmax_of(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_is_shift_invariant(n in 1usize..6, seed in any::<u64>(), c in -30f64..30.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..n * n).map(|_| rand::Rng::random_range(&mut rng, -5.0..5.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|v| v + c).collect();
        prop_assert!((contrastive_of(n, &logits) - contrastive_of(n, &shifted)).abs() < 1e-9);
    }

    #[test]
    fn giou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (giou(&a, &b).unwrap(), giou(&b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!(ab > -1.0 && ab <= 1.0);
        prop_assert!(ab <= iou(&a, &b).unwrap() + 1e-15);
    }

    #[test]
    fn hard_negatives_avoid_the_positive(n in 2usize..12, seed in any::<u64>(), tau in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..n * n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let sim = SimilarityMatrix::new(n, values).unwrap();
        let neg = sample_hard_negatives(&sim, tau, &mut rng).unwrap();
        for i in 0..n {
            prop_assert!(neg.texts[i] != i && neg.concepts[i] != i);
            prop_assert!(neg.texts[i] < n && neg.concepts[i] < n);
        }
    }

    #[test]
    fn every_box_selects_a_patch(b in arb_box(), grid in 1usize..16) {
        let sel = select_patches(&b, grid);
        prop_assert!(!sel.is_empty());
        prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(sel.iter().all(|&p| p < grid * grid));
    }

    #[test]
    fn lr_schedule_is_bounded_and_peaks(warmup in 1u64..50, extra in 1u64..200, peak in 1e-5f64..1e-2) {
        let cfg = TrainConfig { warmup_steps: warmup, total_steps: warmup + extra, peak_lr: peak, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..=cfg.total_steps + 1).map(|s| lr_at(s, &cfg)).collect();
        let max = lrs.iter().copied().fold(0.0, f64::max);
        prop_assert!((max - peak).abs() < 1e-15);
        prop_assert!(lrs.iter().all(|&l| (0.0..=peak).contains(&l)));
        // successive differences never exceed one ramp increment
        let slope = peak / warmup.min(extra) as f64;
        prop_assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() <= slope + 1e-15));
    }

    #[test]
    fn recall_is_monotone(ranks in prop::collection::vec(0usize..40, 1..50)) {
        let r = Recall::from_ranks(&ranks);
        prop_assert!(r.r1 <= r.r5 && r.r5 <= r.r10);
    }

    #[test]
    fn stage_two_permutes_the_top_k(n in 1usize..12, k in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..n * n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let sim = SimilarityMatrix::new(n, values).unwrap();
        let scores: Vec<f64> = (0..2 * n * n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
        let r = rank_two_stage(&sim, k, |p| Ok(scores[..p.len()].to_vec())).unwrap();
        let k = r.k;
        let s1 = r.text_to_vision.iter().map(|q| q.stage1_gold_rank());
        for (q, r1) in r.text_to_vision.iter().chain(&r.vision_to_text).zip(s1.chain(std::iter::repeat(usize::MAX))) {
            let mut a = q.stage1[..k].to_vec();
            let mut b = q.stage2[..k].to_vec();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert_eq!(&q.stage1[k..], &q.stage2[k..]);
            if r1 != usize::MAX {
                prop_assert_eq!(r1 < k, q.gold_rank() < k);
            }
        }
    }

    #[test]
    fn masking_never_touches_reserved_tokens(seed in any::<u64>(), p in 0.0f64..=1.0) {
        let vocab = Vocab::new(&["red", "blue", "circle", "square"]);
        let seq = tokenize("red circle and blue square zebra", &vocab, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = mask_tokens(&seq, &vocab, p, &mut rng);
        for (i, &id) in seq.ids.iter().enumerate() {
            if Vocab::is_reserved(id) {
                prop_assert_eq!(m.ids[i], id);
                prop_assert!(m.labels[i].is_none());
            }
        }
    }

    #[test]
    fn filtering_is_idempotent(boxes in prop::collection::vec((arb_box(), 0usize..6, any::<bool>()), 0..8)) {
        let words = ["red circle top left", "red circle at top left", "blue square", "left of", "green", "red circle"];
        let annotations: Vec<Annotation> = boxes
            .into_iter()
            .map(|(bbox, t, region)| Annotation {
                bbox,
                text: words[t].to_string(),
                kind: if region { AnnotationKind::Region } else { AnnotationKind::Object },
            })
            .collect();
        let sample = MultiGrainedSample {
            id: "s".into(),
            media: Media::Image(ImageTensor::zeros(32, 32, 3)),
            caption: Some("x".into()),
            annotations,
            frame_boxes: Vec::new(),
        };
        let cfg = FilterConfig::new(8);
        let (once, _) = validate_and_filter(vec![sample], &cfg);
        let (twice, report) = validate_and_filter(once.clone(), &cfg);
        prop_assert_eq!(&once, &twice);
        prop_assert!(report.rejections.is_empty());
        for a in once.iter().flat_map(|s| &s.annotations) {
            prop_assert!(!select_patches(&a.bbox, 4).is_empty());
        }
    }
}

#[test]
fn generated_captions_use_only_vocab_words() {
    let data = generate_shapes_world(11, 64, &ShapesConfig::default()).unwrap();
    let unk = multigrain::text::UNK;
    for s in &data.samples {
        let texts = s.caption.iter().chain(s.annotations.iter().map(|a| &a.text));
        for t in texts {
            let seq = tokenize(t, &data.vocab, 16).unwrap();
            assert!(!seq.ids.contains(&unk), "{t}");
        }
    }
}

#[test]
fn mix_spec_round_trips() {
    let m: MixSpec = "caption:1,object:2.5,region".parse().unwrap();
    let again: MixSpec = m.to_string().parse().unwrap();
    assert_eq!(m, again);
    let w = m.normalized();
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
