use cdk_core::convdet::{iou, BBox, Prediction};
use cdk_core::loss::{GroundTruth, Object};
use cdk_core::postprocess::{average_precision, nms, recall_sweep, top_n, Detection};
use cdk_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pred(anchor: usize, score: f64, class: usize, b: BBox) -> Prediction {
    Prediction {
        box_: b,
        confidence: score,
        class_probs: vec![1.0 / 3.0; 3],
        class,
        score,
        anchor,
    }
}

fn det(image: usize, class: usize, score: f64, b: BBox) -> Detection {
    Detection {
        image,
        class,
        score,
        bbox: b,
    }
}

fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let l = rng.random_range(0.0..extent);
    let t = rng.random_range(0.0..extent);
    BBox::from_ltrb(l, t, l + rng.random_range(1.0..extent / 4.0), t + rng.random_range(1.0..extent / 4.0))
}

/// Repeatedly keep the best remaining box and drop its same-class overlaps.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
    let mut remaining: Vec<Detection> = dets.to_vec();
    let mut out = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            if remaining[i].score > remaining[best].score {
                best = i;
            }
        }
        let keep = remaining.remove(best);
        remaining.retain(|d| d.class != keep.class || iou(&d.bbox, &keep.bbox) <= thr);
        out.push(keep);
    }
    out
}

#[test]
fn top_n_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let preds: Vec<Prediction> = (0..100)
        .map(|a| pred(a, rng.random_range(0.0..1.0), 0, BBox::new(5.0, 5.0, 2.0, 2.0)))
        .collect();
    assert!(top_n(&preds, 0).is_empty());
    let all = top_n(&preds, 500);
    assert_eq!(all.len(), 100);
    assert!(all.windows(2).all(|w| w[0].score >= w[1].score));

    let mut sorted = preds.clone();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    assert_eq!(top_n(&preds, 64), sorted[..64].to_vec());
}

#[test]
fn top_n_ties_prefer_lower_anchor() {
    let b = BBox::new(5.0, 5.0, 2.0, 2.0);
    let preds = vec![pred(7, 0.5, 0, b), pred(2, 0.5, 0, b), pred(4, 0.9, 0, b)];
    let anchors: Vec<usize> = top_n(&preds, 3).iter().map(|p| p.anchor).collect();
    assert_eq!(anchors, [4, 2, 7]);
}

#[test]
fn nms_hand_traced() {
    let b1 = BBox::from_ltrb(0.0, 0.0, 10.0, 10.0);
    let b2 = BBox::from_ltrb(0.0, 0.0, 10.0, 8.0);
    let b3 = BBox::from_ltrb(50.0, 50.0, 60.0, 60.0);
    assert!((iou(&b1, &b2) - 0.8).abs() < 1e-12);
    let dets = vec![det(0, 0, 0.9, b1), det(0, 0, 0.8, b2), det(0, 0, 0.7, b3)];
    assert_eq!(nms(&dets, 0.5), vec![dets[0].clone(), dets[2].clone()]);
    assert_eq!(nms(&dets[..1], 0.5), dets[..1].to_vec());
    // Different classes never suppress each other.
    let mixed = vec![det(0, 0, 0.9, b1), det(0, 1, 0.8, b2)];
    assert_eq!(nms(&mixed, 0.5).len(), 2);
}

#[test]
fn nms_matches_quadratic_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let dets: Vec<Detection> = (0..1000)
            .map(|_| det(0, rng.random_range(0..3), rng.random_range(0.0..1.0), random_box(&mut rng, 400.0)))
            .collect();
        let thr = rng.random_range(0.1..0.9);
        let got = nms(&dets, thr);
        assert_eq!(got, nms_oracle(&dets, thr));
        for (i, a) in got.iter().enumerate() {
            for b in &got[i + 1..] {
                assert!(a.class != b.class || iou(&a.bbox, &b.bbox) <= thr);
            }
        }
    }
}

fn gt(objs: &[(usize, [f64; 4])]) -> GroundTruth {
    GroundTruth::new(
        objs.iter()
            .map(|&(class, [l, t, r, b])| Object {
                bbox: BBox::from_ltrb(l, t, r, b),
                class,
            })
            .collect(),
    )
}

#[test]
fn recall_hand_counted() {
    let g = gt(&[(0, [0.0, 0.0, 10.0, 10.0]), (1, [20.0, 0.0, 30.0, 10.0]), (0, [40.0, 40.0, 50.0, 50.0])]);
    let preds = vec![
        pred(0, 0.9, 0, BBox::from_ltrb(0.0, 0.0, 10.0, 9.0)),   // hits gt0
        pred(1, 0.8, 0, BBox::from_ltrb(20.0, 0.0, 30.0, 10.0)), // wrong class for gt1
        pred(2, 0.7, 0, BBox::from_ltrb(0.0, 0.0, 10.0, 10.0)),  // gt0 already taken
        pred(3, 0.6, 1, BBox::from_ltrb(21.0, 0.0, 30.0, 10.0)), // hits gt1
        pred(4, 0.5, 0, BBox::from_ltrb(80.0, 80.0, 90.0, 90.0)),
    ];
    let curve = recall_sweep(&[preds], &[g], &[0, 1, 3, 4, 5], 0.5).unwrap();
    let r: Vec<f64> = curve.points.iter().map(|p| p.recall).collect();
    assert_eq!(r, [0.0, 1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]);
    assert_eq!(curve.to_csv().lines().next(), Some("n,recall"));
}

#[test]
fn recall_perfect_predictor_and_errors() {
    let g = gt(&[(0, [0.0, 0.0, 10.0, 10.0]), (2, [20.0, 20.0, 30.0, 35.0])]);
    let mut preds: Vec<Prediction> = (0..50)
        .map(|a| pred(a, 0.1, 1, BBox::from_ltrb(60.0, 60.0, 70.0, 70.0)))
        .collect();
    for (a, o) in g.objects.iter().enumerate() {
        preds[a * 7] = pred(a * 7, 0.05, o.class, o.bbox);
    }
    let curve = recall_sweep(&[preds.clone()], &[g.clone()], &[50], 0.5).unwrap();
    assert_eq!(curve.points[0].recall, 1.0);
    assert!(matches!(
        recall_sweep(&[preds.clone()], &[GroundTruth::default()], &[4], 0.5),
        Err(Error::NoGroundTruth)
    ));
    assert!(recall_sweep(&[preds], &[g], &[4, 2], 0.5).is_err());
}

#[test]
fn ap_examples() {
    let g = vec![gt(&[(0, [0.0, 0.0, 10.0, 10.0]), (0, [20.0, 0.0, 30.0, 10.0]), (0, [40.0, 0.0, 50.0, 10.0])])];
    let perfect: Vec<Detection> = g[0].objects.iter().map(|o| det(0, 0, 0.9, o.bbox)).collect();
    let r = average_precision(&perfect, &g, 3, 0.5).unwrap();
    assert_eq!(r.per_class, vec![Some(1.0), None, None]);
    assert_eq!(r.map, 1.0);

    let wrong: Vec<Detection> = (0..3).map(|i| det(0, 0, 0.5, BBox::new(100.0 + 20.0 * i as f64, 80.0, 5.0, 5.0))).collect();
    assert_eq!(average_precision(&wrong, &g, 3, 0.5).unwrap().map, 0.0);

    // Ranked TP, FP, TP, FP, TP over 3 positives:
    // precision at each hit 1/1, 2/3, 3/5, each hit adds 1/3 recall.
    let miss = BBox::new(200.0, 200.0, 5.0, 5.0);
    let five = vec![
        det(0, 0, 0.9, g[0].objects[0].bbox),
        det(0, 0, 0.8, miss),
        det(0, 0, 0.7, g[0].objects[1].bbox),
        det(0, 0, 0.6, miss),
        det(0, 0, 0.5, g[0].objects[2].bbox),
    ];
    let want = (1.0 + 2.0 / 3.0 + 3.0 / 5.0) / 3.0;
    assert!((average_precision(&five, &g, 1, 0.5).unwrap().map - want).abs() < 1e-12);
    assert!(matches!(
        average_precision(&five, &[GroundTruth::default()], 1, 0.5),
        Err(Error::NoGroundTruth)
    ));
}

fn arb_instance() -> impl Strategy<Value = (Vec<Prediction>, GroundTruth)> {
    let b = (0.0..80.0f64, 0.0..80.0f64, 2.0..30.0f64, 2.0..30.0f64);
    (
        prop::collection::vec((b.clone(), 0..2usize, 0.0..1.0f64), 0..40),
        prop::collection::vec((b, 0..2usize), 1..8),
    )
        .prop_map(|(p, g)| {
            let preds = p
                .into_iter()
                .enumerate()
                .map(|(a, ((l, t, w, h), c, s))| pred(a, s, c, BBox::from_ltrb(l, t, l + w, t + h)))
                .collect();
            let gts = GroundTruth::new(
                g.into_iter()
                    .map(|((l, t, w, h), class)| Object {
                        bbox: BBox::from_ltrb(l, t, l + w, t + h),
                        class,
                    })
                    .collect(),
            );
            (preds, gts)
        })
}

proptest! {
    #[test]
    fn recall_is_monotone_in_n((preds, g) in arb_instance()) {
        let ns: Vec<usize> = (0..=45).collect();
        let curve = recall_sweep(&[preds], &[g], &ns, 0.5).unwrap();
        prop_assert!(curve.is_monotone());
        prop_assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.recall)));
    }

    #[test]
    fn lower_iou_threshold_never_lowers_recall((preds, g) in arb_instance(), t in 0.05..0.9f64, dt in 0.0..0.5f64) {
        let n = preds.len();
        let hi = recall_sweep(&[preds.clone()], &[g.clone()], &[n], t).unwrap().points[0].recall;
        let lo = recall_sweep(&[preds], &[g], &[n], (t - dt).max(0.01)).unwrap().points[0].recall;
        prop_assert!(lo >= hi, "lo {} < hi {}", lo, hi);
    }

    #[test]
    fn top_n_prefix((preds, _) in arb_instance(), a in 0..50usize, b in 0..50usize) {
        let (n1, n2) = (a.min(b), a.max(b));
        let short = top_n(&preds, n1);
        let long = top_n(&preds, n2);
        prop_assert_eq!(&long[..short.len()], &short[..]);
    }

    #[test]
    fn nms_survivors_form_an_antichain((preds, _) in arb_instance(), thr in 0.05..1.0f64) {
        let kept = nms(&preds, thr);
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class != b.class || iou(&a.box_, &b.box_) <= thr);
            }
        }
    }
}
