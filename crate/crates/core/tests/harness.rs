use cdk_core::convdet::BBox;
use cdk_core::harness::{
    detect, flip_horizontal, format_labels, gen_dataset, image_from_bytes, image_to_bytes, load_dataset, parse_labels,
    sample_id, synthetic_scenes, train, Sample, TrainConfig, SYNTHETIC_CLASSES,
};
use cdk_core::loss::{GroundTruth, Object};
use cdk_core::network::{bundled, WeightStore};
use cdk_core::tensor::{lr_schedule, Tensor};
use cdk_core::Error;

fn names() -> Vec<String> {
    SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect()
}

#[test]
fn generated_boxes_lie_inside_images() {
    for (h, w) in [(128, 384), (40, 52)] {
        for s in synthetic_scenes(500, h, w, 99) {
            assert!(!s.gts.is_empty() && s.gts.len() <= 3);
            for o in &s.gts.objects {
                let [l, t, r, b] = o.bbox.ltrb();
                assert!(0.0 <= l && l < r && r <= w as f64, "{l} {r}");
                assert!(0.0 <= t && t < b && b <= h as f64, "{t} {b}");
                assert!(o.class < 3);
            }
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn image_and_label_round_trip() {
    let scene = &synthetic_scenes(1, 32, 48, 1)[0];
    let back = image_from_bytes(&image_to_bytes(&scene.image).unwrap()).unwrap();
    assert_eq!(back.shape(), &[1, 3, 32, 48]);
    for (a, b) in back.data().iter().zip(scene.image.data()) {
        assert_eq!(*a, f64::from(*b as f32));
    }
    let text = format_labels(&scene.gts, &names());
    assert_eq!(parse_labels(&text, &names()).unwrap(), scene.gts);

    assert!(parse_labels("purple 1 2 3 4\n", &names()).is_err());
    assert!(parse_labels("red 5 2 3 4\n", &names()).is_err());
    assert!(parse_labels("red 1 2 3\n", &names()).is_err());
    assert!(matches!(image_from_bytes(b"CDKI1"), Err(Error::Dataset(_))));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(dir.path(), 3, 24, 40, 8).unwrap();
    let loaded = load_dataset(dir.path(), &names()).unwrap();
    let scenes = synthetic_scenes(3, 24, 40, 8);
    assert_eq!(loaded.len(), 3);
    for (i, (s, want)) in loaded.iter().zip(&scenes).enumerate() {
        assert_eq!(s.id, sample_id(i));
        assert_eq!(s.gts, want.gts);
    }
    assert!(gen_dataset(dir.path(), 0, 24, 40, 8).is_err());
}

#[test]
fn flip_mirrors_pixels_and_boxes() {
    let image = Tensor::new(vec![1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let gts = GroundTruth::new(vec![Object {
        bbox: BBox::from_ltrb(0.0, 0.0, 1.0, 2.0),
        class: 0,
    }]);
    let (img, g) = flip_horizontal(&image, &gts).unwrap();
    assert_eq!(img.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    let [l, t, r, b] = g.objects[0].bbox.ltrb();
    assert_eq!([l, t, r, b], [2.0, 0.0, 3.0, 2.0]);
    let (twice, g2) = flip_horizontal(&img, &g).unwrap();
    assert_eq!(twice, image);
    assert_eq!(g2, gts);
}

#[test]
fn learning_rate_log_follows_schedule() {
    assert_eq!(lr_schedule(0, 0.01, 0.5, 10_000), 0.01);
    assert_eq!(lr_schedule(10_000, 0.01, 0.5, 10_000), 0.005);
    let data = tiny_data();
    let config = TrainConfig {
        max_steps: 4,
        batch_size: 2,
        decay_step: 2,
        ..Default::default()
    };
    let out = train(&bundled::toy(), &data, &config, None, |_| {}).unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|r| r.lr).collect();
    assert_eq!(lrs, [0.01, 0.01, 0.005, 0.005]);
}

fn tiny_data() -> Vec<Sample> {
    synthetic_scenes(3, 128, 384, 4)
        .into_iter()
        .enumerate()
        .map(|(i, s)| Sample {
            id: sample_id(i),
            image: s.image,
            gts: s.gts,
        })
        .collect()
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let data = tiny_data();
    let model = bundled::toy();
    for flip in [false, true] {
        let config = TrainConfig {
            seed: 21,
            max_steps: 3,
            batch_size: 2,
            flip,
            ..Default::default()
        };
        let a = train(&model, &data, &config, None, |_| {}).unwrap();
        let b = train(&model, &data, &config, None, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.weights.to_bytes(), b.weights.to_bytes());
        assert!(a.log[0].loss.total.is_finite());
    }
}

#[test]
fn train_rejects_bad_inputs() {
    let model = bundled::toy();
    let config = TrainConfig {
        max_steps: 1,
        ..Default::default()
    };
    assert!(train(&model, &[], &config, None, |_| {}).is_err());
    let mut data = tiny_data();
    data[1].image = Tensor::zeros(&[1, 3, 64, 64]);
    assert!(train(&model, &data, &config, None, |_| {}).is_err());
    let data = tiny_data();
    let zero_steps = TrainConfig {
        max_steps: 0,
        ..Default::default()
    };
    assert!(train(&model, &data, &zero_steps, None, |_| {}).is_err());
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let data = tiny_data();
    let config = TrainConfig {
        lr0: 1e12,
        max_steps: 50,
        batch_size: 3,
        max_grad_norm: None,
        ..Default::default()
    };
    match train(&bundled::toy(), &data, &config, None, |_| {}) {
        Err(Error::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn zero_weights_detect_scores_one_sixth() {
    let model = bundled::toy();
    let image = &tiny_data()[0].image;
    let dets = detect(&model, &WeightStore::zeros(&model), image, 64, 1.0).unwrap();
    assert_eq!(dets.len(), 64);
    assert!(dets.iter().all(|d| (d.score - 1.0 / 6.0).abs() < 1e-12));
    assert!(detect(&model, &WeightStore::zeros(&model), image, 0, 0.4).unwrap().is_empty());
    assert!(detect(&model, &WeightStore::zeros(&model), image, 64, 0.0).is_err());
}
