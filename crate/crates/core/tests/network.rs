use cdk_core::network::{
    build_fire, bundled, forward, init_weights, load_weights, parse_spec, save_weights, serialize_spec, FireParams,
    FireSpec, ModelSpec, WeightStore,
};
use cdk_core::tensor::{Tape, Tensor};
use cdk_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec_with_layers(layers: &str) -> String {
    format!(
        r#"{{
  "input": {{"c": 3, "h": 32, "w": 32}},
  "layers": [{layers}],
  "detector": {{"k": 1, "classes": ["a"], "anchors": [[8.0, 8.0]]}}
}}"#
    )
}

fn spec_err(layers: &str) -> String {
    parse_spec(&spec_with_layers(layers)).unwrap_err().to_string()
}

#[test]
fn bundled_squeezedet_layer_list() {
    let m = bundled::squeezedet();
    let names: Vec<&str> = m.layers.iter().map(|l| l.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "conv1", "pool1", "fire2", "fire3", "pool3", "fire4", "fire5", "pool5", "fire6", "fire7", "fire8",
            "fire9", "fire10", "fire11", "convdet"
        ]
    );
    assert!(m.has_head());
    assert_eq!((m.detector.k(), m.detector.c()), (9, 3));
    assert_eq!(m.layer_channels(m.layers.len() - 1), (768, 72));
}

#[test]
fn bundled_specs_round_trip_byte_for_byte() {
    for text in [bundled::SQUEEZEDET, bundled::SQUEEZEDET_PLUS, bundled::TOY] {
        let spec = parse_spec(text).unwrap();
        assert_eq!(serialize_spec(&spec), text);
        assert_eq!(parse_spec(&serialize_spec(&spec)).unwrap(), spec);
    }
}

#[test]
fn malformed_specs_are_rejected() {
    assert!(spec_err("").contains("empty model"));
    assert!(spec_err(r#"{"name": "x", "kind": "lstm"}"#).contains("unknown layer kind"));
    assert!(spec_err(
        r#"{"name": "c", "kind": "conv", "filters": 4, "kernel": 3},
           {"name": "c", "kind": "conv", "filters": 4, "kernel": 3}"#
    )
    .contains("duplicate"));
    assert!(spec_err(
        r#"{"name": "c", "kind": "conv", "filters": 4, "kernel": 3},
           {"name": "f", "kind": "fire", "in_channels": 8, "s1x1": 2, "e1x1": 4, "e3x3": 4}"#
    )
    .contains("channel-chain mismatch"));
    assert!(spec_err(
        r#"{"name": "d", "kind": "convdet", "kernel": 3},
           {"name": "c", "kind": "conv", "filters": 4, "kernel": 3}"#
    )
    .contains("not last"));
    assert!(spec_err(r#"{"name": "f", "kind": "fire", "s1x1": 2, "e1x1": 4}"#).contains("e3x3"));
    assert!(spec_err(r#"{"name": "p", "kind": "maxpool", "kernel": 2, "filters": 3}"#).contains("filters"));
}

#[test]
fn fire_input_channels_resolve_from_predecessor() {
    let m = parse_spec(&spec_with_layers(
        r#"{"name": "c", "kind": "conv", "filters": 64, "kernel": 3, "padding": 1},
           {"name": "fire2", "kind": "fire", "s1x1": 16, "e1x1": 64, "e3x3": 64}"#,
    ))
    .unwrap();
    assert_eq!(m.layer_channels(1), (64, 128));
    assert!(!m.has_head());
    assert_eq!(m.feature_channels(), 128);
}

#[test]
fn kernel_accepts_int_or_pair() {
    let m = parse_spec(&spec_with_layers(r#"{"name": "c", "kind": "conv", "filters": 2, "kernel": [1, 3]}"#)).unwrap();
    let plan = m.plan(32, 32).unwrap();
    assert_eq!(plan[0].output, [2, 32, 30]);
    assert!(serialize_spec(&m).contains("\"kernel\": [\n"));
}

fn fire_params(tape: &mut Tape, c_in: usize, f: &FireSpec, value: f64) -> FireParams {
    let mut t = |shape: &[usize]| tape.leaf(Tensor::full(shape, value));
    FireParams {
        squeeze_w: t(&[f.s_1x1, c_in, 1, 1]),
        squeeze_b: t(&[f.s_1x1]),
        expand1x1_w: t(&[f.e_1x1, f.s_1x1, 1, 1]),
        expand1x1_b: t(&[f.e_1x1]),
        expand3x3_w: t(&[f.e_3x3, f.s_1x1, 3, 3]),
        expand3x3_b: t(&[f.e_3x3]),
    }
}

#[test]
fn fire_shapes_zero_output_and_param_count() {
    let f = FireSpec {
        s_1x1: 16,
        e_1x1: 64,
        e_3x3: 64,
    };
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 64, 8, 8], 0.3));
    let p = fire_params(&mut tape, 64, &f, 0.0);
    let y = build_fire(&mut tape, x, &f, &p).unwrap();
    assert_eq!(tape.shape(y), [1, 128, 8, 8]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let by_extent = 64 * 16 + 16 * 64 + 9 * 16 * 64 + (16 + 64 + 64);
    assert_eq!(by_extent, 11_408);
    assert_eq!(f.param_count(64), 11_408);

    let bad = fire_params(&mut tape, 32, &f, 0.0);
    assert!(matches!(build_fire(&mut tape, x, &f, &bad), Err(Error::Shape { .. })));
}

#[test]
fn fire_preserves_spatial_extents() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (c, h, w) = (rng.random_range(1..5), rng.random_range(1..9), rng.random_range(1..9));
        let f = FireSpec {
            s_1x1: rng.random_range(1..4),
            e_1x1: rng.random_range(1..4),
            e_3x3: rng.random_range(1..4),
        };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, c, h, w], 1.0));
        let p = fire_params(&mut tape, c, &f, 0.1);
        let y = build_fire(&mut tape, x, &f, &p).unwrap();
        assert_eq!(tape.shape(y), [2, f.out_channels(), h, w]);
    }
}

#[test]
fn bundled_forward_full_resolution_grid() {
    let m = bundled::squeezedet();
    let store = WeightStore::zeros(&m);
    let out = forward(&m, &store, &Tensor::zeros(&[1, 3, 375, 1242])).unwrap();
    assert_eq!(out.head.shape(), [1, 72, 22, 76]);
    assert_eq!(out.feature.shape(), [1, 768, 22, 76]);
    assert_eq!(22 * 76 * 9, 15_048);
    let plan = m.plan(375, 1242).unwrap();
    for (p, (name, shape)) in plan.iter().zip(&out.activations) {
        assert_eq!(&p.name, name);
        assert_eq!(&shape[1..], p.output);
    }
}

#[test]
fn scaled_down_input_grid() {
    let m = bundled::squeezedet();
    let store = WeightStore::zeros(&m);
    let out = forward(&m, &store, &Tensor::zeros(&[1, 3, 281, 931])).unwrap();
    assert_eq!(&out.head.shape()[2..], [16, 57]);
    assert_eq!(m.grid_size(281, 931).unwrap(), (57, 16));
}

#[test]
fn forward_rejects_wrong_image_or_missing_head() {
    let m = bundled::toy();
    let store = WeightStore::zeros(&m);
    assert!(forward(&m, &store, &Tensor::zeros(&[1, 3, 64, 64])).is_err());
    assert!(forward(&m, &store, &Tensor::zeros(&[1, 1, 128, 384])).is_err());

    let headless = parse_spec(&spec_with_layers(r#"{"name": "c", "kind": "conv", "filters": 2, "kernel": 3}"#)).unwrap();
    let err = forward(&headless, &WeightStore::zeros(&headless), &Tensor::zeros(&[1, 3, 32, 32])).unwrap_err();
    assert!(err.to_string().contains("missing head"));
}

#[test]
fn init_is_seeded_and_fan_in_scaled() {
    let m = bundled::squeezedet();
    let a = init_weights(&m, 7);
    assert_eq!(a, init_weights(&m, 7));
    assert_ne!(a, init_weights(&m, 8));
    assert!(a.get("conv1/bias").unwrap().data().iter().all(|&v| v == 0.0));

    // expand3x3 of fire9: 3x3 filters over 64 channels.
    let w = a.get("fire9/expand3x3/weight").unwrap();
    assert_eq!(&w.shape()[1..], [64, 3, 3]);
    let s = &w.data()[..10_000];
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
    assert!((std - 1.0 / 24.0).abs() < 0.2 / 24.0, "std {std}");
}

#[test]
fn weights_round_trip_at_single_precision() {
    let m = bundled::squeezedet();
    let store = init_weights(&m, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.cdkw");
    save_weights(&store, &path).unwrap();
    let back = load_weights(&m, &path).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(back.iter()) {
        for (&x, &y) in a.data().iter().zip(b.data()) {
            assert_eq!(y, f64::from(x as f32));
            assert!((x - y).abs() <= x.abs() * f64::from(f32::EPSILON));
        }
    }

    let manifest_len = serde_json::to_vec(&store.manifest()).unwrap().len();
    let size = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(size, 4 * m.param_count() + manifest_len + 9);
    assert_eq!(store.param_count(), m.param_count());
}

#[test]
fn load_rejects_wrong_spec_and_truncation() {
    let m = bundled::toy();
    let bytes = init_weights(&m, 2).to_bytes();
    assert!(WeightStore::from_bytes(&m, &bytes).is_ok());
    assert!(matches!(
        WeightStore::from_bytes(&bundled::squeezedet(), &bytes),
        Err(Error::Weights(_))
    ));
    assert!(WeightStore::from_bytes(&m, &bytes[..bytes.len() - 3]).is_err());
    assert!(WeightStore::from_bytes(&m, &bytes[..20]).is_err());
    assert!(WeightStore::from_bytes(&m, b"nope").is_err());
}

fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let mut layers = Vec::new();
    let n = rng.random_range(1..6);
    for i in 0..n {
        let layer = match rng.random_range(0..3) {
            0 => format!(
                r#"{{"name": "l{i}", "kind": "conv", "filters": {}, "kernel": [{}, {}], "stride": [{}, {}], "padding": {}}}"#,
                rng.random_range(1..5),
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..3),
                rng.random_range(1..3),
                rng.random_range(0..2)
            ),
            1 => format!(
                r#"{{"name": "l{i}", "kind": "maxpool", "kernel": {}, "stride": {}}}"#,
                rng.random_range(1..3),
                rng.random_range(1..3)
            ),
            _ => format!(
                r#"{{"name": "l{i}", "kind": "fire", "s1x1": {}, "e1x1": {}, "e3x3": {}}}"#,
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..4)
            ),
        };
        layers.push(layer);
    }
    layers.push(r#"{"name": "det", "kind": "convdet", "kernel": 3, "padding": 1}"#.to_string());
    parse_spec(&spec_with_layers(&layers.join(","))).unwrap()
}

#[test]
fn forward_shapes_match_static_plan_on_random_specs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let m = random_spec(&mut rng);
        let Ok(plan) = m.plan(32, 32) else { continue };
        let out = forward(&m, &init_weights(&m, 0), &Tensor::full(&[1, 3, 32, 32], 0.5)).unwrap();
        assert_eq!(plan.len(), out.activations.len());
        for (p, (_, shape)) in plan.iter().zip(&out.activations) {
            assert_eq!(&shape[1..], p.output);
        }
    }
}
