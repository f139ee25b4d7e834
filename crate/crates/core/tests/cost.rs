use cdk_core::cost::{
    analyze, compare_heads, params_convdet, params_fcdet, params_rpn, sram_check, sram_check_values, AnalyzeOptions,
    HeadSpec,
};
use cdk_core::network::{bundled, forward, init_weights, parse_spec, ModelSpec};
use cdk_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn yolo_head() -> HeadSpec {
    HeadSpec {
        f_w: 3,
        f_h: 3,
        ch_f: 1024,
        w_f: 7,
        h_f: 7,
        w_o: 7,
        h_o: 7,
        f_fc1: 4096,
        k: 2,
        c: 20,
    }
}

fn ones(k: u64, c: u64) -> HeadSpec {
    HeadSpec {
        f_w: 1,
        f_h: 1,
        ch_f: 1,
        w_f: 1,
        h_f: 1,
        w_o: 1,
        h_o: 1,
        f_fc1: 1,
        k,
        c,
    }
}

#[test]
fn head_formulas() {
    let h = yolo_head();
    assert_eq!(params_convdet(&h), 460_800);
    assert_eq!(params_fcdet(&h), 211_542_016);
    let ratio = params_fcdet(&h) as f64 / params_convdet(&h) as f64;
    assert!((ratio - 459.0).abs() < 1.0, "{ratio}");
    assert_eq!(params_rpn(&h), 10_240);

    assert_eq!(params_convdet(&ones(1, 0)), 5);
    assert_eq!(params_fcdet(&ones(0, 1)), 2);
    assert_eq!(params_rpn(&ones(0, 3)), 0);
    assert_eq!(params_rpn(&ones(1, 3)), 5);
    // At C = 0 ConvDet with a 1x1 filter is exactly RPN.
    assert_eq!(params_convdet(&ones(4, 0)), params_rpn(&ones(4, 0)));
}

#[test]
fn compare_heads_table() {
    let rows = compare_heads(&yolo_head());
    let got: Vec<(&str, bool, bool, u64)> = rows.iter().map(|r| (r.head, r.proposes_regions, r.classifies, r.params)).collect();
    assert_eq!(
        got,
        [("RPN", true, false, 10_240), ("ConvDet", true, true, 460_800), ("FcDet", true, true, 211_542_016)]
    );
    let (k, c) = (3, 4);
    let d = compare_heads(&ones(k, c));
    assert_eq!([d[0].params, d[1].params, d[2].params], [5 * k, k * (5 + c), 1 + 5 * k + c]);
    // 1x1 ConvDet = RPN·(5+C)/5.
    let mut h = yolo_head();
    h.f_w = 1;
    h.f_h = 1;
    assert_eq!(params_convdet(&h) * 5, params_rpn(&h) * (5 + h.c));
}

#[test]
fn bundled_head_param_count() {
    let m = bundled::squeezedet();
    let r = analyze(&m, 375, 1242, &AnalyzeOptions::default()).unwrap();
    let head = r.layer("convdet").unwrap();
    assert_eq!(head.params, 3 * 3 * 768 * 9 * 8 + 72);
    let h = HeadSpec {
        f_w: 3,
        f_h: 3,
        ch_f: 768,
        w_f: 76,
        h_f: 22,
        w_o: 76,
        h_o: 22,
        f_fc1: 1,
        k: 9,
        c: 3,
    };
    assert_eq!(params_convdet(&h), 497_664);
}

#[test]
fn params_match_spec_accounting() {
    for m in [bundled::squeezedet(), bundled::squeezedet_plus(), bundled::toy()] {
        let (h, w) = (m.input.h, m.input.w);
        let r = analyze(&m, h, w, &AnalyzeOptions::default()).unwrap();
        assert_eq!(r.totals.params as usize, m.param_count());
        assert_eq!(r.totals.flops, r.layers.iter().map(|l| l.flops).sum::<u64>());
        assert_eq!(r.totals.footprint_bytes, r.layers.iter().map(|l| l.stored_bytes).sum::<u64>());
        for l in &r.layers {
            assert_eq!(l.output_bytes, 4 * l.output_shape.iter().product::<u64>());
        }
    }
}

#[test]
fn bundled_specs_land_near_reported_sizes() {
    let r = analyze(&bundled::squeezedet(), 375, 1242, &AnalyzeOptions::default()).unwrap();
    assert!((r.totals.model_mb - 7.94).abs() < 0.01);
    let plus = analyze(&bundled::squeezedet_plus(), 375, 1242, &AnalyzeOptions::default()).unwrap();
    assert!((plus.totals.model_mb - 26.8).abs() / 26.8 < 0.1, "{}", plus.totals.model_mb);
}

#[test]
fn fusion_stores_pooled_conv1() {
    let m = bundled::squeezedet();
    let mut opts = AnalyzeOptions::default();
    let plain = analyze(&m, 375, 1242, &opts).unwrap();
    opts.fuse_conv_pool = true;
    let fused = analyze(&m, 375, 1242, &opts).unwrap();
    assert_eq!(plain.layer("conv1").unwrap().stored_bytes, 620 * 187 * 64 * 4);
    assert_eq!(fused.layer("conv1").unwrap().stored_bytes, 309 * 93 * 64 * 4);
    assert!(fused.layer("pool1").unwrap().fused);
    assert_eq!(fused.totals, plain.fused);
    assert!(fused.totals.footprint_bytes < plain.totals.footprint_bytes);
}

#[test]
fn batch_scales_linearly() {
    let m = bundled::squeezedet();
    let one = analyze(&m, 375, 1242, &AnalyzeOptions::default()).unwrap();
    for b in [2, 3, 5] {
        let opts = AnalyzeOptions {
            batch: b,
            ..Default::default()
        };
        let r = analyze(&m, 375, 1242, &opts).unwrap();
        assert_eq!(r.totals.footprint_bytes, b * one.totals.footprint_bytes);
        assert_eq!(r.totals.flops, b * one.totals.flops);
        assert_eq!(r.totals.params, one.totals.params);
    }
}

#[test]
fn flops_scale_with_resolution_squared() {
    let m = bundled::squeezedet();
    let base = analyze(&m, 375, 1242, &AnalyzeOptions::default()).unwrap().totals.flops as f64;
    for r in [0.75f64, 1.5] {
        let (h, w) = ((375.0 * r).round() as usize, (1242.0 * r).round() as usize);
        let f = analyze(&m, h, w, &AnalyzeOptions::default()).unwrap().totals.flops as f64;
        let ratio = f / base / (r * r);
        assert!((ratio - 1.0).abs() <= 0.10, "r={r}: {ratio}");
    }
}

#[test]
fn sram_verdicts() {
    let boundary = sram_check_values(5.0, 11.0, None, 16.0);
    assert!(boundary.fits);
    assert_eq!(boundary.required_mb, 16.0);
    assert!(sram_check_values(5.0, 10.0, None, 16.0).fits);
    let zero = sram_check_values(5.0, 10.0, None, 0.0);
    assert!(!zero.fits);
    assert_eq!(zero.required_mb, 15.0);

    let r = analyze(&bundled::squeezedet(), 375, 1242, &AnalyzeOptions::default()).unwrap();
    let v = sram_check(&r, 16.0);
    assert!(!v.fits);
    let (a, b) = v.limiting_pair.clone().unwrap();
    assert!(a == "conv1" || b == "conv1", "{a} {b}");
    assert!(r.to_table().contains("conv1"));
    assert!(r.to_json().contains("\"footprint_mb\""));
}

fn random_spec(rng: &mut ChaCha8Rng) -> Option<ModelSpec> {
    let mut layers = Vec::new();
    for i in 0..rng.random_range(1..6) {
        layers.push(match rng.random_range(0..3) {
            0 => format!(
                r#"{{"name": "l{i}", "kind": "conv", "filters": {}, "kernel": [{}, {}], "stride": {}, "padding": [{}, {}]}}"#,
                rng.random_range(1..5),
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..3),
                rng.random_range(0..2),
                rng.random_range(0..2)
            ),
            1 => format!(r#"{{"name": "l{i}", "kind": "maxpool", "kernel": {}, "stride": 2}}"#, rng.random_range(2..4)),
            _ => format!(
                r#"{{"name": "l{i}", "kind": "fire", "s1x1": {}, "e1x1": {}, "e3x3": {}}}"#,
                rng.random_range(1..4),
                rng.random_range(1..4),
                rng.random_range(1..4)
            ),
        });
    }
    layers.push(r#"{"name": "det", "kind": "convdet", "kernel": 1}"#.into());
    let text = format!(
        r#"{{"input": {{"c": 2, "h": 24, "w": 20}}, "layers": [{}], "detector": {{"k": 2, "classes": ["x"], "anchors": [[4.0, 4.0], [8.0, 8.0]]}}}}"#,
        layers.join(",")
    );
    let m = parse_spec(&text).unwrap();
    m.plan(24, 20).is_ok().then_some(m)
}

#[test]
fn analyzed_shapes_equal_forward_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 50 {
        let Some(m) = random_spec(&mut rng) else { continue };
        let r = analyze(&m, 24, 20, &AnalyzeOptions::default()).unwrap();
        let out = forward(&m, &init_weights(&m, 3), &Tensor::full(&[1, 2, 24, 20], 0.25)).unwrap();
        let per_layer: Vec<_> = r.layers.iter().filter(|l| l.kind != "squeeze").collect();
        assert_eq!(per_layer.len(), out.activations.len());
        for (l, (name, shape)) in per_layer.iter().zip(&out.activations) {
            assert_eq!(&l.layer, name);
            assert_eq!(l.output_shape.map(|v| v as usize).to_vec(), *shape);
        }
        checked += 1;
    }
}
