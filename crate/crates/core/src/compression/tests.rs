use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::nn::{build_model, GroupsRule, ModelConfig, NormSpec};
use crate::subspace::SubspaceKind;
use crate::tensor::{Tape, Tensor};

fn instance_norm() -> NormSpec {
    NormSpec {
        groups: GroupsRule::PerChannel,
        ..NormSpec::default()
    }
}

fn cnn() -> Model {
    build_model(ModelConfig::small_cnn([3, 32, 32], &[16, 32, 64], 10, instance_norm())).unwrap()
}

fn mlp() -> Model {
    build_model(ModelConfig::mlp(20, &[64, 64], 10, NormSpec::default())).unwrap()
}

#[test]
fn level_calculators() {
    assert_eq!(gamma_structured(0.0, 0.25), 0.25);
    assert_eq!(gamma_structured(1.0, 0.25), 1.0);
    assert_eq!(gamma_structured(0.5, 0.25), 0.625);
    for g in [0.25, 0.4, 0.8, 1.0] {
        assert!((gamma_structured(alpha_from_width(g, 0.25), 0.25) - g).abs() < 1e-12);
    }
    assert!((gamma_unstructured(0.05) - 0.95).abs() < 1e-12);
    assert_eq!(gamma_unstructured(1.0), 0.0);
    assert!((gamma_unstructured(0.005) - 0.995).abs() < 1e-12);
    assert_eq!(gamma_quant(1.0 / 6.0, 2, 8), 3);
    assert_eq!(gamma_quant(1.0, 2, 8), 8);
    assert_eq!(gamma_quant(0.5, 2, 8), 5);
    for i in 1..=6 {
        assert_eq!(gamma_quant(i as f64 / 6.0, 2, 8), 2 + i);
    }
}

#[test]
fn warmup_examples() {
    let w = WarmupSchedule { total_steps: 100 };
    for a in [0.0, 0.3, 1.0] {
        assert_eq!(warmup_gamma(a, 0, &w), 0.0);
        assert_eq!(warmup_gamma(a, 100, &w), 1.0 - a);
        assert_eq!(warmup_gamma(a, 250, &w), 1.0 - a);
    }
    assert_eq!(warmup_gamma(0.0, 50, &w), 0.5);
    let spec = CompressionSpec {
        warmup: Some(w),
        ..CompressionSpec::new(CompressionKind::Unstructured)
    };
    assert_eq!(spec.level_at(0.0, 50).unwrap(), Level::Sparsity(0.5));
    assert!(spec.level_at(1.5, 50).is_err());
}

#[test]
fn level_rejects_alpha_outside_unit_interval() {
    let spec = CompressionSpec::new(CompressionKind::Structured);
    assert!(spec.level(-0.1).is_err());
    assert!(spec.level(1.1).is_err());
}

#[test]
fn topk_exempts_first_and_last_layers() {
    let model = mlp();
    let w = model.init_params(&mut ChaCha8Rng::seed_from_u64(1)).to_named();
    let out = apply_topk(&model, &w, 0.9).unwrap();
    assert_eq!(out["fc1.weight"], w["fc1.weight"]);
    assert_eq!(out["fc3.weight"], w["fc3.weight"]);
    assert_eq!(out["fc3.bias"], w["fc3.bias"]);
    let n = w["fc2.weight"].len();
    assert_eq!(n - out["fc2.weight"].count_nonzero(), topk_zero_count(n, 0.9));
    assert!(apply_topk(&model, &w, 1.0).is_err());
    assert!(apply_topk(&model, &w, -0.1).is_err());
    assert_eq!(apply_topk(&model, &w, 0.0).unwrap(), w);
}

#[test]
fn topk_and_structured_are_idempotent() {
    let model = cnn();
    let w = model.init_params(&mut ChaCha8Rng::seed_from_u64(2)).to_named();
    let once = apply_topk(&model, &w, 0.7).unwrap();
    assert_eq!(apply_topk(&model, &once, 0.7).unwrap(), once);
    let (s1, p1) = apply_structured(&model, &w, 0.4).unwrap();
    let (s2, p2) = apply_structured(&model, &s1, 0.4).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(p1, p2);
}

#[test]
fn structured_plan_on_small_cnn() {
    let model = cnn();
    let plan = channel_plan(&model, 0.5).unwrap();
    let weighted: Vec<_> = plan.widths.iter().flatten().copied().collect();
    assert_eq!(weighted, [(3, 8), (8, 16), (16, 32), (32, 10)]);
    let full = channel_plan(&model, 1.0).unwrap();
    assert_eq!(full, model.full_plan());
    let quarter: Vec<_> = channel_plan(&model, 0.25).unwrap().widths.into_iter().flatten().collect();
    assert_eq!(quarter, [(3, 4), (4, 8), (8, 16), (16, 10)]);
    assert!(channel_plan(&model, 0.0).is_err());
    assert!(channel_plan(&model, 1.5).is_err());
}

#[test]
fn masked_full_width_matches_sliced_network() {
    let model = cnn();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut w = model.init_params(&mut rng).to_named();
    // non-trivial affines so pruned channels would leak through if unmasked
    for (name, t) in w.iter_mut() {
        if name.ends_with("shift") || name.ends_with("scale") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5f32..0.5));
        }
    }
    let x = Tensor::new(vec![2, 3, 32, 32], (0..6144).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    for g in [0.25, 0.5, 0.8] {
        let (masked, plan) = apply_structured(&model, &w, g).unwrap();
        let sliced = model.predict(&w, &x, Some(&plan), None).unwrap();
        let full = model.predict(&masked, &x, None, None).unwrap();
        for (a, b) in sliced.data().iter().zip(full.data()) {
            assert!((a - b).abs() < 1e-4, "gamma {g}: {a} vs {b}");
        }
    }
}

#[test]
fn quantization_leaves_biases_and_affines() {
    let model = mlp();
    let w = model.init_params(&mut ChaCha8Rng::seed_from_u64(4)).to_named();
    let q = apply_quantization(&model, &w, 3, true).unwrap();
    assert_ne!(q["fc1.weight"], w["fc1.weight"]);
    assert_eq!(q["norm1.scale"], w["norm1.scale"]);
    assert_eq!(q["fc3.bias"], w["fc3.bias"]);
    let distinct: std::collections::BTreeSet<u32> = q["fc2.weight"].data().iter().map(|v| v.to_bits()).collect();
    assert!(distinct.len() <= 8);
    let keep = apply_quantization(&model, &w, 3, false).unwrap();
    assert_eq!(keep["fc1.weight"], w["fc1.weight"]);
    assert_eq!(keep["fc3.weight"], w["fc3.weight"]);
    assert_ne!(keep["fc2.weight"], w["fc2.weight"]);
}

#[test]
fn eight_bit_mean_error_within_half_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<f32> = (0..10_000).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    let t = Tensor::from_vec(data);
    let (p, q) = quantize_affine(&t, 8).unwrap();
    let mae: f64 = t
        .data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| f64::from(a - b).abs())
        .sum::<f64>()
        / t.len() as f64;
    assert!(mae <= p.scale / 2.0);
}

proptest! {
    #[test]
    fn quantization_error_bounded_away_from_clamp(
        values in prop::collection::vec(-10.0f32..10.0, 2..64),
        bits in 2u32..=8,
    ) {
        let t = Tensor::from_vec(values);
        let (p, q) = quantize_affine(&t, bits).unwrap();
        let lo = t.data().iter().copied().fold(f32::INFINITY, f32::min) as f64;
        let z = p.zero_point as f64;
        let top = p.scale * (p.qmax() as f64 - z);
        let bottom = -p.scale * z;
        prop_assert!(p.zero_point >= 0 && p.zero_point <= p.qmax());
        prop_assert!(bottom <= lo.min(0.0) + p.scale / 2.0 + 1e-6);
        for (&x, &y) in t.data().iter().zip(q.data()) {
            let (x, y) = (f64::from(x), f64::from(y));
            if x <= top && x >= bottom {
                prop_assert!((x - y).abs() <= p.scale / 2.0 + 1e-5, "x={} y={} s={}", x, y, p.scale);
            }
        }
    }

    #[test]
    fn topk_zero_count_matches_floor(values in prop::collection::vec(-1.0f32..1.0, 1..200), permille in 0usize..1000) {
        let mut v = values.clone();
        let before = v.iter().filter(|x| **x == 0.0).count();
        topk_in_place(&mut v, permille as f64 / 1000.0);
        let k = permille * values.len() / 1000;
        let zeros = v.iter().filter(|x| **x == 0.0).count();
        prop_assert!(zeros >= k && zeros <= k + before);
    }
}

#[test]
fn nonzero_count_monotone_in_alpha() {
    let model = cnn();
    for (kind, sub) in [
        (CompressionKind::Unstructured, SubspaceKind::Linear),
        (CompressionKind::Structured, SubspaceKind::Hybrid),
    ] {
        let spec = CompressionSpec::new(kind);
        let mut last = 0;
        for i in 0..=20 {
            let a = i as f64 / 20.0;
            let level = match spec.level(a).unwrap() {
                Level::Sparsity(s) if s >= 1.0 => continue,
                l => l,
            };
            let r = compression_cost(&model, sub, level, true).unwrap();
            assert!(r.nonzero_params >= last);
            last = r.nonzero_params;
        }
    }
}

#[test]
fn cost_examples() {
    let model = cnn();
    let r = compression_cost(&model, SubspaceKind::Point, Level::Width(0.5), true).unwrap();
    assert_eq!(r.overhead_flops, 4);

    let conv = build_model(ModelConfig::small_cnn([64, 8, 8], &[64, 64], 10, instance_norm())).unwrap();
    let dense = compression_cost(&conv, SubspaceKind::Point, Level::Dense, true).unwrap();
    let half = compression_cost(&conv, SubspaceKind::Point, Level::Width(0.5), true).unwrap();
    // conv2 is 64→64 at 4×4: both its channel counts halve
    let conv2_dense = 2 * 64 * 64 * 9 * 16;
    let conv2_half = 2 * 32 * 32 * 9 * 16;
    assert_eq!(conv2_half * 4, conv2_dense);
    let conv1_dense = 2 * 64 * 64 * 9 * 64;
    let conv1_half = 2 * 64 * 32 * 9 * 64;
    let fc_dense = 2 * 64 * 10;
    let fc_half = 2 * 32 * 10;
    assert_eq!(dense.dense_flops, conv1_dense + conv2_dense + fc_dense);
    assert_eq!(half.compressed_flops, conv1_half + conv2_half + fc_half);

    let topk = compression_cost(&model, SubspaceKind::Linear, Level::Sparsity(0.9), true).unwrap();
    assert!(topk.compressed_flops < topk.dense_flops);
    assert_eq!(topk.forward_flops, topk.dense_flops);
    let q = compression_cost(&model, SubspaceKind::Point, Level::Bits(4), true).unwrap();
    let weights: u64 = model
        .param_specs()
        .iter()
        .filter(|s| s.kind == ParamKind::Weight)
        .map(|s| s.shape.iter().product::<usize>() as u64)
        .sum();
    assert_eq!(q.overhead_flops, weights);
}

#[test]
fn topk_on_tape_blocks_gradient_to_pruned_entries() {
    let model = mlp();
    let w = model.init_params(&mut ChaCha8Rng::seed_from_u64(6)).to_named();
    let mut tape = Tape::<f32>::new();
    let vars = Model::weights_on_tape(&mut tape, &w, true);
    let (cw, _) = compress_on_tape(&mut tape, &model, &vars, Level::Sparsity(0.8), true).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = tape.constant(Tensor::new(vec![8, 20], (0..160).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap());
    let out = model
        .forward(&mut tape, &cw, x, &crate::nn::ForwardOptions::default())
        .unwrap();
    let loss = tape.softmax_cross_entropy(out.logits, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(vars["fc2.weight"]).unwrap();
    let pruned = apply_topk(&model, &w, 0.8).unwrap();
    let mut live = 0;
    for (gv, wv) in g.data().iter().zip(pruned["fc2.weight"].data()) {
        if *wv == 0.0 {
            assert_eq!(*gv, 0.0);
        } else if *gv != 0.0 {
            live += 1;
        }
    }
    assert!(live > 0);
}

#[test]
fn quantization_on_tape_passes_gradient_straight_through() {
    let model = mlp();
    let w = model.init_params(&mut ChaCha8Rng::seed_from_u64(8)).to_named();
    let mut tape = Tape::<f64>::new();
    let vars = Model::weights_on_tape(&mut tape, &w, true);
    let (cw, _) = compress_on_tape(&mut tape, &model, &vars, Level::Bits(4), true).unwrap();
    let q = apply_quantization(&model, &w, 4, true).unwrap();
    for name in ["fc1.weight", "fc2.weight", "fc3.weight"] {
        let got: Vec<f32> = tape.value(cw[name]).data().iter().map(|&v| v as f32).collect();
        assert_eq!(got, q[name].data());
    }
    let s = tape.sum(cw["fc2.weight"]).unwrap();
    let grads = tape.backward(s).unwrap();
    assert!(grads.get(vars["fc2.weight"]).unwrap().data().iter().all(|&v| v == 1.0));
}
