use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()).unwrap()
}

fn norm(kind: NormKind, groups: GroupsRule) -> NormSpec {
    NormSpec {
        kind,
        groups,
        ..NormSpec::default()
    }
}

fn gn(x: &Tensor, g: usize) -> Tensor {
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(x.clone());
    let y = tape.group_norm(v, g, 1e-5).unwrap();
    tape.value(y).clone()
}

/// Independent per-sample normalization over index groups given by `key`.
fn oracle_norm(x: &Tensor, key: impl Fn(usize, usize) -> usize) -> Vec<f64> {
    let (n, c, s) = x.channel_layout().unwrap();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for ch in 0..c {
            for p in 0..s {
                groups.entry(key(ch, p)).or_default().push((b * c + ch) * s + p);
            }
        }
        for idx in groups.values() {
            let m = idx.len() as f64;
            let mean = idx.iter().map(|&i| f64::from(x.data()[i])).sum::<f64>() / m;
            let var = idx.iter().map(|&i| (f64::from(x.data()[i]) - mean).powi(2)).sum::<f64>() / m;
            for &i in idx {
                out[i] = (f64::from(x.data()[i]) - mean) / (var + 1e-5).sqrt();
            }
        }
    }
    out
}

fn assert_close(a: &[f32], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        assert!((f64::from(x) - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn group_norm_special_cases_match_direct_computation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[3, 6, 4, 4]);
    // g = c is InstanceNorm
    assert_close(gn(&x, 6).data(), &oracle_norm(&x, |ch, _| ch), 1e-5);
    // g = 1 is LayerNorm over C×H×W
    assert_close(gn(&x, 1).data(), &oracle_norm(&x, |_, _| 0), 1e-5);
    // group membership is ⌊i_C·g/c⌋
    assert_close(gn(&x, 3).data(), &oracle_norm(&x, |ch, _| ch * 3 / 6), 1e-5);
}

#[test]
fn group_norm_channel_three_of_four_uses_group_two_three() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 4, 2, 2]);
    let y = gn(&x, 2);
    let want = oracle_norm(&x, |ch, _| usize::from(ch >= 2));
    assert_close(&y.data()[12..16], &want[12..16], 1e-5);
}

#[test]
fn group_norm_constant_input_is_zero() {
    let x = Tensor::full(&[2, 4, 3, 3], 1.7f32);
    assert!(gn(&x, 2).data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_norm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 8, 4, 4]);
    let y = gn(&x, 4);
    for chunk in y.data().chunks(2 * 16) {
        let m = chunk.len() as f64;
        let mean = chunk.iter().map(|&v| f64::from(v)).sum::<f64>() / m;
        let var = chunk.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / m;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
}

#[test]
fn effective_groups_fallback() {
    assert_eq!(GroupsRule::Fixed(32).effective_groups(16), 16);
    assert_eq!(GroupsRule::Fixed(32).effective_groups(64), 32);
    assert_eq!(GroupsRule::Fixed(3).effective_groups(16), 16);
    assert_eq!(GroupsRule::PerChannel.effective_groups(64), 64);
}

#[test]
fn descriptors_flag_exactly_one_first_and_last() {
    for cfg in [
        ModelConfig::mlp(20, &[256, 256], 10, NormSpec::default()),
        ModelConfig::small_cnn([3, 32, 32], &[16, 32, 64], 10, NormSpec::default()),
    ] {
        let m = build_model(cfg).unwrap();
        let d = m.descriptors();
        assert_eq!(d.iter().filter(|d| d.is_first_layer).count(), 1);
        assert_eq!(d.iter().filter(|d| d.is_last_layer).count(), 1);
        let weighted: Vec<_> = m.weighted_layers().collect();
        assert!(weighted[0].1.is_first_layer);
        assert!(weighted.last().unwrap().1.is_last_layer);
    }
}

#[test]
fn replace_bn_with_gn_swaps_every_norm() {
    let cfg = ModelConfig::small_cnn(
        [3, 32, 32],
        &[16, 32, 64],
        10,
        norm(NormKind::Batch, GroupsRule::Fixed(32)),
    );
    let bn = build_model(cfg).unwrap();
    assert_eq!(bn.bn_states().len(), 3);
    let g = replace_bn_with_gn(&bn);
    assert_eq!(g.bn_states().len(), 0);
    assert_eq!(g.norm_kind(), NormKind::Group);
    assert_eq!(g.group_counts(), vec![Some(16), Some(32), Some(32)]);
    assert_eq!(g.param_specs(), bn.param_specs());

    let mut inst = bn.clone();
    inst.config.norm.groups = GroupsRule::PerChannel;
    let inst = replace_bn_with_gn(&inst);
    assert_eq!(inst.group_counts(), vec![Some(16), Some(32), Some(64)]);
}

#[test]
fn rejects_bad_configs() {
    assert!(build_model(ModelConfig::mlp(20, &[], 10, NormSpec::default())).is_err());
    assert!(build_model(ModelConfig::mlp(20, &[0], 10, NormSpec::default())).is_err());
    assert!(build_model(ModelConfig::small_cnn([3, 30, 30], &[8, 8, 8], 10, NormSpec::default())).is_err());
    assert!(build_model(ModelConfig::mlp(20, &[8], 1, NormSpec::default())).is_err());
}

fn forward(model: &Model, w: &NamedTensors, x: &Tensor, train: bool) -> (Tensor, Vec<BnBatchStats>) {
    let mut tape = Tape::<f32>::new();
    let vars = Model::weights_on_tape(&mut tape, w, false);
    let xv = tape.constant(x.clone());
    let opts = ForwardOptions {
        train,
        ..Default::default()
    };
    let out = model.forward(&mut tape, &vars, xv, &opts).unwrap();
    (tape.value(out.logits).clone(), out.bn_stats)
}

#[test]
fn group_norm_models_are_batch_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for cfg in [
        ModelConfig::mlp(12, &[32, 32], 5, NormSpec::default()),
        ModelConfig::small_cnn([3, 8, 8], &[4, 8], 5, norm(NormKind::Group, GroupsRule::Fixed(2))),
    ] {
        let model = build_model(cfg.clone()).unwrap();
        let w = model.init_params(&mut rng).to_named();
        let mut shape = vec![6];
        shape.extend(&cfg.input_shape);
        let x = random(&mut rng, &shape);
        let (batch, _) = forward(&model, &w, &x, false);
        let per = x.len() / 6;
        for i in 0..6 {
            let mut one = shape.clone();
            one[0] = 1;
            let xi = Tensor::new(one, x.data()[i * per..(i + 1) * per].to_vec()).unwrap();
            let (yi, _) = forward(&model, &w, &xi, false);
            assert_eq!(yi.data(), &batch.data()[i * 5..(i + 1) * 5]);
        }
    }
}

#[test]
fn batch_norm_running_update_rule() {
    let mut s = BatchNormState::new(1);
    s.update(0.1, &[1.0], &[0.0], 4);
    assert!((s.running_mean.data()[0] - 0.1).abs() < 1e-7);
    assert!((s.running_var.data()[0] - 0.9).abs() < 1e-7);
}

#[test]
fn batch_norm_eval_with_initial_stats() {
    let cfg = ModelConfig::mlp(3, &[4], 2, norm(NormKind::Batch, GroupsRule::Fixed(1)));
    let model = build_model(cfg).unwrap();
    let mut tape = Tape::<f32>::new();
    let x = Tensor::new(vec![2, 4], vec![0.5, -1.0, 2.0, 3.0, 0.0, 1.0, -2.0, 4.0]).unwrap();
    let xv = tape.constant(x.clone());
    let y = tape.normalize_fixed(xv, &[0.0; 4], &[1.0; 4], 1e-5).unwrap();
    let want: Vec<f64> = x.data().iter().map(|&v| f64::from(v) / (1.0f64 + 1e-5).sqrt()).collect();
    assert_close(tape.value(y).data(), &want, 1e-6);
    assert_eq!(model.bn_states()["norm1"].running_mean.data(), &[0.0; 4]);
    assert_eq!(model.bn_states()["norm1"].running_var.data(), &[1.0; 4]);
}

#[test]
fn batch_norm_two_training_passes_then_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = ModelConfig::mlp(3, &[4], 2, norm(NormKind::Batch, GroupsRule::Fixed(1)));
    let mut model = build_model(cfg).unwrap();
    let w = model.init_params(&mut rng).to_named();
    let w1 = w["fc1.weight"].clone();

    // 64-bit oracle of the running statistics
    let (mut rm, mut rv) = (vec![0.0f64; 4], vec![1.0f64; 4]);
    for _ in 0..2 {
        let x = random(&mut rng, &[5, 3]);
        let (_, stats) = forward(&model, &w, &x, true);
        model.update_bn(&stats);
        for c in 0..4 {
            let h: Vec<f64> = (0..5)
                .map(|n| (0..3).map(|i| f64::from(x.data()[n * 3 + i]) * f64::from(w1.data()[i * 4 + c])).sum())
                .collect();
            let mean = h.iter().sum::<f64>() / 5.0;
            let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            rm[c] = 0.9 * rm[c] + 0.1 * mean;
            rv[c] = 0.9 * rv[c] + 0.1 * var;
        }
    }
    let st = &model.bn_states()["norm1"];
    assert_close(st.running_mean.data(), &rm, 1e-5);
    assert_close(st.running_var.data(), &rv, 1e-5);

    let x = random(&mut rng, &[3, 3]);
    let (logits, _) = forward(&model, &w, &x, false);
    let w2 = &w["fc2.weight"];
    let mut want = Vec::new();
    for n in 0..3 {
        let hidden: Vec<f64> = (0..4)
            .map(|c| {
                let h: f64 = (0..3).map(|i| f64::from(x.data()[n * 3 + i]) * f64::from(w1.data()[i * 4 + c])).sum();
                ((h - rm[c]) / (rv[c] + 1e-5).sqrt()).max(0.0)
            })
            .collect();
        for k in 0..2 {
            want.push((0..4).map(|c| hidden[c] * f64::from(w2.data()[c * 2 + k])).sum::<f64>());
        }
    }
    assert_close(logits.data(), &want, 1e-4);
}

#[test]
fn batch_norm_eval_depends_on_running_stats() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ModelConfig::mlp(3, &[4], 2, norm(NormKind::Batch, GroupsRule::Fixed(1)));
    let mut model = build_model(cfg).unwrap();
    let w = model.init_params(&mut rng).to_named();
    let x = random(&mut rng, &[2, 3]);
    let (before, _) = forward(&model, &w, &x, false);
    model.bn_states_mut()["norm1"].running_mean = Tensor::full(&[4], 0.5);
    let (after, _) = forward(&model, &w, &x, false);
    assert_ne!(before, after);
}

#[test]
fn batch_norm_training_needs_two_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ModelConfig::mlp(3, &[4], 2, norm(NormKind::Batch, GroupsRule::Fixed(1)));
    let model = build_model(cfg).unwrap();
    let w = model.init_params(&mut rng).to_named();
    let mut tape = Tape::<f32>::new();
    let vars = Model::weights_on_tape(&mut tape, &w, false);
    let xv = tape.constant(random(&mut rng, &[1, 3]));
    let opts = ForwardOptions {
        train: true,
        ..Default::default()
    };
    assert!(model.forward(&mut tape, &vars, xv, &opts).is_err());
}

#[test]
fn small_cnn_shapes_and_geometry() {
    let model = build_model(ModelConfig::small_cnn([3, 32, 32], &[16, 32, 64], 10, NormSpec::default())).unwrap();
    let specs = model.param_specs();
    let names: Vec<_> = specs.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(
        names,
        [
            "conv1.weight",
            "norm1.scale",
            "norm1.shift",
            "conv2.weight",
            "norm2.scale",
            "norm2.shift",
            "conv3.weight",
            "norm3.scale",
            "norm3.shift",
            "fc.weight",
            "fc.bias"
        ]
    );
    assert_eq!(specs[0].shape, [16, 3, 3, 3]);
    let geo = model.layer_geometry().unwrap();
    let pos: Vec<_> = geo.iter().map(|g| g.out_positions).collect();
    assert_eq!(pos, [1024, 256, 64, 1]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let w = model.init_params(&mut rng).to_named();
    let x = random(&mut rng, &[2, 3, 32, 32]);
    let logits = model.predict(&w, &x, None, None).unwrap();
    assert_eq!(logits.shape(), [2, 10]);
}

#[test]
fn kaiming_init_bounds() {
    let model = build_model(ModelConfig::mlp(100, &[50], 10, NormSpec::default())).unwrap();
    let p = model.init_params(&mut ChaCha8Rng::seed_from_u64(9));
    let bound = (6.0f32 / 100.0).sqrt();
    let w = &p.get("fc1.weight").unwrap().value;
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    assert!(w.data().iter().any(|v| v.abs() > 0.9 * bound));
    let head = &p.get("fc2.weight").unwrap().value;
    assert!(head.data().iter().all(|v| v.abs() <= (1.0f32 / 50.0).sqrt()));
    assert!(p.get("norm1.scale").unwrap().value.data().iter().all(|&v| v == 1.0));
    assert!(p.get("fc2.bias").unwrap().value.data().iter().all(|&v| v == 0.0));
}
