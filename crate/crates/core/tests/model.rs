use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semloc_autograd::{Graph, ParamKind, Tensor};
use semloc_core::model::*;

fn small_arch() -> ArchConfig {
    ArchConfig {
        conv_channels: vec![2, 3, 3, 4],
        mlp_widths_reg: vec![6, 5, 3],
        mlp_widths_cls: vec![6, 5, 3],
        input_shape: [1, 9, 7],
        ..ArchConfig::default()
    }
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn run(model: &Model, store: &semloc_autograd::ParamStore, x: Tensor, mode: Mode) -> (Graph, ModelOutputs) {
    let mut g = Graph::new();
    let bound = bind(&mut g, store);
    let xv = g.constant(x);
    let out = model.forward(&mut g, &bound, store, xv, mode).unwrap().outputs;
    (g, out)
}

#[test]
fn default_arch_shape_contract() {
    let model = Model::new(ArchConfig::default()).unwrap();
    let store = model.build(1);
    let (g, out) = run(&model, &store, random_input(&[2, 1, 64, 64], 3), Mode::Train);
    assert_eq!(g.shape(out.coords), &[2, 3]);
    assert_eq!(g.shape(out.probs), &[2, 3]);
    assert_eq!(g.shape(out.features), &[2, 1024]);
    for row in g.value(out.probs).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn default_parameter_count_matches_hand_count() {
    // conv: 1·16·9 + 16·32·9 + 32·32·9 + 32·64·9 = 32400; bn affine: 2·(16+32+32+64) = 288
    // head: 1024·256 + 2·256 + 256·128 + 2·128 + 128·3 + 3 = 296067, two heads
    let model = Model::new(ArchConfig::default()).unwrap();
    let store = model.build(0);
    assert_eq!(store.num_scalars(), 624_822);
    assert!(model.describe().contains("total trainable parameters: 624822"));
}

#[test]
fn build_is_deterministic_and_xavier_bounded() {
    let model = Model::new(ArchConfig::default()).unwrap();
    let a = model.build(7);
    assert_eq!(a.to_flat(), model.build(7).to_flat());
    assert_ne!(a.to_flat(), model.build(8).to_flat());
    let w = &a.get("f.conv1.weight").unwrap().value;
    let bound = (6.0f64 / (16.0 * 9.0 + 32.0 * 9.0)).sqrt();
    assert!(w.data().iter().all(|v| v.abs() <= bound));
    for (name, p) in a.iter() {
        if p.kind == ParamKind::Bias {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{name}");
        }
    }
}

#[test]
fn zero_input_eval_is_finite_and_deterministic() {
    let model = Model::new(small_arch()).unwrap();
    let store = model.build(2);
    let (g1, o1) = run(&model, &store, Tensor::zeros(&[3, 1, 9, 7]), Mode::Eval);
    let (g2, o2) = run(&model, &store, Tensor::zeros(&[3, 1, 9, 7]), Mode::Eval);
    assert!(g1.value(o1.coords).is_finite() && g1.value(o1.probs).is_finite());
    assert_eq!(g1.value(o1.coords), g2.value(o2.coords));
    assert_eq!(g1.value(o1.probs), g2.value(o2.probs));
}

#[test]
fn eval_forward_is_permutation_equivariant() {
    let model = Model::new(small_arch()).unwrap();
    let mut store = model.build(3);
    // give running statistics non-trivial values
    let mut gg = Graph::new();
    let bound = bind(&mut gg, &store);
    let xv = gg.constant(random_input(&[5, 1, 9, 7], 4));
    let fwd = model.forward(&mut gg, &bound, &store, xv, Mode::Train).unwrap();
    update_running_stats(&mut store, &fwd.bn_stats).unwrap();

    let x = random_input(&[5, 1, 9, 7], 5);
    let perm = [3, 0, 4, 1, 2];
    let xp = x.select_outer(&perm);
    let (ga, oa) = run(&model, &store, x, Mode::Eval);
    let (gb, ob) = run(&model, &store, xp, Mode::Eval);
    for (i, &p) in perm.iter().enumerate() {
        for (va, vb) in [(oa.coords, ob.coords), (oa.probs, ob.probs), (oa.features, ob.features)] {
            let w = ga.shape(va)[1];
            let ra = &ga.value(va).data()[p * w..(p + 1) * w];
            let rb = &gb.value(vb).data()[i * w..(i + 1) * w];
            assert_eq!(ra, rb);
        }
    }
}

#[test]
fn features_are_nonnegative_and_probs_normalized() {
    let model = Model::new(small_arch()).unwrap();
    let store = model.build(4);
    let (g, o) = run(&model, &store, random_input(&[6, 1, 9, 7], 6), Mode::Train);
    assert!(g.value(o.features).data().iter().all(|&v| v >= 0.0));
    for row in g.value(o.probs).data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&p| p > 0.0));
    }
}

#[test]
fn regressor_output_is_unbounded() {
    let model = Model::new(small_arch()).unwrap();
    let mut store = model.build(5);
    for v in store.get_mut("reg.fc2.weight").unwrap().value.data_mut() {
        *v *= 1e4;
    }
    let (g, o) = run(&model, &store, random_input(&[8, 1, 9, 7], 7), Mode::Train);
    let c = g.value(o.coords).data();
    assert!(c.iter().cloned().fold(f64::MIN, f64::max) > 100.0);
    assert!(c.iter().cloned().fold(f64::MAX, f64::min) < -100.0);
}

#[test]
fn running_stats_follow_momentum_rule() {
    let model = Model::new(small_arch()).unwrap();
    let mut store = model.build(6);
    let mut g = Graph::new();
    let bound = bind(&mut g, &store);
    let xv = g.constant(random_input(&[4, 1, 9, 7], 8));
    let fwd = model.forward(&mut g, &bound, &store, xv, Mode::Train).unwrap();
    let (name, s) = fwd.bn_stats.iter().find(|(n, _)| n == "f.bn0").unwrap().clone();
    update_running_stats(&mut store, &fwd.bn_stats).unwrap();
    let rm = store.buffer(&format!("{name}.running_mean")).unwrap().data();
    let rv = store.buffer(&format!("{name}.running_var")).unwrap().data();
    let n = s.count as f64;
    for c in 0..s.mean.len() {
        assert!((rm[c] - 0.1 * s.mean[c]).abs() < 1e-15);
        assert!((rv[c] - (0.9 + 0.1 * s.var[c] * n / (n - 1.0))).abs() < 1e-15);
    }
    assert_eq!(fwd.bn_stats.len(), 4 + 2 + 2);
}

#[test]
fn predict_matches_single_batch_eval() {
    let model = Model::new(small_arch()).unwrap();
    let store = model.build(9);
    let x = random_input(&[7, 1, 9, 7], 10);
    let (coords, probs) = model.predict(&store, &x, 3).unwrap();
    let (g, o) = run(&model, &store, x, Mode::Eval);
    for i in 0..7 {
        assert_eq!(&coords[i][..], &g.value(o.coords).data()[i * 3..i * 3 + 3]);
        assert_eq!(&probs[i][..], &g.value(o.probs).data()[i * 3..i * 3 + 3]);
    }
}

#[test]
fn invalid_arch_is_rejected() {
    let mut a = ArchConfig::default();
    a.mlp_widths_reg = vec![8, 2];
    assert!(Model::new(a).is_err());
    let mut a = ArchConfig::default();
    a.n_classes = 1;
    a.mlp_widths_cls = vec![8, 1];
    assert!(Model::new(a).is_err());
    let model = Model::new(small_arch()).unwrap();
    let store = model.build(0);
    let mut g = Graph::new();
    let bound = bind(&mut g, &store);
    let x = g.constant(Tensor::zeros(&[2, 1, 8, 8]));
    assert!(model.forward(&mut g, &bound, &store, x, Mode::Eval).is_err());
}

#[test]
fn binary_classifier_probabilities_are_logistic() {
    let mut a = small_arch();
    a.n_classes = 2;
    a.mlp_widths_cls = vec![6, 2];
    let model = Model::new(a).unwrap();
    let store = model.build(11);
    let (g, o) = run(&model, &store, random_input(&[4, 1, 9, 7], 12), Mode::Train);
    let u = g.value(o.logits).data();
    let p = g.value(o.probs).data();
    for i in 0..4 {
        let s = 1.0 / (1.0 + (-(u[2 * i + 1] - u[2 * i])).exp());
        assert!((p[2 * i + 1] - s).abs() < 1e-14);
    }
}
