use semloc_autograd::{
    grad_check, GradMap, Graph, OptimState, ParamKind, ParamStore, SgdConfig, Tensor,
};

fn store(values: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("w", ParamKind::Weight, Tensor::from_vec(values.to_vec()));
    s
}

fn grads(values: &[f64]) -> GradMap {
    let mut g = GradMap::new();
    g.insert("w".into(), Tensor::from_vec(values.to_vec()));
    g
}

#[test]
fn zero_gradient_and_velocity_leave_params_unchanged() {
    let mut p = store(&[1.0, -2.0]);
    let mut opt = OptimState::new(SgdConfig {
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
    });
    opt.step(&mut p, &grads(&[0.0, 0.0])).unwrap();
    assert_eq!(p.get("w").unwrap().value.data(), &[1.0, -2.0]);
}

#[test]
fn plain_step_without_momentum() {
    let (lr, wd) = (0.1, 0.01);
    let mut p = store(&[1.0, -2.0]);
    let mut opt = OptimState::new(SgdConfig {
        lr,
        momentum: 0.0,
        weight_decay: wd,
    });
    opt.step(&mut p, &grads(&[0.5, 0.25])).unwrap();
    let expected = [1.0 - lr * (0.5 + wd * 1.0), -2.0 - lr * (0.25 + wd * -2.0)];
    for (a, b) in p.get("w").unwrap().value.data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn second_momentum_step_is_one_plus_mu_times_gradient() {
    let (lr, mu, g) = (0.01, 0.99, 0.7);
    let mut p = store(&[0.0]);
    let mut opt = OptimState::new(SgdConfig {
        lr,
        momentum: mu,
        weight_decay: 0.0,
    });
    opt.step(&mut p, &grads(&[g])).unwrap();
    let after_first = p.get("w").unwrap().value.data()[0];
    opt.step(&mut p, &grads(&[g])).unwrap();
    let second_update = after_first - p.get("w").unwrap().value.data()[0];
    assert!((second_update - lr * (1.0 + mu) * g).abs() < 1e-15);
}

#[test]
fn non_finite_update_is_rejected() {
    let mut p = store(&[1.0]);
    let mut opt = OptimState::new(SgdConfig::default());
    let err = opt.step(&mut p, &grads(&[f64::INFINITY])).unwrap_err();
    assert!(matches!(err, semloc_autograd::Error::NonFinite { .. }));
}

#[test]
fn default_hyperparameters() {
    let c = SgdConfig::default();
    assert_eq!((c.lr, c.momentum, c.weight_decay), (1e-3, 0.99, 1e-4));
}

#[test]
fn grad_check_is_exact_for_half_squared_norm() {
    let params = store(&[0.3, -1.7, 2.2, 0.0]);
    let mut f = |p: &ParamStore| {
        let mut g = Graph::new();
        let w = g.param(p.get("w")?.value.clone());
        let sq = g.square(w)?;
        let s = g.sum(sq)?;
        let l = g.scale(s, 0.5)?;
        let grads = g.backward(l)?;
        let mut map = GradMap::new();
        map.insert("w".into(), grads.get(w).unwrap().clone());
        Ok((g.value(l).item(), map))
    };
    let report = grad_check(&mut f, &params, 1e-5).unwrap();
    assert_eq!(report.entries_checked, 4);
    assert!(report.max_rel_error < 1e-10, "{report:?}");
}

#[test]
fn grad_check_flags_a_wrong_gradient() {
    let params = store(&[1.0, 2.0]);
    let mut f = |p: &ParamStore| {
        let w = p.get("w")?.value.clone();
        let v = 0.5 * w.sq_norm();
        // Deliberately off by a factor of two.
        Ok((v, grads(&[2.0 * w.data()[0], 2.0 * w.data()[1]])))
    };
    let report = grad_check(&mut f, &params, 1e-5).unwrap();
    assert!((report.max_rel_error - 0.5).abs() < 1e-6);
}

#[test]
fn flat_layout_round_trips() {
    let mut s = store(&[1.0, 2.0]);
    s.insert("a.bias", ParamKind::Bias, Tensor::from_vec(vec![3.0]));
    s.insert_buffer("bn.running_var", Tensor::from_vec(vec![4.0, 5.0]));
    let layout = s.layout();
    assert_eq!(layout[0].name, "a.bias");
    assert_eq!(s.to_flat(), vec![3.0, 1.0, 2.0, 4.0, 5.0]);
    assert_eq!(ParamStore::from_flat(&layout, &s.to_flat()).unwrap(), s);
}
