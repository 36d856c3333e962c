use proptest::prelude::*;
use semloc_core::features::{FeatureSet, FingerprintKind, NormalizationScheme};
use semloc_core::geometry::Vec3;
use semloc_core::sim::{generate_dataset, ArrayGeometry, Scenario, UeGrid};
use semloc_core::train::*;
use semloc_core::Error;

fn toy_features(n_scenes: usize, seed: u64) -> FeatureSet {
    let mut s = Scenario::desk();
    s.array = ArrayGeometry::new(4, 4);
    s.n_subcarriers = 16;
    s.ue_grid = UeGrid::Rect { origin: Vec3::new(14.0, 27.9, 1.5), spacing: 3.2, nx: 10, ny: 2 };
    let ds = generate_dataset(&s, n_scenes, seed).unwrap();
    FeatureSet::extract(&ds, FingerprintKind::Adp, NormalizationScheme::Aw).unwrap()
}

/// Inputs replaced by a fixed linear image of the coordinates.
fn linear_toy() -> FeatureSet {
    let mut fs = toy_features(10, 3);
    let n = fs.manifest.sample_shape.iter().product::<usize>();
    for i in 0..fs.len() {
        let c: Vec<f32> = fs.coords[i * 3..i * 3 + 3].to_vec();
        for j in 0..n {
            let (a, b) = ((j % 7) as f32 - 3.0, (j % 5) as f32 - 2.0);
            fs.data[i * n + j] = 0.05 * (a * (c[0] - 28.0) + b * (c[1] - 29.0));
        }
    }
    fs
}

fn toy_config(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 4,
        batch_size: 16,
        conv_channels: vec![2, 4],
        mlp_hidden: vec![8],
        seed: 5,
        ..TrainConfig::desk()
    }
}

#[test]
fn lambda3_schedule_values() {
    assert_eq!(lambda3_schedule(0.0), 0.0);
    assert!((lambda3_schedule(0.1) - 0.46212).abs() < 1e-5);
    assert!((lambda3_schedule(1.0) - 0.99991).abs() < 1e-5);
    let mut prev = -1.0;
    for i in 0..=1000 {
        let v = lambda3_schedule(i as f64 / 1000.0);
        assert!(v > prev && (0.0..1.0).contains(&v));
        prev = v;
    }
}

#[test]
fn split_plans() {
    assert!(SplitPlan::desk().validate(40).is_ok());
    assert!(SplitPlan::full().validate(120).is_ok());
    assert_eq!(SplitPlan::for_scenes(40), SplitPlan::desk());
    assert_eq!(SplitPlan::for_scenes(10), SplitPlan { source: 0..5, val: 5..7, target: 7..10 });
    assert!(SplitPlan::desk().validate(39).is_err());
    let overlap = SplitPlan { source: 0..5, val: 4..6, target: 6..8 };
    assert!(matches!(overlap.validate(8), Err(Error::InvalidConfig(_))));
    let empty = SplitPlan { source: 0..0, val: 0..2, target: 2..4 };
    assert!(empty.validate(4).is_err());
    assert_eq!("test".parse::<Split>().unwrap(), Split::Target);
}

#[test]
fn config_defaults_and_validation() {
    let c = TrainConfig::default();
    assert_eq!(c.batch_size, 64);
    assert_eq!(c.task_weights(), (0.7, 0.3));
    assert!(c.kt_enabled());
    assert_eq!(c.effective_sgd().weight_decay, 0.0);
    let literal = TrainConfig { literal_weight_decay: true, ..c.clone() };
    assert_eq!(literal.effective_sgd().weight_decay, 1e-4);
    let no_wr = TrainConfig { lambda4: 0.0, ..c.clone() };
    assert_eq!(no_wr.effective_sgd().weight_decay, 1e-4);
    assert_eq!(TrainConfig { method: Method::Dcnn, ..c.clone() }.task_weights(), (1.0, 0.0));
    assert!(!TrainConfig { method: Method::Dcnn, ..c.clone() }.kt_enabled());
    assert!(TrainConfig { batch_size: 1, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { epochs: 0, ..c.clone() }.validate().is_err());
    assert!(TrainConfig { lambda1: Some(-0.1), ..c.clone() }.validate().is_err());
    let full = TrainConfig::full();
    assert_eq!((full.batch_size, full.epochs, full.sgd.lr, full.sgd.momentum), (256, 2000, 1e-3, 0.99));
    let json = serde_json::to_string(&c).unwrap();
    assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), c);
    let partial: TrainConfig = serde_json::from_str(r#"{"method": "hda", "epochs": 3}"#).unwrap();
    assert_eq!((partial.method, partial.epochs, partial.batch_size), (Method::Hda, 3, 64));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert_eq!("pcp-only".parse::<Method>().unwrap(), Method::PcpOnly);
    assert!("sgd".parse::<Method>().is_err());
}

#[test]
fn metrics_hand_values() {
    let m = compute_metrics(&[[1.0, 2.0, 3.0]], &[[1.0, 2.0, 3.0]], &[2], &[2]).unwrap();
    assert_eq!((m.rmse, m.accuracy), (0.0, 1.0));
    let m = compute_metrics(&[[3.0, 4.0, 0.0]], &[[0.0; 3]], &[0], &[1]).unwrap();
    assert_eq!((m.rmse, m.accuracy), (5.0, 0.0));
    let m = compute_metrics(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0]], &[[0.0; 3]; 2], &[0, 1], &[0, 0]).unwrap();
    assert!((m.rmse - 5f64.sqrt()).abs() < 1e-15);
    assert_eq!(m.accuracy, 0.5);
    assert_eq!(m.errors, vec![1.0, 3.0]);
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 1.0), 4.0);
    assert!(compute_metrics(&[], &[], &[], &[]).is_err());
}

proptest! {
    #[test]
    fn metrics_invariants(errs in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -5.0f64..5.0), 1..40)) {
        let pred: Vec<[f64; 3]> = errs.iter().map(|&(a, b, c)| [a, b, c]).collect();
        let truth = vec![[0.0; 3]; pred.len()];
        let labels: Vec<usize> = (0..pred.len()).map(|i| i % 3).collect();
        let m = compute_metrics(&pred, &truth, &labels, &labels).unwrap();
        prop_assert!(m.rmse >= 0.0 && m.accuracy == 1.0);
        prop_assert!(m.errors.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(m.quantiles.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(m.mean_error <= m.rmse + 1e-12);
    }

    #[test]
    fn normalizer_round_trips(pts in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0, 0.0f64..10.0), 2..20)) {
        let pts: Vec<[f64; 3]> = pts.iter().map(|&(a, b, c)| [a, b, c]).collect();
        let n = CoordNormalizer::fit(&pts).unwrap();
        for p in &pts {
            let back = n.denormalize(n.normalize(*p));
            for a in 0..3 {
                prop_assert!((back[a] - p[a]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn normalizer_hand_values() {
    let n = CoordNormalizer::fit(&[[0.0, 0.0, 0.0], [6.0, 0.0, 0.0]]).unwrap();
    assert_eq!(n.center, [3.0, 0.0, 0.0]);
    // mean squared distance 9, per axis 3
    assert!((n.scale - 3f64.sqrt()).abs() < 1e-15);
    assert_eq!(CoordNormalizer::fit(&[[1.0, 1.0, 1.0]]).unwrap().scale, 1.0);
}

#[test]
fn log_csv_layout() {
    let rows = vec![
        LogRow {
            kind: LogKind::Step,
            epoch: 1,
            step: 1,
            report: Some(semloc_core::loss::LossReport { l_cr: 0.5, total: 0.5, w1: 1.0, ..Default::default() }),
            val_rmse: None,
            val_acc: None,
        },
        LogRow { kind: LogKind::Epoch, epoch: 1, step: 1, report: None, val_rmse: Some(2.0), val_acc: Some(0.25) },
    ];
    let csv = log_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "kind,epoch,step,L_CR,L_PCP,L_loc,L_global,L_WR,w1,w2,lambda3,lambda4,total,val_rmse,val_acc");
    assert_eq!(lines[1], "step,1,1,0.5,0,,,,1,0,0,0,0.5,,");
    assert_eq!(lines[2], "epoch,1,1,,,,,,,,,,,2,0.25");
    assert!(lines.iter().all(|l| l.split(',').count() == 15));
}

#[test]
fn dcnn_training_loss_decreases_on_linear_toy() {
    let fs = linear_toy();
    let split = SplitPlan::for_scenes(10);
    let cfg = TrainConfig {
        epochs: 10,
        sgd: semloc_autograd::SgdConfig { lr: 1e-3, momentum: 0.9, weight_decay: 1e-4 },
        ..toy_config(Method::Dcnn)
    };
    let out = train(&fs, &split, &cfg).unwrap();
    let mut per_epoch = vec![(0.0, 0); cfg.epochs];
    for r in out.log.iter().filter(|r| r.kind == LogKind::Step) {
        let e = &mut per_epoch[r.epoch - 1];
        e.0 += r.report.as_ref().unwrap().l_cr;
        e.1 += 1;
    }
    let means: Vec<f64> = per_epoch.iter().map(|(s, n)| s / *n as f64).collect();
    assert!(means[cfg.epochs - 1] < 0.1 * means[0], "{means:?}");
    assert!(means[cfg.epochs / 2..].iter().all(|&m| m < means[0] / 2.0), "{means:?}");
}

#[test]
fn training_is_deterministic_and_checkpoint_is_best() {
    let fs = toy_features(10, 4);
    let split = SplitPlan::for_scenes(10);
    let cfg = toy_config(Method::Hda);
    let a = train(&fs, &split, &cfg).unwrap();
    let b = train(&fs, &split, &cfg).unwrap();
    assert_eq!(log_csv(&a.log), log_csv(&b.log));
    assert_eq!(a.checkpoint, b.checkpoint);
    let vals: Vec<f64> = a.log.iter().filter_map(|r| r.val_rmse).collect();
    assert_eq!(vals.len(), cfg.epochs);
    assert!(vals.iter().all(|&v| a.best_val.rmse <= v));
    assert_eq!(vals[a.best_epoch - 1], a.best_val.rmse);
    assert_eq!(a.total_steps, cfg.epochs * (SampleView::new(&fs, split.source.clone()).unwrap().len() / 16));
    assert!(a.checkpoint.store.contains("hda.s1") && a.checkpoint.store.contains("hda.s2"));
    // step log carries σ² for HDA
    let first = a.log[0].report.as_ref().unwrap();
    assert_eq!((first.w1, first.w2), (1.0, 1.0));
    assert_eq!(first.lambda3, 0.0);

    let dir = tempfile::tempdir().unwrap();
    a.checkpoint.write(dir.path()).unwrap();
    let back = Checkpoint::read(dir.path()).unwrap();
    assert_eq!(back, a.checkpoint);
    let val = SampleView::new(&fs, split.val.clone()).unwrap();
    assert_eq!(evaluate(&back, &val, 7).unwrap(), a.best_val);
    let other = train(&fs, &split, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(log_csv(&other.log), log_csv(&a.log));
}

#[test]
fn target_labels_never_reach_the_optimizer() {
    let fs = toy_features(10, 4);
    let split = SplitPlan::for_scenes(10);
    let mut scrambled = fs.clone();
    let ids = fs.manifest.source.scene_ids();
    for i in 0..fs.len() {
        if split.target.contains(&ids[i]) {
            scrambled.labels[i] = (scrambled.labels[i] + 1) % 3;
            scrambled.coords[i * 3] += 100.0;
        }
    }
    let cfg = toy_config(Method::Mda);
    let a = train(&fs, &split, &cfg).unwrap();
    let b = train(&scrambled, &split, &cfg).unwrap();
    assert_eq!(log_csv(&a.log), log_csv(&b.log));
}

#[test]
fn mda_without_kt_and_pcp_matches_dcnn_step_for_step() {
    let fs = toy_features(10, 4);
    let split = SplitPlan::for_scenes(10);
    let dcnn = train(&fs, &split, &toy_config(Method::Dcnn)).unwrap();
    let cfg = TrainConfig {
        lambda1: Some(1.0),
        lambda2: Some(0.0),
        lambda3: Some(0.0),
        kt: Some(true),
        ..toy_config(Method::Mda)
    };
    let mda = train(&fs, &split, &cfg).unwrap();
    let steps = |o: &TrainOutcome| -> Vec<(f64, f64)> {
        o.log.iter().filter_map(|r| r.report.as_ref().map(|p| (p.l_cr, p.total))).collect()
    };
    assert_eq!(steps(&dcnn), steps(&mda));
    assert!(mda.log.iter().filter_map(|r| r.report.as_ref()).all(|p| p.l_loc.is_some()));
}

#[test]
fn pcp_only_keeps_the_most_accurate_epoch() {
    let fs = toy_features(10, 4);
    let out = train(&fs, &SplitPlan::for_scenes(10), &toy_config(Method::PcpOnly)).unwrap();
    let accs: Vec<f64> = out.log.iter().filter_map(|r| r.val_acc).collect();
    assert!(accs.iter().all(|&a| out.best_val.accuracy >= a));
    assert_eq!(accs.iter().position(|&a| a == out.best_val.accuracy).unwrap() + 1, out.best_epoch);
}

#[test]
fn divergent_training_reports_the_step() {
    let fs = toy_features(10, 4);
    let cfg = TrainConfig {
        sgd: semloc_autograd::SgdConfig { lr: 1e12, momentum: 0.0, weight_decay: 0.0 },
        ..toy_config(Method::Dcnn)
    };
    match train(&fs, &SplitPlan::for_scenes(10), &cfg) {
        Err(e @ Error::NonFiniteStep { .. }) => assert!(e.is_non_finite()),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn training_rejects_unusable_inputs() {
    let fs = toy_features(10, 4);
    let split = SplitPlan::for_scenes(10);
    let huge = TrainConfig { batch_size: 10_000, ..toy_config(Method::Dcnn) };
    assert!(matches!(train(&fs, &split, &huge), Err(Error::InvalidConfig(_))));
    assert!(train(&fs, &SplitPlan::desk(), &toy_config(Method::Dcnn)).is_err());
}

#[test]
fn single_cell_ablation_matches_direct_training() {
    let fs = toy_features(10, 4);
    let split = SplitPlan::for_scenes(10);
    let base = toy_config(Method::Dcnn);
    let grid = AblationGrid {
        base: base.clone(),
        split: None,
        seeds: vec![9],
        cells: vec![AblationCell::new("cr_only", Method::Dcnn, false)],
        baseline: "cr_only".into(),
        pcp_baseline: "pcp_only".into(),
    };
    let table = run_ablation(&fs, &split, &grid).unwrap();
    assert_eq!(table.rows.len(), 1);
    let row = &table.rows[0];
    let direct = train(&fs, &split, &TrainConfig { seed: 9, kt: Some(false), ..base }).unwrap();
    let test = SampleView::new(&fs, split.target.clone()).unwrap();
    let m = evaluate(&direct.checkpoint, &test, 64).unwrap();
    assert_eq!((row.rmse_mean, row.acc_mean, row.rmse_std), (m.rmse, m.accuracy, 0.0));
    assert_eq!((row.loc_gain, row.pcp_gain), (None, None));
    let csv = table.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], ABLATION_COLUMNS.join(","));
    assert!(lines[1].starts_with("cr_only,dcnn,false,1,0,1,"));
    assert!(lines[1].ends_with(",,"));
}

#[test]
fn ablation_gains_follow_table_convention() {
    let fs = toy_features(10, 4);
    let split = SplitPlan::for_scenes(10);
    let mut grid = AblationGrid::table();
    grid.base = TrainConfig { epochs: 2, ..toy_config(Method::Dcnn) };
    grid.seeds = vec![1, 2];
    grid.cells.retain(|c| ["cr_only", "pcp_only", "mda", "hda"].contains(&c.name.as_str()));
    let t = run_ablation(&fs, &split, &grid).unwrap();
    let (cr, pcp) = (t.row("cr_only").unwrap(), t.row("pcp_only").unwrap());
    assert_eq!((cr.loc_gain, pcp.pcp_gain, pcp.loc_gain, cr.pcp_gain), (None, None, None, None));
    for name in ["mda", "hda"] {
        let r = t.row(name).unwrap();
        assert_eq!(r.loc_gain, Some((cr.rmse_mean - r.rmse_mean) / r.rmse_mean));
        assert_eq!(r.pcp_gain, Some((r.acc_mean - pcp.acc_mean) / pcp.acc_mean));
        let v: Vec<f64> = r.runs.iter().map(|s| s.test_rmse).collect();
        let mean = (v[0] + v[1]) / 2.0;
        assert!((r.rmse_mean - mean).abs() < 1e-15);
        assert!((r.rmse_std - (v[0] - v[1]).abs() / 2f64.sqrt()).abs() < 1e-12);
    }
    assert_eq!(t.row("hda").unwrap().to_owned().cell.method, Method::Hda);
}

#[test]
fn gradcheck_of_full_objectives() {
    for m in [Method::Mda, Method::Hda] {
        let r = gradcheck_objective(m, 1).unwrap();
        assert!(r.max_rel_error < GRADCHECK_TOL, "{m}: {r:?}");
        assert!(r.entries_checked > 200);
    }
    let hda = gradcheck_objective(Method::Hda, 2).unwrap();
    let mda = gradcheck_objective(Method::Mda, 2).unwrap();
    assert_eq!(hda.entries_checked, mda.entries_checked + 2);
    assert!(gradcheck_objective(Method::Dcnn, 1).is_err());
}
