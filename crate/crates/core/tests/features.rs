use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semloc_core::features::*;
use semloc_core::geometry::Vec3;
use semloc_core::sim::*;
use std::f64::consts::PI;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn random_cfr(m: usize, k: usize, rng: &mut impl Rng) -> CfrMatrix {
    let data = (0..m * k).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
    CfrMatrix { m, k, data }
}

fn naive_mul(a: &CfrMatrix, b: &CfrMatrix) -> CfrMatrix {
    CfrMatrix::from_fn(a.m, b.k, |i, j| (0..a.k).map(|t| a.get(i, t) * b.get(t, j)).sum())
}

fn max_dev_from_identity(u: &CfrMatrix) -> f64 {
    let uh = CfrMatrix::from_fn(u.k, u.m, |i, j| u.get(j, i).conj());
    let p = naive_mul(&uh, u);
    let mut worst: f64 = 0.0;
    for i in 0..p.m {
        for j in 0..p.k {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((p.get(i, j) - c(want, 0.0)).norm());
        }
    }
    worst
}

#[test]
fn dft_small_cases() {
    assert!((unitary_dft(1).get(0, 0) - c(1.0, 0.0)).norm() < 1e-15);
    let f2 = unitary_dft(2);
    let s = 1.0 / 2f64.sqrt();
    for (i, j, v) in [(0, 0, s), (0, 1, s), (1, 0, s), (1, 1, -s)] {
        assert!((f2.get(i, j) - c(v, 0.0)).norm() < 1e-15);
    }
    assert!((shifted_dft(1).get(0, 0) - c(1.0, 0.0)).norm() < 1e-15);
    assert!((shifted_dft(2).get(1, 0) - c(-s, 0.0)).norm() < 1e-15);
}

#[test]
fn dft_matrices_are_unitary() {
    for n in 1..=64 {
        assert!(max_dev_from_identity(&unitary_dft(n)) < 1e-12, "unitary_dft({n})");
        assert!(max_dev_from_identity(&shifted_dft(n)) < 1e-12, "shifted_dft({n})");
    }
}

/// `(1/√(MK))·(V_yᴴ ⊗ V_zᴴ)·H·F*` with explicit matrices.
fn adp_oracle(h: &CfrMatrix, array: &ArrayGeometry) -> CfrMatrix {
    let (my, mz) = (array.m_y, array.m_z);
    let vy = shifted_dft(my);
    let vz = shifted_dft(mz);
    let m = my * mz;
    let kron = CfrMatrix::from_fn(m, m, |r, col| {
        let (a, b) = (r / mz, r % mz);
        let (y, z) = (col / mz, col % mz);
        vy.get(y, a).conj() * vz.get(z, b).conj()
    });
    let f = unitary_dft(h.k);
    let fconj = CfrMatrix::from_fn(h.k, h.k, |i, j| f.get(i, j).conj());
    let mut g = naive_mul(&naive_mul(&kron, h), &fconj);
    let s = 1.0 / ((m * h.k) as f64).sqrt();
    g.data.iter_mut().for_each(|z| *z *= s);
    g
}

#[test]
fn adp_matches_explicit_kronecker_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (my, mz, k) in [(2, 3, 5), (4, 4, 8), (1, 3, 7), (3, 1, 2), (8, 8, 16)] {
        let array = ArrayGeometry::new(my, mz);
        let h = random_cfr(my * mz, k, &mut rng);
        let want = adp_oracle(&h, &array);
        let got = AdpTransform::new(array, k).g(&h).unwrap();
        let scale = want.data.iter().map(|z| z.norm()).fold(0.0, f64::max);
        for (a, b) in got.data.iter().zip(&want.data) {
            assert!((a - b).norm() / scale < 1e-12);
        }
        let x = adp(&h, &array).unwrap();
        for (xv, g) in x.data.iter().zip(&want.data) {
            assert!((xv - g.norm_sqr()).abs() <= 1e-12 * scale * scale);
        }
    }
}

#[test]
fn adp_frobenius_follows_prefactor() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let array = ArrayGeometry::new(8, 8);
    for _ in 0..10 {
        let h = random_cfr(64, 64, &mut rng);
        let g = AdpTransform::new(array, 64).g(&h).unwrap();
        let want = h.frobenius() / (64.0f64 * 64.0).sqrt();
        assert!((g.frobenius() - want).abs() / want < 1e-12);
    }
}

fn grid_path(s: &Scenario, n0: usize) -> CfrMatrix {
    let dt = 1.0 / (s.n_subcarriers as f64 * s.subcarrier_spacing());
    let mpcs = MpcSet {
        paths: vec![Mpc { gain: c(0.5, 0.2), azimuth: 0.0, elevation: PI / 2.0, delay: n0 as f64 * dt }],
    };
    synth_cfr(&mpcs, s, &s.array).unwrap()
}

#[test]
fn grid_aligned_path_fills_one_bin_and_shifts_with_delay() {
    let s = Scenario::desk();
    for n0 in [0usize, 1, 5, 40] {
        let x = adp(&grid_path(&s, n0), &s.array).unwrap();
        let total: f64 = x.data.iter().sum();
        let (best, peak) = x
            .data
            .iter()
            .enumerate()
            .fold((0, 0.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert!(peak / total >= 0.99);
        let (row, col) = (best / 64, best % 64);
        assert_eq!(col, n0);
        assert_eq!(row, 4 * 8 + 4);
        for (i, &v) in x.data.iter().enumerate() {
            if i != best {
                assert!(v / total <= 1e-20, "bin {i} holds {}", v / total);
            }
        }
    }
}

#[test]
fn all_ones_cfr_is_one_bin() {
    let array = ArrayGeometry::new(4, 2);
    let h = CfrMatrix::from_fn(8, 16, |_, _| c(1.0, 0.0));
    let x = adp(&h, &array).unwrap();
    let total: f64 = x.data.iter().sum();
    let peak = x.data.iter().cloned().fold(0.0, f64::max);
    assert!(peak / total >= 0.99);
    assert!(x.data.iter().filter(|&&v| v / total > 1e-20).count() == 1);
}

#[test]
fn adp_rejects_shape_mismatch() {
    let h = CfrMatrix::zeros(6, 4);
    assert!(adp(&h, &ArrayGeometry::new(2, 2)).is_err());
}

proptest! {
    #[test]
    fn adp_is_nonnegative(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_cfr(6, 9, &mut rng);
        let x = adp(&h, &ArrayGeometry::new(3, 2)).unwrap();
        prop_assert!(x.data.iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn normalization_is_idempotent(seed in 0u64..1000, scheme in 0usize..4, kind in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_cfr(4, 6, &mut rng);
        let fp = match kind {
            0 => adp(&h, &ArrayGeometry::new(2, 2)).unwrap(),
            1 => scm(&h),
            _ => rcsi(&h),
        };
        let s = [NormalizationScheme::Aw, NormalizationScheme::Sw, NormalizationScheme::Mw, NormalizationScheme::Na][scheme];
        let once = normalize(&fp, s);
        let twice = normalize(&once, s);
        for (a, b) in once.data.iter().zip(&twice.data) {
            prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300));
        }
    }
}

fn hermitian_eigs(cm: &Fingerprint) -> Vec<f64> {
    let m = cm.shape[1];
    let mat = DMatrix::from_fn(m, m, |i, j| c(cm.data[i * m + j], cm.data[m * m + i * m + j]));
    SymmetricEigen::new(mat).eigenvalues.iter().copied().collect()
}

#[test]
fn scm_of_identity_is_scaled_identity() {
    let h = CfrMatrix::from_fn(5, 5, |i, j| c(if i == j { 1.0 } else { 0.0 }, 0.0));
    let cm = scm(&h);
    for i in 0..5 {
        for j in 0..5 {
            let want = if i == j { 0.2 } else { 0.0 };
            assert!((cm.data[i * 5 + j] - want).abs() < 1e-15);
            assert_eq!(cm.data[25 + i * 5 + j], 0.0);
        }
    }
}

#[test]
fn scm_is_hermitian_psd_with_bounded_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (m, k) in [(6, 3), (4, 9), (8, 8)] {
        let cm = scm(&random_cfr(m, k, &mut rng));
        for i in 0..m {
            for j in 0..m {
                assert!((cm.data[i * m + j] - cm.data[j * m + i]).abs() < 1e-14);
                assert!((cm.data[m * m + i * m + j] + cm.data[m * m + j * m + i]).abs() < 1e-14);
            }
        }
        let eig = hermitian_eigs(&cm);
        assert!(eig.iter().all(|&e| e >= -1e-10));
        let top = eig.iter().cloned().fold(0.0, f64::max);
        assert!(eig.iter().filter(|&&e| e > 1e-10 * top).count() <= m.min(k));
    }
}

#[test]
fn rcsi_planes_hold_real_and_imaginary_parts() {
    let h = CfrMatrix::from_fn(2, 3, |i, j| c(i as f64 + 0.5, -(j as f64)));
    let r = rcsi(&h);
    assert_eq!(r.shape, vec![2, 2, 3]);
    assert_eq!(r.data[4], 1.5);
    assert_eq!(r.data[6 + 5], -2.0);
}

#[test]
fn normalization_schemes() {
    let fp = Fingerprint {
        kind: FingerprintKind::Adp,
        shape: vec![3, 2],
        data: vec![2.0, -4.0, 0.0, 0.0, 1.0, 0.5],
    };
    assert_eq!(normalize(&fp, NormalizationScheme::Na), fp);
    assert_eq!(normalize(&fp, NormalizationScheme::Aw).data, vec![0.5, -1.0, 0.0, 0.0, 1.0, 0.5]);
    assert_eq!(normalize(&fp, NormalizationScheme::Sw).data, vec![1.0, -1.0, 0.0, 0.0, 0.5, 0.125]);
    assert_eq!(normalize(&fp, NormalizationScheme::Mw).data, vec![0.5, -1.0, 0.0, 0.0, 0.25, 0.125]);
    // antenna-wise pools both planes of a re/im tensor
    let two = Fingerprint {
        kind: FingerprintKind::Rcsi,
        shape: vec![2, 1, 2],
        data: vec![1.0, 2.0, -8.0, 4.0],
    };
    assert_eq!(normalize(&two, NormalizationScheme::Aw).data, vec![0.125, 0.25, -1.0, 0.5]);
}

#[test]
fn feature_set_round_trip() {
    let mut s = Scenario::desk();
    s.array = ArrayGeometry::new(4, 2);
    s.n_subcarriers = 16;
    s.ue_grid = UeGrid::Rect { origin: Vec3::new(14.0, 27.9, 1.5), spacing: 4.0, nx: 6, ny: 2 };
    let ds = generate_dataset(&s, 2, 5).unwrap();
    for kind in [FingerprintKind::Adp, FingerprintKind::Scm, FingerprintKind::Rcsi] {
        let fs = FeatureSet::extract(&ds, kind, NormalizationScheme::Aw).unwrap();
        let per: usize = fs.manifest.sample_shape.iter().product();
        assert_eq!(fs.data.len(), per * ds.len());
        let dir = tempfile::tempdir().unwrap();
        fs.write(dir.path()).unwrap();
        assert_eq!(FeatureSet::read(dir.path()).unwrap(), fs);
    }
    let fs = FeatureSet::extract(&ds, FingerprintKind::Adp, NormalizationScheme::Aw).unwrap();
    for row in fs.data.chunks_exact(16) {
        let mx = row.iter().cloned().fold(0.0f32, f32::max);
        assert!((mx - 1.0).abs() < 1e-6 || mx == 0.0);
    }
}

#[test]
fn enum_text_round_trip() {
    for k in ["adp", "scm", "rcsi"] {
        assert_eq!(k.parse::<FingerprintKind>().unwrap().to_string(), k);
    }
    for n in ["aw", "sw", "mw", "na"] {
        assert_eq!(n.parse::<NormalizationScheme>().unwrap().to_string(), n);
    }
    assert!("xyz".parse::<NormalizationScheme>().is_err());
}
