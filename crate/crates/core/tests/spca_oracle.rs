mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;

use common::*;
use iep_core::linalg::svd;
use iep_core::spca::{affinity, center, first_pc, sign_correct, stereographic, CompressedSet};
use iep_core::transfer::student_pc;
use iep_core::Tensor;

#[test]
fn ipca_tracks_full_batch_pca() {
    let out = ipca_vs_pca(256, 32, 64, 50, 1);
    assert!(out.spectral_gap >= 2.0, "test data lost its gap: {}", out.spectral_gap);
    assert!(out.max_angle_deg < 5.0, "max principal angle {:.3}°", out.max_angle_deg);
}

#[test]
fn ipca_converges_on_other_draws() {
    for seed in 2..5 {
        let out = ipca_vs_pca(256, 16, 32, 40, seed);
        assert!(out.max_angle_deg < 5.0, "seed {seed}: {:.3}°", out.max_angle_deg);
    }
}

#[test]
fn stereographic_identities_hold() {
    let out = stereographic_identities(32, 10_000, 7);
    assert!(out.center_err < 1e-12, "{}", out.center_err);
    assert!(out.perpendicular_err < 1e-12, "{}", out.perpendicular_err);
    assert!(out.max_abs_dot < 1e-9, "{}", out.max_abs_dot);
}

#[test]
fn our_svd_agrees_with_nalgebra() {
    let mut r = rng(3);
    for (rows, cols) in [(40, 6), (6, 40), (9, 9), (200, 3), (3, 1)] {
        let t = random_tensor(&[rows, cols], &mut r);
        let ours = svd(&t).unwrap();
        let theirs = to_dmatrix(&t).svd(false, false).singular_values;
        let mut theirs: Vec<f64> = theirs.iter().copied().collect();
        theirs.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in ours.s.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-10 * theirs[0], "{rows}x{cols}: {a} vs {b}");
        }
        // reconstruction
        let (u, vt) = (to_dmatrix(&ours.u), to_dmatrix(&ours.vt));
        let rec = u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(ours.s.clone())) * vt;
        assert!((rec - to_dmatrix(&t)).abs().max() < 1e-10);
    }
}

/// First right singular vector by power iteration on `FᵀF`, sign-fixed by
/// the max+min rule.
fn power_first_pc(f: &DMatrix<f64>) -> Vec<f64> {
    let g = f.transpose() * f;
    let mut v = nalgebra::DVector::from_element(f.ncols(), 1.0);
    for _ in 0..5000 {
        v = &g * &v;
        v /= v.norm();
    }
    sign_correct(v.as_slice())
}

#[test]
fn first_pc_matches_power_iteration() {
    let mut r = rng(11);
    for _ in 0..10 {
        let t = random_tensor(&[30, 8], &mut r);
        let ours = first_pc(&t).unwrap();
        let oracle = power_first_pc(&to_dmatrix(&t));
        for (a, b) in ours.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{ours:?} vs {oracle:?}");
        }
        let s = ours.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + ours.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(s >= 0.0);
    }
}

fn unit(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter_map("non-zero", |v| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (n > 1e-3).then(|| v.iter().map(|x| x / n).collect())
    })
}

proptest! {
    #[test]
    fn stereographic_lands_on_the_plane(p in unit(12)) {
        let o = center(12);
        prop_assume!(iep_core::tensor::dot(&p, &o) > -0.99);
        let q = stereographic(&p, &o).unwrap();
        let scale = q.iter().map(|x| x.abs()).fold(1.0f64, f64::max);
        prop_assert!(iep_core::tensor::dot(&q, &o).abs() / scale < 1e-9);
    }

    #[test]
    fn affinity_ignores_positive_row_scales(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 5),
        scales in prop::collection::vec(0.1f64..50.0, 5),
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-2));
        let c = Tensor::from_rows(&rows).unwrap();
        let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, k)| r.iter().map(|x| x * k).collect()).collect();
        let a = affinity(&CompressedSet { layer: 0, c }).a;
        let b = affinity(&CompressedSet { layer: 0, c: Tensor::from_rows(&scaled).unwrap() }).a;
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn student_descriptor_ignores_map_scale(
        data in prop::collection::vec(-1.0f64..1.0, 24),
        k in 0.01f64..100.0,
    ) {
        let f = Tensor::new(&[6, 4], data.clone()).unwrap();
        let g = Tensor::new(&[6, 4], data.iter().map(|x| x * k).collect()).unwrap();
        let d = svd(&f).unwrap();
        // near-degenerate leading singular values make the direction ill-posed
        prop_assume!(d.s[0] - d.s[1] > 1e-3 * d.s[0]);
        let (p, q) = (student_pc(&f).unwrap(), student_pc(&g).unwrap());
        let s = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + p.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(s.abs() > 1e-6);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
