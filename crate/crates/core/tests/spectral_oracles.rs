mod common;

use common::*;
use proptest::prelude::*;
use vibe_core::feature_io::{synth_point_cloud, CloudKind};
use vibe_core::spectral::{build_affinity, nystrom_diffusion_map, solve_diffusion_map, Extender};

#[test]
fn extension_reproduces_training_eigenvectors() {
    let x = synth_point_cloud(CloudKind::TwoArcs, 40, 0.02, 4).unwrap().into_tokens();
    let g = build_affinity(&x, None).unwrap();
    let map = solve_diffusion_map(&g, 6, 1.0).unwrap();
    let ext = Extender::new(&map, g.sigma_sq(), &x).unwrap();
    for i in 0..x.nrows() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let psi = ext.psi(&row).unwrap();
        for k in 0..6 {
            assert!((psi[k] - map.eigenvectors()[(i, k)]).abs() < 1e-9, "token {i} column {k}");
        }
    }
}

#[test]
fn nystrom_with_every_anchor_matches_exact_map() {
    let x = synth_point_cloud(CloudKind::SwissRoll, 60, 0.0, 8).unwrap().into_tokens();
    let g = build_affinity(&x, None).unwrap();
    let exact = solve_diffusion_map(&g, 5, 1.0).unwrap();
    let approx = nystrom_diffusion_map(&x, None, 60, 5, 1.0, 3).unwrap();
    assert!((approx.map.eigenvalues() - exact.eigenvalues()).amax() < 1e-8);
    for k in 1..5 {
        assert!(column_sign_error(approx.map.eigenvectors(), exact.eigenvectors(), k) < 1e-6, "column {k}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn eigenpairs_agree_with_dense_oracle(seed in 0u64..1000, n in 6usize..20) {
        let x = synth_point_cloud(CloudKind::Circle, n, 0.3, seed).unwrap().into_tokens();
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, n, 1.0).unwrap();
        let (vals, _) = dense_generalized(&g);
        for k in 0..n {
            prop_assert!((map.eigenvalues()[k] - vals[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn diffusion_distance_matches_walk_powers(seed in 0u64..1000, t in 1u32..4) {
        let x = synth_point_cloud(CloudKind::SwissRoll, 10, 0.1, seed).unwrap().into_tokens();
        let g = build_affinity(&x, None).unwrap();
        let map = solve_diffusion_map(&g, 10, t as f64).unwrap();
        let oracle = random_walk_distance(&g, t, 0, 9);
        let got = vibe_core::spectral::diffusion_distance(&map, 0, 9);
        prop_assert!((got - oracle).abs() <= 1e-6 * oracle);
    }
}
