use hsvr_core::gramians::{
    controllability_gramian_block, lyapunov_residual, observability_gramian_block, solve_lyapunov_naive,
};
use hsvr_core::lti::{
    convolve, impulse_response, realize, simulate_sequential, to_rotation_form, DenseSsm, RotationSsm,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rel_fro(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn random_layer(q: usize, p: usize, rng: &mut ChaCha8Rng) -> RotationSsm {
    RotationSsm::new(
        (0..q).map(|_| rng.random_range(-3.0..3.0)).collect(),
        (0..q).map(|_| rng.random_range(-3.0..3.0)).collect(),
        DMatrix::from_fn(2 * q, p - 1, |_, _| rng.random_range(-1.0..1.0)),
        DMatrix::from_fn(p, 2 * q, |_, _| rng.random_range(-1.0..1.0)),
        (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Dense stable system with spectral radius `radius` and diagonal D.
fn random_dense(n: usize, m: usize, radius: f64, rng: &mut ChaCha8Rng) -> DenseSsm {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let scale = radius / hsvr_core::linalg::spectral_radius(&a);
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0)));
    DenseSsm::new_stable(
        a * scale,
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0)),
        DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0)),
        d,
    )
    .unwrap()
}

fn power_iteration_radius(a: &DMatrix<f64>) -> f64 {
    // ‖A^k‖^{1/k} converges to the spectral radius
    let mut m = a.clone();
    let mut log_scale = 0.0;
    let k = 2048;
    for _ in 0..11 {
        m = &m * &m;
        let s = m.norm();
        log_scale = 2.0 * log_scale + s.ln();
        m /= s;
    }
    (log_scale / k as f64).exp()
}

#[test]
fn realized_radius_matches_power_iteration() {
    let layer = RotationSsm::random(4, 3, 7);
    let dense = realize(&layer);
    let max_rho = layer.rho().iter().map(|r| r.abs()).fold(0.0, f64::max);
    assert!(max_rho < 1.0);
    assert!((power_iteration_radius(&dense.a) - max_rho).abs() < 1e-2);
    assert!((dense.spectral_radius() - max_rho).abs() < 1e-12);
}

#[test]
fn simulation_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sys = random_dense(4, 2, 0.9, &mut rng);
    let u = DMatrix::from_fn(16, 2, |_, _| rng.random_range(-1.0..1.0));
    let y = simulate_sequential(&sys, &u).unwrap();
    let h = impulse_response(&sys, 17);
    assert!(rel_fro(&convolve(&h, &u).unwrap(), &y) < 1e-12);
}

#[test]
fn rotation_form_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let sys = random_dense(6, 2, 0.95, &mut rng);
        let form = to_rotation_form(&sys, 1e-10).unwrap();
        let a = impulse_response(&sys, 32);
        let b = impulse_response(&realize(&form.ssm), 32);
        assert!(a.distance(&b) <= 1e-8 * a.norm(), "distance {}", a.distance(&b));
    }
}

#[test]
fn block_gramians_match_oracle_with_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = random_layer(4, 3, &mut rng);
    let dense = realize(&layer);
    let p = controllability_gramian_block(&layer).unwrap();
    let q = observability_gramian_block(&layer).unwrap();
    let bbt = &dense.b * dense.b.transpose();
    let ctc = dense.c.transpose() * &dense.c;
    assert!(rel_fro(&p, &solve_lyapunov_naive(&dense.a, &bbt).unwrap()) <= 1e-10);
    assert!(rel_fro(&q, &solve_lyapunov_naive(&dense.a.transpose(), &ctc).unwrap()) <= 1e-10);
    assert!(lyapunov_residual(&dense.a, &p, &bbt, false) / bbt.norm() <= 1e-10);
    assert!(lyapunov_residual(&dense.a, &q, &ctc, true) / ctc.norm() <= 1e-10);
}

#[test]
fn gramian_residual_at_large_order() {
    let layer = RotationSsm::random(256, 4, 17);
    let dense = realize(&layer);
    let p = controllability_gramian_block(&layer).unwrap();
    let bbt = &dense.b * dense.b.transpose();
    assert_eq!(&p, &p.transpose());
    assert!(lyapunov_residual(&dense.a, &p, &bbt, false) / bbt.norm() <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn realize_is_always_stable(
        rho in prop::collection::vec(-10.0f64..10.0, 1..6),
        seed in any::<u64>(),
    ) {
        let q = rho.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = RotationSsm::new(
            rho.clone(),
            (0..q).map(|_| rng.random_range(-10.0..10.0)).collect(),
            DMatrix::zeros(2 * q, 1),
            DMatrix::from_fn(2, 2 * q, |_, _| rng.random_range(-1.0..1.0)),
            vec![0.0; 2],
        ).unwrap();
        let dense = realize(&layer);
        let max_rho = rho.iter().map(|r| r.tanh().abs()).fold(0.0, f64::max);
        prop_assert!(dense.spectral_radius() < 1.0);
        prop_assert!((dense.spectral_radius() - max_rho).abs() <= 1e-12);
        for i in 0..q {
            prop_assert_eq!(dense.b[(2 * i, 0)], 1.0);
            prop_assert_eq!(dense.b[(2 * i + 1, 0)], 0.0);
        }
    }

    #[test]
    fn simulation_is_a_convolution(n in 1usize..=8, len in 1usize..=64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = random_dense(n, 2, 0.9, &mut rng);
        let u = DMatrix::from_fn(len, 2, |_, _| rng.random_range(-1.0..1.0));
        let y = simulate_sequential(&sys, &u).unwrap();
        let conv = convolve(&impulse_response(&sys, len + 1), &u).unwrap();
        prop_assert!(rel_fro(&conv, &y) <= 1e-10);
    }

    #[test]
    fn impulse_response_is_similarity_invariant(n in 2usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = random_dense(n, 2, 0.9, &mut rng);
        let t = DMatrix::from_fn(n, n, |i, j| if i == j { 2.0 } else { 0.0 } + rng.random_range(-0.5..0.5));
        let other = sys.similarity(&t).unwrap();
        let a = impulse_response(&sys, 64);
        let b = impulse_response(&other, 64);
        prop_assert!(a.distance(&b) <= 1e-9 * a.norm());
    }

    #[test]
    fn impulse_response_decays_geometrically(n in 2usize..=6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sys = random_dense(n, 1, 0.7, &mut rng);
        let h = impulse_response(&sys, 200);
        // ‖h_k‖ ≤ K r^k for any r above the spectral radius
        let tail = h.h[199].norm();
        prop_assert!(tail <= 1e3 * h.h[1].norm().max(1e-300) * 0.75f64.powi(198));
    }

    #[test]
    fn block_solver_matches_oracle(q in 1usize..=8, p in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = random_layer(q, p, &mut rng);
        let dense = realize(&layer);
        let pb = controllability_gramian_block(&layer).unwrap();
        let qb = observability_gramian_block(&layer).unwrap();
        let pn = solve_lyapunov_naive(&dense.a, &(&dense.b * dense.b.transpose())).unwrap();
        let qn = solve_lyapunov_naive(&dense.a.transpose(), &(dense.c.transpose() * &dense.c)).unwrap();
        prop_assert!(rel_fro(&pb, &pn) <= 1e-10);
        prop_assert!(rel_fro(&qb, &qn) <= 1e-10);
        prop_assert_eq!(&pb, &pb.transpose());
        prop_assert_eq!(&qb, &qb.transpose());
    }
}
