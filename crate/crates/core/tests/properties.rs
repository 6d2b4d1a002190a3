use atphonon::algebra::*;
use atphonon::model::{build_rwa_hamiltonian, CouplingOrder, SidebandRegime, SystemConfig};
use atphonon::sequence::{Demolition, DetectionModel};
use ndarray::Array2;
use num_complex::Complex64 as C64;
use proptest::prelude::*;

fn complex_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<C64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), rows * cols)
        .prop_map(move |v| Array2::from_shape_fn((rows, cols), |(i, j)| C64::new(v[i * cols + j].0, v[i * cols + j].1)))
}

fn square(max: usize) -> impl Strategy<Value = Array2<C64>> {
    (1..=max).prop_flat_map(|n| complex_matrix(n, n))
}

fn hermitian(max: usize) -> impl Strategy<Value = Operator> {
    square(max).prop_map(|m| {
        let h = &m + &m.t().mapv(|z| z.conj());
        Operator::new(h).unwrap()
    })
}

fn density(nf: usize) -> impl Strategy<Value = DensityMatrix> {
    complex_matrix(4 * nf, 4 * nf).prop_map(|g| {
        let m = g.dot(&g.t().mapv(|z| z.conj()));
        let tr = m.diag().sum();
        DensityMatrix::new(m.mapv(|z| z / tr)).unwrap()
    })
}

fn op(m: Array2<C64>) -> Operator {
    Operator::new(m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tensor_commutes_with_adjoint(a in square(4), b in square(5)) {
        let (a, b) = (op(a), op(b));
        let lhs = tensor(&a, &b).dagger();
        let rhs = tensor(&a.dagger(), &b.dagger());
        prop_assert!((&lhs - &rhs).frobenius_norm() == 0.0);
    }

    #[test]
    fn tensor_mixed_product(n in 1usize..4, m in 1usize..4, seed in any::<u64>()) {
        let gen = |k: u64, d: usize| {
            op(Array2::from_shape_fn((d, d), |(i, j)| {
                let x = ((seed ^ k).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left((i * d + j) as u32 % 64) % 1000) as f64;
                C64::new(x / 500.0 - 1.0, (i as f64 - j as f64) * 0.1)
            }))
        };
        let (a, c) = (gen(1, n), gen(2, n));
        let (b, d) = (gen(3, m), gen(4, m));
        let lhs = tensor(&a, &b).dot(&tensor(&c, &d));
        let rhs = tensor(&a.dot(&c), &b.dot(&d));
        prop_assert!((&lhs - &rhs).frobenius_norm() <= 1e-12 * (1.0 + rhs.frobenius_norm()));
    }

    #[test]
    fn canonical_commutator_holds_below_truncation(nf in 2usize..30) {
        let a = annihilation(nf).unwrap();
        let comm = &a.dot(&a.dagger()) - &a.dagger().dot(&a);
        for i in 0..nf - 1 {
            for j in 0..nf - 1 {
                let expected = if i == j { 1.0 } else { 0.0 };
                prop_assert!((comm.get(i, j) - C64::new(expected, 0.0)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn detection_is_a_valid_instrument(
        rho in (2usize..5).prop_flat_map(density),
        eps_bright in 0.0f64..0.3,
        eps_dark in 0.0f64..0.3,
        scramble in prop::option::of(0.0f64..2.0),
    ) {
        let space = HilbertSpec::new(rho.dim() / 4).unwrap();
        let demolition = scramble.map_or(Demolition::Preserve, |n_bar_reset| Demolition::ScrambleMotion { n_bar_reset });
        let model = DetectionModel { eps_bright, eps_dark, demolition };
        let br = model.branches(&rho, &space).unwrap();
        prop_assert!((0.0..=1.0).contains(&br.p_bright));
        let lit = rho.bright_population(&space).unwrap();
        let expected = (1.0 - eps_dark) * lit + eps_bright * (1.0 - lit);
        prop_assert!((br.p_bright - expected).abs() < 1e-12);
        for state in [&br.bright_state, &br.dark_state].into_iter().flatten() {
            prop_assert!(state.validate().is_ok());
        }
    }

    #[test]
    fn rwa_hamiltonian_is_hermitian(
        eta in 0.0f64..0.3,
        omega_c in 0.0f64..1e6,
        omega_p in 0.0f64..1e5,
        delta_p in -1e5f64..1e5,
        phi_p in -3.2f64..3.2,
        phi_c in -3.2f64..3.2,
        exact in any::<bool>(),
        regime in prop_oneof![Just(SidebandRegime::Bsb), Just(SidebandRegime::Rsb), Just(SidebandRegime::Carrier)],
    ) {
        let mut cfg = SystemConfig::bsb_preset();
        cfg.fock_dim = 8;
        (cfg.eta, cfg.omega_c, cfg.omega_p, cfg.delta_p, cfg.phi_p, cfg.phi_c) = (eta, omega_c, omega_p, delta_p, phi_p, phi_c);
        let order = if exact { CouplingOrder::Exact } else { CouplingOrder::FirstOrder };
        let h = build_rwa_hamiltonian(&cfg, regime, order).unwrap();
        let scale = 1.0 + omega_c + omega_p;
        prop_assert!(h.hermitian_deviation() <= 1e-12 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn eigendecomposition_reconstructs(h in hermitian(200)) {
        let eig = eig_hermitian(&h).unwrap();
        let back = eig.reconstruct_with(|l| C64::new(l, 0.0));
        let err = (h.matrix() - &back).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-8 * h.frobenius_norm());
        prop_assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
    }
}
