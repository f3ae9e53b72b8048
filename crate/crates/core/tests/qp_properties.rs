use edgewbc_core::check::{enumerate_optimum, random_qp};
use edgewbc_core::qpsolver::{self, kkt_report};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64, n: usize, k: usize) -> edgewbc_core::qpsolver::LeastSquaresQp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_qp(&mut rng, n, k)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn optimum_matches_enumeration(seed in any::<u64>(), n in 2usize..=20, k in 1usize..=10) {
        let qp = instance(seed, n, k);
        let Some((y_ref, obj_ref)) = enumerate_optimum(&qp) else { return Ok(()) };
        let sol = qpsolver::solve(&qp, None).unwrap();
        prop_assert!((&sol.y - &y_ref).amax() <= 1e-5);
        prop_assert!((sol.objective - obj_ref).abs() <= 1e-6 * (1.0 + obj_ref.abs()));
    }

    #[test]
    fn optimum_satisfies_kkt(seed in any::<u64>(), n in 2usize..=20, k in 1usize..=10) {
        let qp = instance(seed, n, k);
        let sol = qpsolver::solve(&qp, None).unwrap();
        let r = kkt_report(&qp, &sol);
        prop_assert!(r.stationarity <= 1e-8 * (1.0 + sol.y.amax()));
        prop_assert!(r.primal <= 1e-9);
        prop_assert!(r.dual <= 1e-9);
    }

    /// The cached operator maps the solve's own right-hand side back to the optimum.
    #[test]
    fn decomposition_reproduces_optimum(seed in any::<u64>(), n in 2usize..=20, k in 1usize..=10) {
        let qp = instance(seed, n, k);
        let sol = qpsolver::solve(&qp, None).unwrap();
        let b = qp.stacked_rhs(&sol.active_set).unwrap();
        let y = sol.decomposition.apply(&b).unwrap();
        prop_assert!((&y - &sol.y).amax() <= 1e-10 * (1.0 + sol.y.amax()));
    }

    #[test]
    fn decomposition_is_linear(seed in any::<u64>(), n in 2usize..=20, k in 1usize..=10, alpha in -3.0f64..3.0) {
        let qp = instance(seed, n, k);
        let sol = qpsolver::solve(&qp, None).unwrap();
        let dec = &sol.decomposition;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let b1 = DVector::from_fn(dec.rhs_len(), |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let b2 = DVector::from_fn(dec.rhs_len(), |_, _| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let lhs = dec.apply(&(&b1 * alpha + &b2)).unwrap();
        let rhs = dec.apply(&b1).unwrap() * alpha + dec.apply(&b2).unwrap();
        prop_assert!((&lhs - &rhs).amax() <= 1e-10 * (1.0 + rhs.amax()));
    }

    /// Warm starting from the optimal set reaches the same optimum.
    #[test]
    fn warm_start_agrees(seed in any::<u64>(), n in 2usize..=20, k in 1usize..=10) {
        let qp = instance(seed, n, k);
        let cold = qpsolver::solve(&qp, None).unwrap();
        let warm = qpsolver::solve(&qp, Some(&cold.active_set)).unwrap();
        prop_assert!((&cold.y - &warm.y).amax() <= 1e-8 * (1.0 + cold.y.amax()));
    }

    #[test]
    fn encoding_round_trips(seed in any::<u64>(), n in 2usize..=20, k in 1usize..=10) {
        let qp = instance(seed, n, k);
        let sol = qpsolver::solve(&qp, None).unwrap();
        let bytes = sol.decomposition.encode();
        prop_assert_eq!(bytes.len(), sol.decomposition.encoded_len());
        let back = qpsolver::Decomposition::decode(&bytes).unwrap();
        let b = qp.stacked_rhs(&sol.active_set).unwrap();
        prop_assert_eq!(back.apply(&b).unwrap(), sol.decomposition.apply(&b).unwrap());
    }
}
