use gmmq::oracle::{
    bellman_apply, compare_policies, contraction_check, empirical_br_loss, ensemble_br_loss,
    fixed_point, three_state_fixture, BellmanMode, FiniteMdp, TabularQ, FIXED_POINT_TOL,
};
use gmmq::suites::{contraction_suite, picard_suite, slln_suite};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn bellman_operators_contract_by_the_discount() {
    let report = contraction_suite(0, 100).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn picard_iterates_obey_the_geometric_bound() {
    let report = picard_suite(0, 20).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn monte_carlo_loss_converges_to_the_ensemble_loss() {
    let report = slln_suite(0, &[1_000, 10_000, 100_000], 20).unwrap();
    assert!(report.monotone(), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn fixed_points_are_fixed(seed in any::<u64>(), s in 2usize..8, a in 2usize..4, disc in 0.0f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = FiniteMdp::random(&mut rng, s, a, disc).unwrap();
        let qstar = fixed_point(&mdp, &BellmanMode::Optimal).unwrap().q;
        let residual = bellman_apply(&mdp, &qstar, &BellmanMode::Optimal).unwrap().sup_distance(&qstar);
        prop_assert!(residual <= 10.0 * FIXED_POINT_TOL);
        // Q* lower-bounds every policy's value
        let policy: Vec<usize> = (0..s).map(|_| rng.gen_range(0..a)).collect();
        let qpi = fixed_point(&mdp, &BellmanMode::Policy(policy)).unwrap().q;
        for (x, y) in qstar.values().iter().zip(qpi.values()) {
            prop_assert!(*x <= y + 1e-9);
        }
        // greedy of Q* agrees with itself
        let greedy: Vec<usize> = (0..s).map(|i| qstar.greedy(i)).collect();
        prop_assert_eq!(compare_policies(&qstar, &greedy, None).unwrap().agreement, 1.0);
    }

    #[test]
    fn contraction_ratio_is_bounded(seed in any::<u64>(), disc in 0.0f64..0.99) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mdp = FiniteMdp::random(&mut rng, 5, 3, disc).unwrap();
        let q1 = TabularQ::random(&mut rng, 5, 3, 10.0);
        let q2 = TabularQ::random(&mut rng, 5, 3, 10.0);
        let ratio = contraction_check(&mdp, &q1, &q2, &BellmanMode::Optimal).unwrap();
        prop_assert!(ratio <= disc + 1e-12);
    }
}

#[test]
fn empirical_loss_is_unbiased_on_the_fixture() {
    let fx = three_state_fixture();
    let exact = ensemble_br_loss(&fx.mdp, &fx.q, &fx.policy, &fx.weights).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let est =
        empirical_br_loss(&fx.mdp, &fx.q, &fx.policy, &fx.weights, 200_000, &mut rng).unwrap();
    assert!(
        (est - exact).abs() < 0.02 * exact.max(1e-3),
        "{est} vs {exact}"
    );
}
