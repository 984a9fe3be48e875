mod common;

use common::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn whitening_gives_identity_covariance(c in 2usize..=6, factor in 10usize..=30, seed in any::<u64>()) {
        check_whitening(c, c * factor, seed)?;
    }

    #[test]
    fn whitened_demixing_is_orthonormal(c in 2usize..=6, q in 1usize..=6, seed in any::<u64>()) {
        check_orthonormal_demixing(c, q, seed)?;
    }

    #[test]
    fn second_derivative_matches_finite_difference(x in -10.0f64..10.0) {
        check_second_derivative(x)?;
    }

    #[test]
    fn pruned_tree_invariants(k in 2usize..=10, p in 0.2f64..=1.0, seed in any::<u64>(), root in any::<usize>()) {
        check_tree(k, p, seed, root)?;
    }

    #[test]
    fn fix_signs_is_idempotent(rows in 1usize..=8, cols in 1usize..=4, seed in any::<u64>()) {
        check_fix_signs(rows, cols, seed)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn local_solution_satisfies_constraint(k in 2usize..=5, m in 2usize..=4, seed in 0u64..1_000_000, i in 0usize..10) {
        check_local_constraint(k, m, seed, i)?;
    }
}
