//! Central-difference checks of every differentiable op, 20 seeds each.

mod support;

use support::{op_cases, TOL};

#[test]
fn every_op_matches_central_differences() {
    for case in op_cases() {
        let err = case.worst_error();
        assert!(err <= TOL, "{}: max relative error {err:e}", case.name);
    }
}

#[test]
fn subspace_chains_match_central_differences() {
    for seed in 0..support::SEEDS {
        for chain in support::chain_cases(seed) {
            let err = chain.worst_error(support::CHAIN_EPS);
            assert!(err <= TOL, "{}: seed {seed} max relative error {err:e}", chain.name);
        }
    }
}
