mod common;

use common::{grad_cases, FD_TOL};

#[test]
fn every_op_matches_finite_differences_over_20_seeds() {
    for (name, case) in grad_cases() {
        for seed in 0..20 {
            let r = case(seed).unwrap();
            assert!(
                r.max_rel_err <= FD_TOL,
                "{name} seed {seed}: rel err {:.3e} at {:?}",
                r.max_rel_err,
                r.worst
            );
        }
    }
}
