mod common;

use common::{op_cases, pipeline_check, run_case, PIPELINE_FLOOR};
use handmesh::gradcheck::GradCheckConfig;
use proptest::prelude::*;

const TOL: f64 = 1e-4;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn every_op_matches_central_differences(seed in any::<u64>()) {
        for c in op_cases(seed) {
            let r = run_case(&c);
            prop_assert!(r.checked > 0, "{} checked nothing", c.name);
            prop_assert!(r.max_rel_err <= TOL, "{}: {:?}", c.name, r);
        }
    }
}

#[test]
fn full_loss_matches_central_differences() {
    for seed in [0, 1, 2] {
        let cfg = GradCheckConfig {
            step: 1e-5,
            floor: PIPELINE_FLOOR,
        };
        let r = pipeline_check(seed, cfg);
        assert!(r.checked > 100, "{r:?}");
        assert!(r.max_rel_err <= TOL, "seed {seed}: {r:?}");
    }
}

#[test]
fn full_loss_matches_wider_step_with_tight_floor() {
    let cfg = GradCheckConfig { step: 1e-4, floor: 1e-6 };
    for seed in [0, 1, 2] {
        let r = pipeline_check(seed, cfg);
        assert!(r.max_rel_err <= TOL, "seed {seed}: {r:?}");
    }
}
