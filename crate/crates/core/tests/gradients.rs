mod common;

use common::gradcheck::{all_cases, worst_error, REL_TOL, TRIALS};

#[test]
fn every_primitive_and_loss_matches_finite_differences() {
    for (name, build, make) in all_cases() {
        let e = worst_error(name, build.as_ref(), make.as_ref());
        println!("{name}: worst relative error {e:.2e} over {TRIALS} inputs");
        assert!(e < REL_TOL, "{name}: relative error {e:e}");
    }
}
