mod common;

use common::gradient_errors;

#[test]
fn tape_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let errs = gradient_errors(seed);
        for (name, err) in ["rec", "conj", "lat1", "total"].iter().zip(errs) {
            assert!(err <= 1e-3, "seed {seed} {name}: relative error {err:e}");
        }
    }
}
