mod common;

#[test]
fn instance_and_variant_counts() {
    for seed in 0..60 {
        if let Err(e) = common::counts_check(seed) {
            panic!("seed {seed}: {e}");
        }
    }
}
