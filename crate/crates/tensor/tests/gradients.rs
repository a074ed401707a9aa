use dsse_tensor::gradcheck::{op_suite, OP_TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    for seed in [0, 1, 2] {
        for r in op_suite(seed, None).unwrap() {
            assert!(r.passes(OP_TOLERANCE), "seed {seed}: {} rel err {:.2e}", r.name, r.rel_error);
        }
    }
}

#[test]
fn corrupted_rules_are_caught() {
    for op in ["conv2d", "max_pool2d", "unpool2d", "bilinear_upsample2x", "batch_norm", "concat_channels"] {
        let reports = op_suite(0, Some(op)).unwrap();
        assert!(reports.iter().any(|r| !r.passes(OP_TOLERANCE)), "fault in {op} went unnoticed");
    }
}
