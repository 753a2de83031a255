#![no_main]

use bialign::ot::{parse_cost_matrix, sinkhorn_generalized, MarginalWeights, SinkhornParams};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(d) = parse_cost_matrix(text) else { return };
    if d.nrows() * d.ncols() > 256 {
        return;
    }
    let w = MarginalWeights::uniform(d.nrows(), d.ncols()).unwrap();
    let params = SinkhornParams { max_iter: 50, ..Default::default() };
    if let Ok(plan) = sinkhorn_generalized(&d, &w, &params) {
        assert!(plan.values().iter().all(|&v| v >= 0.0));
    }
});
