#![no_main]

use bialign::embeddings::parse_fasttext_vec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(e) = parse_fasttext_vec(data, 64) {
        assert_eq!(e.vocab().len(), e.vectors().nrows());
        assert!(e.n() <= 64);
        assert!(e.vectors().iter().all(|v| v.is_finite()));
    }
});
