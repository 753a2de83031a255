#![no_main]

use bialign::retrieval::parse_muse_dictionary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(dict) = parse_muse_dictionary(text) {
        // the writer's output reads back to the same dictionary
        let again = parse_muse_dictionary(&dict.to_text()).unwrap();
        assert_eq!(again, dict);
    }
});
