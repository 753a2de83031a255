#![no_main]

use bialign::mapping::OrthogonalMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(q) = OrthogonalMap::from_text(text) {
        let again = OrthogonalMap::from_text(&q.to_text()).unwrap();
        assert_eq!(again.matrix(), q.matrix());
    }
});
