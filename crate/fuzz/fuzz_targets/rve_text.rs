#![no_main]

use libfuzzer_sys::fuzz_target;
use texnet::rvegen::{rve_from_text, rve_to_text};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rve) = rve_from_text(text) {
        let again = rve_to_text(&rve).expect("parsed RVE prints");
        assert_eq!(rve_from_text(&again).expect("printed RVE parses"), rve);
    }
});
