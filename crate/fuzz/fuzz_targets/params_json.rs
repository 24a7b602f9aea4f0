#![no_main]

use libfuzzer_sys::fuzz_target;
use texnet::dataset::ParamsFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = ParamsFile::from_json(text) {
        let again = p.to_json().expect("parsed params print");
        assert_eq!(ParamsFile::from_json(&again).expect("printed params parse"), p);
    }
});
