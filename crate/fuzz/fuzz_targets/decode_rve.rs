#![no_main]

use libfuzzer_sys::fuzz_target;
use texnet::rvegen::{decode_rve, encode_rve};

fuzz_target!(|data: &[u8]| {
    if let Ok(rve) = decode_rve(data) {
        let again = encode_rve(&rve).expect("decoded RVE re-encodes");
        assert_eq!(decode_rve(&again).expect("re-encoded RVE decodes"), rve);
    }
});
