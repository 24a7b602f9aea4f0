#![no_main]

use libfuzzer_sys::fuzz_target;
use texnet::oracle::{decode_labels, encode_labels};

fuzz_target!(|data: &[u8]| {
    if let Ok(set) = decode_labels(data) {
        assert_eq!(decode_labels(&encode_labels(&set)).expect("re-encoded labels decode"), set);
    }
});
