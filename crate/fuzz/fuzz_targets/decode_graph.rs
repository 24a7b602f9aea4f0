#![no_main]

use libfuzzer_sys::fuzz_target;
use texnet::mgraph::{decode_graph, encode_graph};

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = decode_graph(data) {
        let again = encode_graph(&g).expect("decoded graph re-encodes");
        assert_eq!(decode_graph(&again).expect("re-encoded graph decodes"), g);
    }
});
