#![no_main]

use libfuzzer_sys::fuzz_target;
use texnet_cli::files::Table;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = Table::parse(text, "fuzz input") {
        for c in &t.columns {
            let _ = t.column(c);
        }
    }
});
