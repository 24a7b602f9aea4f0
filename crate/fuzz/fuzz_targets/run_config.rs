#![no_main]

use libfuzzer_sys::fuzz_target;
use texnet_cli::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::from_toml(text) {
        let _ = c.program.build();
    }
});
