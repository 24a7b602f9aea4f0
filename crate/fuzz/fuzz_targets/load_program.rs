#![no_main]

use libfuzzer_sys::fuzz_target;
use texnet_cli::config::ProgramFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = ProgramFile::from_json(text);
});
