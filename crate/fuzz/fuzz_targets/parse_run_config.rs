//! The key=value run-configuration reader must reject unknown keys and
//! malformed values with an error, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(src) = std::str::from_utf8(data) {
        let _ = ddsm::io::parse_run_config(src);
        let _ = ddsm::io::parse_config_pairs(src);
    }
});
