//! The checkpoint manifest reader enforces name/file grammar and entry
//! limits; any input must produce Ok or Err, never a panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(src) = std::str::from_utf8(data) {
        let _ = ddsm::io::parse_manifest(src);
    }
});
