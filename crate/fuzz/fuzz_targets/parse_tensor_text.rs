//! The tensor text reader must reject arbitrary input with an error —
//! no panics, no unchecked allocations.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(src) = std::str::from_utf8(data) {
        let _ = ddsm::io::parse_tensor_text(src);
    }
});
