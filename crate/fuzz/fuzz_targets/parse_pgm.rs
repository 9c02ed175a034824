//! The graymap decoder consumes raw bytes (P2 and binary P5, one- and
//! two-byte samples) and must fail cleanly on anything malformed.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = ddsm::io::parse_pgm(data);
});
