#![no_main]

use libfuzzer_sys::fuzz_target;
use tunes::data::format::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(entry) = decode(data, 7, "fuzz") {
        // anything accepted must re-encode to the same bytes
        assert_eq!(encode(&entry), data);
    }
});
