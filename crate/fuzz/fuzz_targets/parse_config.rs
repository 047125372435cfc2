#![no_main]

use libfuzzer_sys::fuzz_target;
use tunes::kv::KvMap;
use tunes::TunesConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(kv) = KvMap::parse(text) {
        assert_eq!(KvMap::parse(&kv.to_string()).ok(), Some(kv.clone()));
        let _ = TunesConfig::from_kv(&kv);
    }
});
