#![no_main]

use libfuzzer_sys::fuzz_target;
use nnmobile::data::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = parse_manifest(data) {
        assert!(!records.is_empty());
        assert!(records.iter().all(|r| !r.filename.is_empty()));
    }
});
