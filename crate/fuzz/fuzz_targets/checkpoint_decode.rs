#![no_main]

use libfuzzer_sys::fuzz_target;
use nnmobile::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::decode(data) {
        // Whatever decodes must re-encode stably (bytes, so NaN payloads compare).
        let bytes = c.encode().expect("decoded checkpoint encodes");
        let again = Checkpoint::decode(&bytes).expect("round trip");
        assert_eq!(again.encode().expect("re-encodes"), bytes);
    }
});
