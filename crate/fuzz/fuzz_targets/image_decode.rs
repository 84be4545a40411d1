#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use nnmobile::img::Image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Image::decode(data, Path::new("fuzz-input")) {
        assert_eq!(img.data.len(), 3 * img.height * img.width);
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
