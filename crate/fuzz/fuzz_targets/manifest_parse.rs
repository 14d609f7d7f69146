#![no_main]

use boundary_seg::manifest::RunManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = RunManifest::parse(text) {
            let again = RunManifest::parse(&m.to_text()).expect("written manifest parses");
            assert_eq!(again.to_text(), m.to_text());
        }
    }
});
