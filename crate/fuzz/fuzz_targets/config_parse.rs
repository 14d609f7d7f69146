#![no_main]

use boundary_seg::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let mut config = RunConfig::default();
        if config.apply_text(text).is_ok() {
            let mut back = RunConfig::default();
            back.apply_text(&config.to_text()).expect("echoed config parses");
            assert_eq!(back.to_text(), config.to_text());
        }
    }
});
