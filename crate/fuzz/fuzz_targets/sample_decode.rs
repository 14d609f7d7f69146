#![no_main]

use boundary_seg::data::{decode_sample, encode_sample};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(sample) = decode_sample(data) {
        // anything accepted must re-encode to the same bytes
        let bytes = encode_sample(&sample).expect("decoded sample re-encodes");
        assert_eq!(bytes, data);
    }
});
