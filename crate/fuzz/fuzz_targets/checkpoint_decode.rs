#![no_main]

use boundary_seg::train::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        assert_eq!(encode_checkpoint(&ckpt).expect("re-encodes"), data);
    }
});
