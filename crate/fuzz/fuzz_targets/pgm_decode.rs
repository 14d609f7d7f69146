#![no_main]

use boundary_seg::pgm::GrayImage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = GrayImage::decode(data) {
        assert_eq!(GrayImage::decode(&img.encode()).expect("P5 round trip"), img);
    }
});
