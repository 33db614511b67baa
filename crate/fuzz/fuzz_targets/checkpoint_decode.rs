#![no_main]

use clq::harness::checkpoint::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        // decodable blobs re-encode to the same bytes
        assert_eq!(encode_checkpoint(&ckpt), data);
    }
});
