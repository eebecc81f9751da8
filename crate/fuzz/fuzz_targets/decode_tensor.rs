#![no_main]

use crossgan::binfmt::{decode_tensor, encode_tensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|bytes: &[u8]| {
    if let Ok(t) = decode_tensor(bytes) {
        assert_eq!(encode_tensor(&t), bytes);
    }
});
