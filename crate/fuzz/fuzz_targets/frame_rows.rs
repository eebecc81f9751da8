#![no_main]

use crossgan::embedspace::parse_frame_rows;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_frame_rows(text);
});
