#![no_main]

use crossgan::embedspace::parse_index_manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = parse_index_manifest(text);
});
