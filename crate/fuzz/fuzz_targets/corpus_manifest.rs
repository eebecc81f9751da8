#![no_main]

use crossgan::corpus::Corpus;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let _ = Corpus::from_manifest(text);
});
