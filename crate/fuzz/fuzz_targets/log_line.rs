#![no_main]

use crossgan::losses::parse_log_line;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|line: &str| {
    let _ = parse_log_line(line);
});
