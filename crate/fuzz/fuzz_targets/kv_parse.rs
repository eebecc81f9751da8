#![no_main]

use crossgan::kv::KvMap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(m) = KvMap::parse(text) {
        let again = KvMap::parse(&m.render()).expect("rendered map reparses");
        assert_eq!(m, again);
    }
});
