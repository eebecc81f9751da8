#![no_main]

use crossgan::kv::KvMap;
use crossgan::train::TrainConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    let Ok(m) = KvMap::parse(text) else { return };
    let Ok(cfg) = TrainConfig::from_kv(&m) else { return };
    if cfg.validate().is_ok() {
        let _ = cfg.arch();
    }
});
