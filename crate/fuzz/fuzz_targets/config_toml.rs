#![no_main]

use libfuzzer_sys::fuzz_target;
use sade_core::config::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = Config::from_toml_str(text) {
        let again = Config::from_toml_str(&cfg.to_toml_string()).expect("emitted config parses");
        assert_eq!(again.to_toml_string(), cfg.to_toml_string());
    }
});
