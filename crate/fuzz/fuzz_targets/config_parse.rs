#![no_main]

use libfuzzer_sys::fuzz_target;
use parrot_core::config::AppConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = AppConfig::parse(text);
    }
});
