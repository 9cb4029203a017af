#![no_main]

use libfuzzer_sys::fuzz_target;
use parrot_core::gateway::ImageRef;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = ImageRef::parse(text);
    }
});
