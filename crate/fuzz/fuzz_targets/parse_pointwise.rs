#![no_main]

use libfuzzer_sys::fuzz_target;
use parrot_core::rationale::{emit_pointwise, parse_pointwise};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(a) = parse_pointwise(text) {
        let canon = emit_pointwise(&a);
        assert_eq!(parse_pointwise(&canon).as_ref(), Ok(&a));
    }
});
