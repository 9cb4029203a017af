#![no_main]

use libfuzzer_sys::fuzz_target;
use parrot_core::rationale::{emit_pairwise, parse_pairwise};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = parse_pairwise(text) {
        // Anything accepted must survive a canonical round trip.
        let canon = emit_pairwise(&r);
        assert_eq!(parse_pairwise(&canon).as_ref(), Ok(&r));
    }
});
