#![no_main]

use libfuzzer_sys::fuzz_target;
use parrot_core::nft::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Checkpoint::decode(data) {
        let bytes = c.encode();
        assert_eq!(Checkpoint::decode(&bytes).map(|c| c.encode()).ok(), Some(bytes));
    }
});
