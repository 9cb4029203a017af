#![no_main]

use libfuzzer_sys::fuzz_target;
use parrot_core::rationale::parse_consistency_answer;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(answer) = parse_consistency_answer(&text) {
        assert_eq!(parse_consistency_answer(answer.as_str()), Ok(answer));
    }
});
