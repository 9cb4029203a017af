#![no_main]

use libfuzzer_sys::fuzz_target;
use parrot_core::pipeline::parse_jsonl;
use parrot_core::reward::{score_records, RewardOptions, ScoreRecord};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_jsonl::<ScoreRecord>(text) {
        let batch = score_records(records, &RewardOptions::default());
        for g in &batch.groups {
            for m in &g.members {
                assert!((0.0..=1.0).contains(&m.r_norm) || m.r_norm.is_nan());
            }
        }
    }
});
