#![no_main]

use forgeloc::train::PhaseRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(r) = text.parse::<PhaseRecord>() {
        let printed = r.to_string();
        let again: PhaseRecord = printed.parse().expect("printed record parses");
        assert_eq!(again.to_string(), printed);
    }
});
