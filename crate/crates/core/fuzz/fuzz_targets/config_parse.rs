#![no_main]

use forgeloc::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(c) = RunConfig::parse(text) {
        let printed = c.to_string();
        let again = RunConfig::parse(&printed).expect("printed config parses");
        assert_eq!(again.to_string(), printed);
    }
});
