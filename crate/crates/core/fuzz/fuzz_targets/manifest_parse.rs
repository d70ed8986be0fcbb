#![no_main]

use forgeloc::data::manifest::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(m) = DatasetManifest::parse(text) {
        let again = DatasetManifest::parse(&m.to_string()).expect("printed manifest parses");
        assert_eq!(again.entries, m.entries);
    }
});
