#![no_main]

use forgeloc::metrics::Perturbation;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(p) = text.parse::<Perturbation>() {
        let again: Perturbation = p.to_string().parse().expect("printed perturbation parses");
        assert_eq!(again, p);
    }
});
