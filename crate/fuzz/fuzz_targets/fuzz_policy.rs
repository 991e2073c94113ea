#![no_main]

use cbm::community::ThresholdPolicy;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(policy) = ThresholdPolicy::parse(text, None) {
        policy.validate().unwrap();
    }
});
