#![no_main]

use cbm::community::ThresholdGrid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = ThresholdGrid::parse(text) {
        assert!(grid.values().iter().all(|t| (0.0..=1.0).contains(t)));
        let shown: Vec<String> = grid.values().iter().map(f64::to_string).collect();
        assert_eq!(ThresholdGrid::parse(&shown.join(",")).unwrap(), grid);
    }
});
