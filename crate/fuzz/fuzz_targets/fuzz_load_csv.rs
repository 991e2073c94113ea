#![no_main]

use cbm::cohort::{read_csv, write_csv, ClassMapping, IngestOptions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for mapping in [ClassMapping::three_class(), ClassMapping::five_class()] {
        let Ok(cohort) = read_csv(data, mapping.clone(), &IngestOptions::default()) else {
            continue;
        };
        // Whatever parses must survive a write/read round trip.
        let mut buf = Vec::new();
        write_csv(&cohort, &mut buf).unwrap();
        let again = read_csv(buf.as_slice(), mapping, &IngestOptions::default()).unwrap();
        assert_eq!(cohort.reports().len(), again.reports().len());
        assert_eq!(cohort.user_ids(), again.user_ids());
    }
});
