#![no_main]

use libfuzzer_sys::fuzz_target;
use tinybp::data::cache::{parse_cache, write_cache};

fuzz_target!(|data: &[u8]| {
    // Geometry is checked before the sample arrays are materialized, so a
    // tiny header can never request a huge allocation. Accepted sets
    // serialize to a byte-level fixed point (samples may hold NaN).
    if let Ok(ws) = parse_cache(data) {
        let bytes = write_cache(&ws).expect("re-serialize");
        let again = parse_cache(&bytes).expect("reparse");
        let bytes2 = write_cache(&again).expect("serialize again");
        assert_eq!(bytes, bytes2);
    }
});
