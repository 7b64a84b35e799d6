#![no_main]

use libfuzzer_sys::fuzz_target;
use tinybp::intrt::{parse_int_graph, write_int_graph};

fuzz_target!(|data: &[u8]| {
    // Validation runs before blob allocation, so hostile manifests cannot
    // balloon memory; accepted graphs must serialize to a fixed point.
    if let Ok(g) = parse_int_graph(data) {
        let bytes = write_int_graph(&g).expect("re-serialize");
        let again = parse_int_graph(&bytes).expect("reparse");
        let bytes2 = write_int_graph(&again).expect("serialize again");
        assert_eq!(bytes, bytes2);
    }
});
