#![no_main]

use libfuzzer_sys::fuzz_target;
use tinybp::graph::serial::{parse_checkpoint, write_checkpoint};

fuzz_target!(|data: &[u8]| {
    // Malformed containers must error, never panic or over-allocate.
    if let Ok(ckpt) = parse_checkpoint(data) {
        // Anything accepted re-serializes to a fixed point. Compare bytes,
        // not values: tensor payloads may hold NaN.
        let bytes = write_checkpoint(&ckpt.graph, &ckpt.tensors).expect("re-serialize");
        let again = parse_checkpoint(&bytes).expect("reparse");
        let bytes2 = write_checkpoint(&again.graph, &again.tensors).expect("serialize again");
        assert_eq!(bytes, bytes2);
    }
});
