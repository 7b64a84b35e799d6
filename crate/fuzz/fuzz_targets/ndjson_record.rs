#![no_main]

use libfuzzer_sys::fuzz_target;
use tinybp::data::ndjson::parse_record;

fuzz_target!(|data: &[u8]| {
    // One record per line; anything accepted satisfies the record
    // invariants (finite series, matched lengths, sane labels).
    if let Ok(rec) = parse_record(data) {
        rec.validate().expect("accepted records are valid");
    }
});
