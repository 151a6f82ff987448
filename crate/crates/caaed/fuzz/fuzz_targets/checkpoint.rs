//! Fuzz the checkpoint reader: arbitrary bytes must be parsed or rejected
//! with an error, never panic or allocate unboundedly.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = caaed::model::parse_checkpoint(data);
});
