//! Fuzz the experiment configuration parser: arbitrary text must be parsed
//! or rejected with an error, never panic.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = caaed::config::ExperimentConfig::parse(text);
});
