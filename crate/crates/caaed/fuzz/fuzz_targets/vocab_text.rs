//! Fuzz the vocabulary text parser: arbitrary input must either be rejected
//! with an error or produce a vocabulary that serializes and reparses to the
//! same bytes.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(vocab) = caaed::vocab::Vocab::from_text(text) else { return };
    let serialized = vocab.to_text();
    let reparsed = caaed::vocab::Vocab::from_text(&serialized)
        .expect("a parsed vocabulary must reparse after serialization");
    assert_eq!(reparsed.to_text(), serialized, "serialization must be a fixed point");
});
