#![no_main]

use dcmamber::kv::{format_kv, parse_kv, parse_override};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_override(text);
    if let Ok(entries) = parse_kv(text) {
        // accepted text re-formats to text that parses to the same pairs
        let again = parse_kv(&format_kv(entries.iter().map(|e| (&e.key, &e.value)))).expect("re-parse");
        assert!(entries.iter().zip(&again).all(|(a, b)| a.key == b.key && a.value == b.value));
        assert_eq!(entries.len(), again.len());
    }
});
