#![no_main]

use dcmamber::data::{parse_csv, write_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = parse_csv(data, "fuzz") {
        assert_eq!(ds.values.numel(), ds.len() * ds.vars());
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).expect("write");
        let again = parse_csv(&buf[..], "fuzz").expect("re-parse");
        assert_eq!(again.values.shape(), ds.values.shape());
    }
});
