#![no_main]

use dcmamber::model::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&ckpt)).expect("re-decode");
        assert_eq!(again.config, ckpt.config);
        assert_eq!(again.meta, ckpt.meta);
    }
});
