#![no_main]

use libfuzzer_sys::fuzz_target;
use pavi::checkpoint::{decode, encode};

fuzz_target!(|data: &[u8]| {
    if let Ok(tensors) = decode(data) {
        // Compare encodings rather than tensors so NaN payloads round trip too.
        let bytes = encode(&tensors);
        let again = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(encode(&again), bytes);
    }
});
