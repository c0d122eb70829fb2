#![no_main]

use libfuzzer_sys::fuzz_target;
use pavi::models::decode_dataset;

// Input layout: u16 little-endian sidecar length, sidecar JSON, raw f64 payload.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let len = u16::from_le_bytes([data[0], data[1]]) as usize;
    let rest = &data[2..];
    if rest.len() < len {
        return;
    }
    let (sidecar, payload) = rest.split_at(len);
    let Ok(sidecar) = std::str::from_utf8(sidecar) else {
        return;
    };
    if let Ok((tensor, meta)) = decode_dataset(payload, sidecar) {
        assert_eq!(tensor.shape(), &[meta.shape[0] * meta.shape[1], meta.shape[2]]);
        assert_eq!(tensor.data().len() * 8, payload.len());
    }
});
