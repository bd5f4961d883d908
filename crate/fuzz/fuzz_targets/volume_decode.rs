#![no_main]
use cdpa_core::io::decode_volume;
use libfuzzer_sys::fuzz_target;

// Input: JSON sidecar, a NUL byte, then the raw payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(sidecar) = std::str::from_utf8(&data[..split]) else { return };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok((v, header)) = decode_volume(sidecar, payload) {
        assert_eq!(v.shape(), header.shape);
        assert_eq!(v.len() * 4, payload.len());
    }
});
