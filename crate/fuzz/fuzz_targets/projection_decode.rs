#![no_main]
use cdpa_core::io::decode_projections;
use libfuzzer_sys::fuzz_target;

// Input: JSON sidecar, a NUL byte, then the raw payload.
fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|&b| b == 0).unwrap_or(data.len());
    let Ok(sidecar) = std::str::from_utf8(&data[..split]) else { return };
    let payload = data.get(split + 1..).unwrap_or(&[]);
    if let Ok(p) = decode_projections(sidecar, payload) {
        let [r, c] = p.geometry.view_shape();
        assert_eq!(p.data.len(), p.angles.count() * r * c);
    }
});
