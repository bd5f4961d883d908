#![no_main]
use cdpa_core::Geometry;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(g) = Geometry::from_json(text) {
        assert_eq!(Geometry::from_json(&g.to_json()).unwrap(), g);
    }
});
