#![no_main]
use cdpa_net::ParityFixture;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(f) = ParityFixture::from_bytes(data) {
        let again = ParityFixture::from_container(&f.to_container().unwrap()).unwrap();
        assert_eq!(again, f);
    }
});
