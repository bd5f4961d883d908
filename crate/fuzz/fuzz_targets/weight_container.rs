#![no_main]
use cdpa_net::{Container, UNet};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::from_bytes(data) {
        assert_eq!(c.to_bytes().unwrap(), data);
        let _ = UNet::from_container(c);
    }
});
