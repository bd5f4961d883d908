#![no_main]
use cdpa_cli::prior::GaussianPrior;
use cdpa_net::Container;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Container::from_bytes(data) {
        if let Ok(p) = GaussianPrior::from_container(&c) {
            let _ = p.unconditional();
            let _ = p.conditional();
        }
    }
});
