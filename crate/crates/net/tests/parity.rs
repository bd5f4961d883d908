use std::path::PathBuf;

use cdpa_net::{load_weights, ConditionBundle, FeatureMap, Mode, ParityFixture, UNet};

const PARITY_TOL: f32 = 1e-4;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn check(weights: &str, fixtures: &[&str]) {
    let net = load_weights(fixture(weights)).unwrap();
    for f in fixtures {
        let fx = ParityFixture::load(fixture(f)).unwrap();
        assert_eq!(fx.activations.len(), 2 * net.descriptor().depth() + 2, "{f}");
        let report = fx.check(&net).unwrap();
        for (tap, err) in &report.activation_max_abs {
            assert!(*err <= PARITY_TOL, "{f} tap {tap}: {err}");
        }
        assert!(report.output_max_abs <= PARITY_TOL, "{f}: {}", report.output_max_abs);
    }
}

#[test]
fn noise_network_matches_reference() {
    check("toy_noise.cdpa", &["toy_noise_parity_0.cdpa", "toy_noise_parity_1.cdpa", "toy_noise_parity_2.cdpa"]);
}

#[test]
fn denoise_network_matches_reference() {
    check("toy_denoise.cdpa", &["toy_denoise_parity_0.cdpa"]);
}

fn toy() -> (UNet, ParityFixture) {
    (
        load_weights(fixture("toy_noise.cdpa")).unwrap(),
        ParityFixture::load(fixture("toy_noise_parity_1.cdpa")).unwrap(),
    )
}

#[test]
fn forward_is_bitwise_repeatable() {
    let (net, fx) = toy();
    let a = net.forward_map(&fx.input, &fx.condition()).unwrap();
    let b = net.forward_map(&fx.input, &fx.condition()).unwrap();
    let bits = |f: &FeatureMap| f.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn slice_index_changes_output() {
    let (net, fx) = toy();
    let c = fx.condition();
    let a = net.forward_map(&fx.input, &c).unwrap();
    let b = net.forward_map(&fx.input, &ConditionBundle { slice_index: c.slice_index + 1, ..c }).unwrap();
    let diff = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
    assert!(diff > 0.0);
}

#[test]
fn toy_weights_accept_other_sizes() {
    let (net, fx) = toy();
    assert_eq!(net.descriptor().mode, Mode::NoisePrediction);
    for s in [8usize, 32] {
        let x = vec![0.1f32; s * s];
        let y = net.forward(&x, [s, s], &fx.condition()).unwrap();
        assert_eq!(y.len(), s * s);
        assert!(y.iter().all(|v| v.is_finite()));
    }
}

