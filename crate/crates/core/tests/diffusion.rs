mod common;

use std::sync::Arc;

use cdpa_core::diffusion::{
    add_noise, cdpa_sample, ddim_sample, dpa_sample, resample_map, tweedie, AnalyticGaussianScore, Condition,
    NoiseSchedule, ResampleMode, SamplerConfig, ScoreModel, Timestep,
};
use cdpa_core::geometry::{uniform_angles, Geometry};
use cdpa_core::io::{make_phantom, PhantomKind, PhantomSpec};
use cdpa_core::optimize::DcProblem;
use cdpa_core::projector::{forward, DenseOperator};
use cdpa_core::rng::{self, Purpose};
use cdpa_core::Volume;
use proptest::prelude::*;
use rand::Rng;

const DRAWS: usize = 10_000;

fn moments(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[test]
fn add_noise_variance_matches_schedule() {
    let s = NoiseSchedule::default();
    let mut r = rng::stream(1, Purpose::Test, 0, 0);
    for t in [10, 250, 600, 999] {
        let x0 = vec![0.7f32; DRAWS];
        let eps = rng::normal_vec(&mut r, DRAWS);
        let xt: Vec<f64> = add_noise(&x0, t, &eps, &s).unwrap().into_iter().map(f64::from).collect();
        let (m, v) = moments(&xt);
        let sig2 = s.sigma(t).powi(2);
        assert!((v / sig2 - 1.0).abs() <= 0.05, "t {t}: var {v} vs {sig2}");
        assert!((m - s.alpha(t) * 0.7).abs() <= 4.0 * (sig2 / DRAWS as f64).sqrt());
    }
}

#[test]
fn forward_renoise_has_scheduled_mean_and_variance() {
    let s = NoiseSchedule::default();
    for t in [20, 400, 980] {
        let x0 = vec![1.3f32; DRAWS];
        let mut r = rng::stream(2, Purpose::Test, t as u64, 0);
        let out: Vec<f64> =
            resample_map(&x0, None, t, ResampleMode::ForwardRenoise, &s, &mut r).unwrap().into_iter().map(f64::from).collect();
        let (m, v) = moments(&out);
        let sig2 = s.sigma(t).powi(2);
        assert!((m - s.alpha(t) * 1.3).abs() <= 4.0 * (sig2 / DRAWS as f64).sqrt(), "t {t}: mean {m}");
        assert!((v / sig2 - 1.0).abs() <= 0.05, "t {t}: var {v} vs {sig2}");
    }
}

#[test]
fn posterior_blend_has_the_product_of_gaussians_moments() {
    let s = NoiseSchedule::default();
    let gamma = 40.0;
    let t = 500;
    let (a, sig) = (s.alpha(t), s.sigma(t));
    let x0 = vec![0.4f32; DRAWS];
    let prev = vec![-0.2f32; DRAWS];
    let mut r = rng::stream(3, Purpose::Test, 0, 0);
    let out: Vec<f64> = resample_map(&x0, Some(&prev), t, ResampleMode::PosteriorBlend { gamma }, &s, &mut r)
        .unwrap()
        .into_iter()
        .map(f64::from)
        .collect();
    let (s2, n2) = (gamma * sig * sig, sig * sig);
    let want_mean = (s2 * a * 0.4 + n2 * -0.2) / (s2 + n2);
    let want_var = s2 * n2 / (s2 + n2);
    let (m, v) = moments(&out);
    assert!((m - want_mean).abs() <= 4.0 * (want_var / DRAWS as f64).sqrt());
    assert!((v / want_var - 1.0).abs() <= 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn tweedie_of_gaussian_score_is_the_conjugate_posterior_mean(
        mu in -2.0f32..2.0,
        var in 0.05f32..4.0,
        xt in -3.0f32..3.0,
        t in 1usize..=1000,
    ) {
        let s = NoiseSchedule::default();
        let ts = s.timestep(t).unwrap();
        let score = AnalyticGaussianScore::new(vec![mu], vec![var]).unwrap();
        let eps = score.predict(&[xt], [1, 1], ts, &Condition::default()).unwrap();
        let got = tweedie(&[xt], &eps, t, &s).unwrap()[0] as f64;
        let (a, sg, m, v, x) = (ts.alpha, ts.sigma, mu as f64, var as f64, xt as f64);
        let want = m + a * v * (x - a * m) / (a * a * v + sg * sg);
        // ε̂ is stored in f32; its rounding is amplified by σ/α
        let storage = sg / a * (eps[0].abs() as f64) * f32::EPSILON as f64;
        prop_assert!((got - want).abs() <= 1e-6 * (1.0 + want.abs()) + storage, "{} vs {}", got, want);
    }

    #[test]
    fn tweedie_inverts_add_noise(x0 in prop::collection::vec(-5.0f32..5.0, 1..32), t in 0usize..=1000, seed in any::<u64>()) {
        let s = NoiseSchedule::default();
        let mut r = rng::stream(seed, Purpose::Test, 0, 0);
        let eps = rng::normal_vec(&mut r, x0.len());
        let back = tweedie(&add_noise(&x0, t, &eps, &s).unwrap(), &eps, t, &s).unwrap();
        let tol = 1e-6 * (1.0 + 1.0 / s.alpha(t));
        for (a, b) in back.iter().zip(&x0) {
            prop_assert!(((a - b) as f64).abs() <= tol * (1.0 + b.abs() as f64) * 10.0, "{} vs {}", a, b);
        }
    }
}

fn toy_problem(size: usize, views: usize) -> (Volume, DcProblem) {
    let truth = make_phantom(&PhantomSpec::new(PhantomKind::RandomEllipses2d, size).with_seed(4)).unwrap();
    let g = Geometry::desk_parallel(size, 1.0).unwrap();
    let p = forward(&truth, &g, &uniform_angles(views, 0.0, 360.0).unwrap()).unwrap();
    (truth, DcProblem::from_projections(&p).unwrap())
}

fn prior(len: usize) -> AnalyticGaussianScore {
    AnalyticGaussianScore::new(vec![0.3; len], vec![0.05; len]).unwrap()
}

#[test]
fn zero_guidance_epochs_reduce_to_plain_ddim() {
    let (truth, prob) = toy_problem(16, 8);
    let score = prior(truth.len());
    let cfg = SamplerConfig { guidance_epochs: 0, seed: 17, steps: 20, ..Default::default() };
    let guided = dpa_sample(&prob, &score, &cfg).unwrap().volume;
    let plain = ddim_sample(truth.shape(), &score, None, prob.num_views(), &cfg).unwrap();
    assert_eq!(guided.data(), plain.data());
}

/// Declares itself conditional but ignores the condition.
struct Blind(AnalyticGaussianScore);

impl ScoreModel for Blind {
    fn predict(&self, x: &[f32], shape: [usize; 2], t: Timestep, _: &Condition) -> cdpa_core::Result<Vec<f32>> {
        self.0.predict(x, shape, t, &Condition::default())
    }
    fn is_conditional(&self) -> bool {
        true
    }
}

#[test]
fn condition_blind_score_reproduces_dpa() {
    let (truth, prob) = toy_problem(16, 8);
    let cfg = SamplerConfig { seed: 23, steps: 15, ..Default::default() };
    let dpa = dpa_sample(&prob, &prior(truth.len()), &cfg).unwrap().volume;
    let fdk = Volume::filled(truth.shape(), 0.9);
    let cdpa = cdpa_sample(&prob, &fdk, &Blind(prior(truth.len())), &cfg).unwrap().volume;
    assert_eq!(dpa.data(), cdpa.data());
}

#[test]
fn sampling_is_deterministic_and_thread_count_stable() {
    let (truth, prob) = toy_problem(16, 8);
    let score = prior(truth.len());
    let cfg = SamplerConfig { seed: 5, steps: 10, ..Default::default() };
    let a = dpa_sample(&prob, &score, &cfg).unwrap().volume;
    let b = dpa_sample(&prob, &score, &cfg).unwrap().volume;
    assert_eq!(a.data(), b.data());
    for threads in [1, 3] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let c = pool.install(|| dpa_sample(&prob, &score, &cfg).unwrap().volume);
        for (x, y) in a.data().iter().zip(c.data()) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
        }
    }
    let other = dpa_sample(&prob, &score, &SamplerConfig { seed: 6, ..cfg }).unwrap().volume;
    assert_ne!(a.data(), other.data());
}

#[test]
fn guidance_lowers_final_data_consistency_loss() {
    let (truth, prob) = toy_problem(16, 12);
    let score = prior(truth.len());
    for seed in [1, 2, 3] {
        let on = SamplerConfig { seed, guidance_lr: 0.05, ..Default::default() };
        let off = SamplerConfig { guidance_epochs: 0, ..on };
        let guided = dpa_sample(&prob, &score, &on).unwrap().volume;
        let unguided = dpa_sample(&prob, &score, &off).unwrap().volume;
        let lg = prob.full_loss(guided.data()).unwrap();
        let lu = prob.full_loss(unguided.data()).unwrap();
        assert!(lg <= lu, "seed {seed}: guided {lg} vs unguided {lu}");
    }
}

#[test]
fn dpa_rejects_conditional_score_and_cdpa_checks_condition_shape() {
    let (truth, prob) = toy_problem(8, 4);
    let cfg = SamplerConfig { steps: 2, ..Default::default() };
    assert!(dpa_sample(&prob, &Blind(prior(truth.len())), &cfg).is_err());
    let wrong = Volume::zeros([1, 4, 4]);
    assert!(cdpa_sample(&prob, &wrong, &prior(truth.len()), &cfg).is_err());
}

#[test]
fn dpa_ensemble_mean_approaches_the_conjugate_posterior() {
    let (n, v0, sn) = (16, 0.01f64, 0.05f64);
    let mut r = rng::stream(3, Purpose::Test, 0, 0);
    let mu: Vec<f64> = (0..n).map(|_| r.random_range(0.5..1.5)).collect();
    let d: Vec<f64> = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
    let truth: Vec<f64> = mu.iter().map(|m| m + v0.sqrt() * rng::normal_vec(&mut r, 1)[0] as f64).collect();
    let y: Vec<f64> = (0..n).map(|i| d[i] * truth[i] + sn * rng::normal_vec(&mut r, 1)[0] as f64).collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = d[i];
    }
    let prob = DcProblem::new(Arc::new(DenseOperator::new(m, n, 4).unwrap()), y.chunks(4).map(<[f64]>::to_vec).collect()).unwrap();
    let want: Vec<f64> = (0..n)
        .map(|i| {
            let pv = 1.0 / (1.0 / v0 + d[i] * d[i] / (sn * sn));
            pv * (mu[i] / v0 + d[i] * y[i] / (sn * sn))
        })
        .collect();
    let score = AnalyticGaussianScore::new(mu.iter().map(|&v| v as f32).collect(), vec![v0 as f32; n]).unwrap();
    let count = 200;
    let mut mean = vec![0.0; n];
    for s in 0..count {
        let cfg = SamplerConfig { seed: s, guidance_lr: 0.05, ..Default::default() };
        for (a, &v) in mean.iter_mut().zip(dpa_sample(&prob, &score, &cfg).unwrap().volume.data()) {
            *a += v as f64 / count as f64;
        }
    }
    let err: f64 = mean.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
    assert!(err / scale <= 0.05, "relative L2 {}", err / scale);
}
