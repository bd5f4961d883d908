//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cdpa_core::analytic::{analytic_reconstruct, beer_lambert_f64, FilterSpec, RawProjection};
use cdpa_core::diffusion::{
    add_noise, cdpa_sample, ddim_sample, dpa_sample, tweedie, AnalyticGaussianScore, ConditionalGaussianScore,
};
use cdpa_core::geometry::{uniform_angles, AngleSet, Geometry};
use cdpa_core::io::{make_phantom, simulate_counts, CountModel, PhantomKind, PhantomSpec};
use cdpa_core::metrics::{psnr, ssim, ssim2d};
use cdpa_core::optimize::{dc_gradient, dc_loss, DcProblem};
use cdpa_core::posterior::{auc, linear_fit, mc_mean, roc_curve};
use cdpa_core::projector::{adjoint, forward, DenseOperator, Projections};
use cdpa_core::rng::{self, Purpose};
use cdpa_core::{MetricConfig, NoiseSchedule, SamplerConfig, Volume};
use cdpa_net::{Container, ConditionBundle, Descriptor, Mode, NetError, Tensor, UNet};
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gaussian(n: usize, seed: u64) -> Vec<f32> {
    rng::normal_vec(&mut rng::stream(seed, Purpose::Test, 7, 0), n)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn within(start: Instant, limit: Duration) -> (bool, f64) {
    let t = start.elapsed();
    (t < limit, t.as_secs_f64())
}

fn adjoint_mismatch(g: &Geometry, angles: &AngleSet, seed: u64) -> f64 {
    let shape = g.grid().shape();
    let x = Volume::from_vec(shape, gaussian(shape.iter().product(), seed)).unwrap();
    let [r, c] = g.view_shape();
    let y = Projections::new(gaussian(angles.count() * r * c, seed ^ 0x5555), angles.clone(), g.clone()).unwrap();
    let ax = forward(&x, g, angles).unwrap();
    let aty = adjoint(&y).unwrap();
    let lhs = dot(&ax.data, &y.data);
    let rhs = dot(x.data(), aty.data());
    (lhs - rhs).abs() / (dot(&ax.data, &ax.data).sqrt() * dot(&y.data, &y.data).sqrt())
}

fn adjoint_criterion() -> Outcome {
    let start = Instant::now();
    let par = Geometry::desk_parallel(64, 1.0).unwrap();
    let cone = Geometry::desk_cone(32, 1.0).unwrap();
    let mut worst = [0f64; 2];
    for trial in 0..20u64 {
        let mut r = rng::stream(trial, Purpose::Test, 11, 0);
        let offset: f64 = r.random_range(0.0..20.0);
        worst[0] = worst[0].max(adjoint_mismatch(&par, &uniform_angles(16, offset, 360.0).unwrap(), 100 + trial));
        worst[1] = worst[1].max(adjoint_mismatch(&cone, &uniform_angles(8, offset, 360.0).unwrap(), 200 + trial));
    }
    let (fast, secs) = within(start, Duration::from_secs(30));
    check(
        worst[0] <= 1e-4 && worst[1] <= 1e-4 && fast,
        format!("worst parallel {:.2e}, cone {:.2e} (tol 1e-4), {secs:.1}s (limit 30s)", worst[0], worst[1]),
    )
}

fn gradient_criterion() -> Outcome {
    let start = Instant::now();
    let truth = make_phantom(&PhantomSpec::new(PhantomKind::RandomEllipses2d, 16).with_seed(1)).unwrap();
    let g = Geometry::desk_parallel(16, 1.0).unwrap();
    let p = forward(&truth, &g, &uniform_angles(12, 0.0, 360.0).unwrap()).unwrap();
    let prob = DcProblem::from_projections(&p).unwrap();
    let views = prob.all_views();
    let x = Volume::from_vec([1, 16, 16], gaussian(256, 3)).unwrap();
    let grad = dc_gradient(&x, &prob, &views).unwrap();
    let gmax = grad.data().iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
    let h = 0.25f32;
    let mut worst = 0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (dc_loss(&plus, &prob, &views).unwrap() - dc_loss(&minus, &prob, &views).unwrap()) / (2.0 * h as f64);
        let an = grad.data()[i] as f64;
        worst = worst.max((fd - an).abs() / an.abs().max(1e-6 * gmax));
    }
    let (fast, secs) = within(start, Duration::from_secs(60));
    check(worst <= 1e-3 && fast, format!("max relative error {worst:.2e} (tol 1e-3), {secs:.1}s (limit 60s)"))
}

fn analytic_criterion() -> Outcome {
    let start = Instant::now();
    let filter = FilterSpec::default();
    let cfg = MetricConfig::UNIT;
    let sl = make_phantom(&PhantomSpec::new(PhantomKind::SheppLogan2d, 64)).unwrap();
    let g = Geometry::desk_parallel(64, 1.0).unwrap();
    let rec = analytic_reconstruct(&forward(&sl, &g, &uniform_angles(180, 0.0, 360.0).unwrap()).unwrap(), &filter).unwrap();
    let fbp_psnr = psnr(&rec, &sl, &cfg).unwrap();

    let sphere = make_phantom(&PhantomSpec::new(PhantomKind::Sphere, 48)).unwrap();
    let g = Geometry::desk_cone(48, 1.0).unwrap();
    let rec = analytic_reconstruct(&forward(&sphere, &g, &uniform_angles(180, 0.0, 360.0).unwrap()).unwrap(), &filter).unwrap();
    let mid = |v: &Volume| Volume::from_vec([1, 48, 48], v.slice(24).to_vec()).unwrap();
    let fdk_psnr = psnr(&mid(&rec), &mid(&sphere), &cfg).unwrap();
    let (fast, secs) = within(start, Duration::from_secs(120));
    check(
        fbp_psnr >= 25.0 && fdk_psnr >= 24.0 && fast,
        format!("FBP {fbp_psnr:.2} dB (>= 25), FDK central slice {fdk_psnr:.2} dB (>= 24), {secs:.1}s (limit 120s)"),
    )
}

fn beer_lambert_criterion() -> Outcome {
    let mut r = rng::stream(4, Purpose::Test, 12, 0);
    let line: Vec<f32> = (0..5000).map(|_| r.random_range(0.0f32..8.0)).collect();
    let mut worst = 0f64;
    for (dark, flat) in [(0.0, 1.0e4), (100.0, 6.5e4), (12.5, 13.0)] {
        let raw = simulate_counts(&line, &CountModel::noiseless(dark, flat)).unwrap();
        let (back, saturated) = beer_lambert_f64(&raw).unwrap();
        if saturated != 0 {
            return Err(format!("{saturated} pixels saturated for dark {dark}, flat {flat}"));
        }
        worst = line.iter().zip(&back).map(|(&a, &b)| (a as f64 - b).abs()).fold(worst, f64::max);
    }
    let (dark, flat) = (50.0, 1050.0);
    let point = |count: f64| beer_lambert_f64(&RawProjection { counts: vec![count], dark: vec![dark], flat: vec![flat] }).unwrap().0[0];
    let at_flat = point(flat);
    let at_e = point(dark + (flat - dark) * (-1f64).exp());
    let at_half = point(dark + 0.5 * (flat - dark));
    let points_ok = at_flat == 0.0 && (at_e - 1.0).abs() <= 1e-12 && (at_half - 2f64.ln()).abs() <= 1e-12;
    check(
        worst <= 1e-6 && points_ok,
        format!("round trip {worst:.2e} (tol 1e-6); P(I1) = {at_flat}, P(e^-1) = {at_e:.15}, P(1/2) = {at_half:.15}"),
    )
}

struct Toy {
    prob: DcProblem,
    fdk: Volume,
    score: ConditionalGaussianScore,
    posterior_mean: Vec<f64>,
    prior_mean: Vec<f32>,
}

/// Diagonal measurement `y = D x + n` with a Gaussian prior; the posterior is
/// available in closed form.
fn toy(prior_var: f64) -> Toy {
    let n = 16;
    let sn = 0.05;
    let mut r = rng::stream(3, Purpose::Test, 0, 0);
    let mu: Vec<f64> = (0..n).map(|_| r.random_range(0.5..1.5)).collect();
    let d: Vec<f64> = (0..n).map(|_| r.random_range(0.5..2.0)).collect();
    let truth: Vec<f64> = mu.iter().map(|m| m + prior_var.sqrt() * rng::normal_vec(&mut r, 1)[0] as f64).collect();
    let y: Vec<f64> = (0..n).map(|i| d[i] * truth[i] + sn * rng::normal_vec(&mut r, 1)[0] as f64).collect();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = d[i];
    }
    let op = DenseOperator::new(m, n, 4).unwrap();
    let prob = DcProblem::new(Arc::new(op), y.chunks(4).map(<[f64]>::to_vec).collect()).unwrap();
    let posterior_mean = (0..n)
        .map(|i| {
            let pv = 1.0 / (1.0 / prior_var + d[i] * d[i] / (sn * sn));
            pv * (mu[i] / prior_var + d[i] * y[i] / (sn * sn))
        })
        .collect();
    let prior_mean: Vec<f32> = mu.iter().map(|&v| v as f32).collect();
    let cond_var = (0..n).map(|i| (sn * sn / (d[i] * d[i])) as f32).collect();
    let score = ConditionalGaussianScore::new(prior_mean.clone(), vec![prior_var as f32; n], cond_var).unwrap();
    let fdk = Volume::from_vec([1, 1, n], (0..n).map(|i| (y[i] / d[i]) as f32).collect()).unwrap();
    Toy { prob, fdk, score, posterior_mean, prior_mean }
}

fn linear_gaussian_criterion() -> Outcome {
    let start = Instant::now();
    let t = toy(0.01);
    let count = 200;
    let mut acc = vec![0.0; 16];
    for s in 0..count {
        let out = cdpa_sample(&t.prob, &t.fdk, &t.score, &SamplerConfig { seed: s, ..Default::default() }).unwrap();
        for (a, &v) in acc.iter_mut().zip(out.volume.data()) {
            *a += v as f64 / count as f64;
        }
    }
    let num: f64 = acc.iter().zip(&t.posterior_mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = t.posterior_mean.iter().map(|b| b * b).sum::<f64>().sqrt();
    let rel = num / den;

    let v0 = 1.0;
    let prior = AnalyticGaussianScore::new(t.prior_mean.clone(), vec![v0 as f32; 16]).unwrap();
    let draws = 10_000;
    let mut s1 = vec![0.0; 16];
    let mut s2 = vec![0.0; 16];
    for s in 0..draws {
        let v = ddim_sample([1, 1, 16], &prior, None, 0, &SamplerConfig { seed: s, ..Default::default() }).unwrap();
        for (i, &x) in v.data().iter().enumerate() {
            s1[i] += x as f64;
            s2[i] += (x as f64).powi(2);
        }
    }
    let nd = draws as f64;
    let se = (v0 / nd).sqrt();
    let mut worst_z = 0f64;
    let mut pooled_var = 0.0;
    for i in 0..16 {
        let m = s1[i] / nd;
        worst_z = worst_z.max((m - t.prior_mean[i] as f64).abs() / se);
        pooled_var += (s2[i] / nd - m * m) * nd / (nd - 1.0) / 16.0;
    }
    let var_rel = (pooled_var / v0 - 1.0).abs();
    let (fast, secs) = within(start, Duration::from_secs(300));
    check(
        rel <= 0.05 && worst_z <= 3.0 && var_rel <= 0.10 && fast,
        format!(
            "CDPA mean rel L2 {rel:.2e} (tol 5e-2); DDIM worst mean {worst_z:.2} SE (tol 3), variance off by {:.1}% (tol 10%), {secs:.1}s (limit 300s)",
            100.0 * var_rel
        ),
    )
}

fn tweedie_criterion() -> Outcome {
    let s = NoiseSchedule::default();
    let start_ok = s.alpha(0) == 1.0 && s.sigma(0) == 0.0;
    let unit_ok = (0..=s.train_steps()).all(|t| (s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() <= 1e-12);
    let x0 = gaussian(4096, 21);
    let eps = gaussian(4096, 22);
    let identity_at_zero = add_noise(&x0, 0, &eps, &s).unwrap() == x0;
    let mut worst = 0f64;
    for t in 0..=s.train_steps() {
        let xt = add_noise(&x0, t, &eps, &s).unwrap();
        let back = tweedie(&xt, &eps, t, &s).unwrap();
        let a = s.alpha(t);
        for ((&b, &x), &v) in back.iter().zip(&x0).zip(&xt) {
            // x_t is stored in f32; its rounding reaches x̂₀ amplified by 1/α_t
            let scale = 1.0f64.max(x.abs() as f64).max(v.abs() as f64 / a);
            worst = worst.max((b as f64 - x as f64).abs() / scale);
        }
    }
    check(
        start_ok && unit_ok && identity_at_zero && worst <= 1e-6,
        format!("alpha_0 = 1, sigma_0 = 0: {start_ok}; alpha^2 + sigma^2 = 1: {unit_ok}; tweedie(add_noise) worst {worst:.2e} (tol 1e-6)"),
    )
}

fn guidance_criterion() -> Outcome {
    let mut loops = 0;
    let mut violations = 0;
    let mut steps_seen = Vec::new();
    let mut tally = |losses: &[Vec<f64>]| {
        steps_seen.push(losses.len());
        for l in losses {
            loops += 1;
            if l.windows(2).any(|w| w[1] > w[0]) {
                violations += 1;
            }
        }
    };
    let t = toy(0.01);
    let cfg = SamplerConfig { seed: 1, track_guidance: true, ..Default::default() };
    tally(&cdpa_sample(&t.prob, &t.fdk, &t.score, &cfg).unwrap().guidance_losses);

    let truth = make_phantom(&PhantomSpec::new(PhantomKind::RandomEllipses2d, 16).with_seed(2)).unwrap();
    let g = Geometry::desk_parallel(16, 1.0).unwrap();
    let prob = DcProblem::from_projections(&forward(&truth, &g, &uniform_angles(8, 0.0, 360.0).unwrap()).unwrap()).unwrap();
    let prior = AnalyticGaussianScore::new(vec![0.3; 256], vec![0.05; 256]).unwrap();
    tally(&dpa_sample(&prob, &prior, &cfg).unwrap().guidance_losses);
    let all_steps = steps_seen.iter().all(|&n| n == 50);
    check(
        violations == 0 && all_steps,
        format!("{violations} of {loops} inner loops increased the full-view loss; steps tracked {steps_seen:?} (want 50 each)"),
    )
}

fn mc_variance_criterion() -> Outcome {
    let t = toy(0.01);
    let pool: Vec<Volume> = (0..512)
        .map(|s| cdpa_sample(&t.prob, &t.fdk, &t.score, &SamplerConfig { seed: 1000 + s, ..Default::default() }).unwrap().volume)
        .collect();
    let sizes = [1usize, 2, 4, 8, 16];
    let mut log_n = Vec::new();
    let mut log_var = Vec::new();
    for &n in &sizes {
        let means: Vec<Volume> = pool.chunks(n).map(|c| mc_mean(c).unwrap()).collect();
        let g = means.len() as f64;
        let mut var = 0.0;
        for i in 0..16 {
            let m = means.iter().map(|v| v.data()[i] as f64).sum::<f64>() / g;
            var += means.iter().map(|v| (v.data()[i] as f64 - m).powi(2)).sum::<f64>() / (g - 1.0) / 16.0;
        }
        log_n.push((n as f64).ln());
        log_var.push(var.ln());
    }
    let slope = linear_fit(&log_n, &log_var).map(|f| f.slope).unwrap_or(f64::NAN);
    check((slope + 1.0).abs() <= 0.15, format!("log-log slope {slope:.3} (want -1 ± 0.15)"))
}

fn metrics_criterion() -> Outcome {
    let reference = Volume::from_fn([16, 16, 16], |z, y, x| ((z * 31 + y * 7 + x * 3) % 9) as f32 * 0.5);
    // range 10, every voxel off by exactly 1: MSE 1, PSNR 10·log10(100)
    let shifted = reference.map(|v| v + 1.0);
    let p = psnr(&shifted, &reference, &MetricConfig::new(0.0, 10.0).unwrap()).unwrap();
    let s3 = ssim(&reference, &reference, &MetricConfig::UNIT).unwrap();
    let slice = Volume::from_vec([1, 16, 16], reference.slice(1).to_vec()).unwrap();
    let s2 = ssim2d(&slice, &slice, &MetricConfig::UNIT).unwrap();

    let mut r = rng::stream(9, Purpose::Test, 13, 0);
    let errors: Vec<f64> = (0..20_000).map(|_| r.random_range(0.0..1.0)).collect();
    let labels: Vec<bool> = errors.iter().map(|&e| e > 0.9).collect();
    let perfect = auc(&roc_curve(&errors, &labels).unwrap());
    let noise: Vec<f64> = (0..errors.len()).map(|_| r.random_range(0.0..1.0)).collect();
    let random = auc(&roc_curve(&noise, &labels).unwrap());
    check(
        (p - 20.0).abs() <= 1e-12 && s3 == 1.0 && s2 == 1.0 && perfect == 1.0 && (random - 0.5).abs() <= 0.05,
        format!("PSNR {p:.12} dB (want 20); SSIM(x, x) 3D {s3}, 2D {s2}; AUC perfect {perfect}, random {random:.3} (0.5 ± 0.05)"),
    )
}

fn run_experiment(out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_cdpa"))
        .args(["--threads", "1", "experiment", "--size", "32", "--test-count", "1", "--train-count", "8"])
        .args(["--samples", "2", "--steps", "20", "--views", "20", "--seed", "11", "--save-volumes", "--out"])
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("experiment exited with {status}"))
    }
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism_criterion() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_experiment(&a)?;
    run_experiment(&b)?;
    let fa = files_under(&a);
    let fb = files_under(&b);
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    let differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    let has_manifest = names.contains(&"manifest.json");
    check(
        fa.len() == fb.len() && differing.is_empty() && has_manifest && fa.len() > 3,
        format!("{} files compared incl. manifest.json: {has_manifest}; differing {differing:?}", fa.len()),
    )
}

fn weight_loader_criterion() -> Outcome {
    let desc = Descriptor::with_channels(Mode::NoisePrediction, vec![4, 8], 2, 4, Some(8));
    let mut state = 0x1234_5678u32;
    let net = UNet::from_fn(&desc, |_, dims| {
        (0..dims.iter().product::<usize>())
            .map(|_| {
                state = state.wrapping_mul(1_664_525).wrapping_add(1_013_904_223);
                f32::from_bits(0x3c00_0000 | (state >> 9))
            })
            .collect()
    })
    .unwrap();
    let bytes = net.weights().to_bytes().unwrap();
    let back = UNet::from_bytes(&bytes).unwrap();
    let bitwise = back.weights().to_bytes().unwrap() == bytes
        && net.weights().iter().zip(back.weights().iter()).all(|((n1, t1), (n2, t2))| {
            n1 == n2 && t1.dims() == t2.dims() && t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits())
        });

    let mut failures = Vec::new();
    let mut expect = |label: &str, bytes: &[u8], ok: fn(&NetError) -> bool| match UNet::from_bytes(bytes) {
        Err(e) if ok(&e) => {}
        other => failures.push(format!("{label}: {:?}", other.err())),
    };
    let reseal = |mut b: Vec<u8>| {
        let body = b.len() - 4;
        let crc = crc32fast::hash(&b[..body]);
        b[body..].copy_from_slice(&crc.to_le_bytes());
        b
    };
    let mut b = bytes.clone();
    b[0] = b'X';
    expect("bad magic", &b, |e| matches!(e, NetError::BadMagic));
    let mut b = bytes.clone();
    b[4] = 7;
    expect("version", &b, |e| matches!(e, NetError::UnsupportedVersion(7)));
    expect("truncated", &bytes[..bytes.len() / 2], |e| matches!(e, NetError::Truncated));
    let mut b = bytes.clone();
    b.extend_from_slice(&[0, 0]);
    expect("trailing", &b, |e| matches!(e, NetError::TrailingBytes(_) | NetError::ChecksumMismatch { .. }));
    let mut b = bytes.clone();
    let mid = b.len() - 40;
    b[mid] ^= 0x01;
    expect("checksum", &b, |e| matches!(e, NetError::ChecksumMismatch { .. }));

    let rebuild = |edit: &dyn Fn(&str, &Tensor) -> Option<Tensor>, extra: Option<(&str, Tensor)>| {
        let mut c = Container::new(net.weights().descriptor());
        for (n, t) in net.weights().iter() {
            if let Some(t) = edit(n, t) {
                c.insert(n, t).unwrap();
            }
        }
        if let Some((n, t)) = extra {
            c.insert(n, t).unwrap();
        }
        c.to_bytes().unwrap()
    };
    let nan = rebuild(
        &|n, t| {
            let mut t = t.clone();
            if n == "conv_out.bias" {
                t.data_mut()[0] = f32::NAN;
            }
            Some(t)
        },
        None,
    );
    expect("non-finite", &nan, |e| matches!(e, NetError::NonFinite { .. }));
    expect("missing", &rebuild(&|n, t| (n != "emb.lin1.bias").then(|| t.clone()), None), |e| {
        matches!(e, NetError::MissingTensor(_))
    });
    let reshaped = rebuild(&|n, t| Some(if n == "conv_in.weight" { Tensor::zeros(vec![4, 2, 1, 9]) } else { t.clone() }), None);
    expect("shape", &reshaped, |e| matches!(e, NetError::ShapeMismatch { .. }));
    expect("unexpected", &rebuild(&|_, t| Some(t.clone()), Some(("stray", Tensor::scalar(0.0)))), |e| {
        matches!(e, NetError::UnexpectedTensor(_))
    });
    let mut b = bytes.clone();
    let dtype_at = 16 + net.weights().descriptor().len() + 4 + net.weights().iter().next().unwrap().0.len();
    b[dtype_at] = 3;
    expect("dtype", &reseal(b), |e| matches!(e, NetError::UnsupportedDtype { dtype: 3, .. }));
    let mut c = Container::new("{\"architecture\":\"other\"}");
    for (n, t) in net.weights().iter() {
        c.insert(n, t.clone()).unwrap();
    }
    expect("descriptor", &c.to_bytes().unwrap(), |e| matches!(e, NetError::BadDescriptor(_)));

    let x: Vec<f32> = (0..64).map(|i| (i % 5) as f32 - 2.0).collect();
    let cond = ConditionBundle { fdk_slice: Some(&x), slice_index: 3, num_views: 20, timestep: Some(400) };
    let zero = UNet::from_fn(&desc, |_, d| vec![0.0; d.iter().product()]).unwrap();
    let zero_ok = zero.forward(&x, [8, 8], &cond).unwrap().iter().all(|&v| v == 0.0);
    let bias = UNet::from_fn(&desc, |n, d| vec![if n == "conv_out.bias" { 0.375 } else { 0.0 }; d.iter().product()]).unwrap();
    let bias_ok = bias.forward(&x, [8, 8], &cond).unwrap().iter().all(|&v| v == 0.375);

    check(
        bitwise && failures.is_empty() && zero_ok && bias_ok,
        format!("bitwise round trip {bitwise}; malformed cases wrongly handled {failures:?}; zero net -> 0: {zero_ok}; bias-only net -> bias: {bias_ok}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("adjoint", adjoint_criterion),
        ("gradient oracle", gradient_criterion),
        ("analytic FBP/FDK", analytic_criterion),
        ("Beer-Lambert", beer_lambert_criterion),
        ("linear-Gaussian oracle", linear_gaussian_criterion),
        ("schedule/Tweedie identities", tweedie_criterion),
        ("guidance monotonicity", guidance_criterion),
        ("ensemble-mean variance scaling", mc_variance_criterion),
        ("metrics", metrics_criterion),
        ("determinism", determinism_criterion),
        ("weight loader", weight_loader_criterion),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut out = std::io::stdout();
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let line = match outcome {
            Ok(d) => format!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                format!("FAIL {name}: {d}")
            }
        };
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        writeln!(out, "{failed} acceptance criteria failed").unwrap();
        std::process::exit(1);
    }
}
