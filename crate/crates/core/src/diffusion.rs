//! Variance-preserving diffusion schedules, DDIM sampling and the
//! posterior-alignment samplers.
//!
//! Sampling runs slice by slice: every 2D slice of the iterate gets its own
//! score evaluation, DDIM update and re-noising, each with a random stream
//! keyed by `(seed, slice, timestep)`. Data-consistency guidance acts on the
//! assembled Tweedie estimate, so it also covers cone-beam operators whose
//! rays cross slices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optimize::{adam_epochs, AdamConfig, DcLoopConfig, DcProblem, GUIDANCE_LR};
use crate::rng::{self, Purpose};
use crate::volume::Volume;

pub const TRAIN_STEPS: usize = 1000;
pub const INFERENCE_STEPS: usize = 50;
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 2e-2;

/// `α_t = √ᾱ_t` and `σ_t = √(1 − ᾱ_t)` for `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(train_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_steps == 0 {
            return Err(Error::invalid("schedule needs at least one training step"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let mut alpha = Vec::with_capacity(train_steps + 1);
        let mut sigma = Vec::with_capacity(train_steps + 1);
        alpha.push(1.0);
        sigma.push(0.0);
        let mut abar = 1.0f64;
        for s in 1..=train_steps {
            let frac = if train_steps == 1 {
                0.0
            } else {
                (s - 1) as f64 / (train_steps - 1) as f64
            };
            let beta = beta_start + frac * (beta_end - beta_start);
            abar *= 1.0 - beta;
            alpha.push(abar.sqrt());
            sigma.push((1.0 - abar).sqrt());
        }
        Ok(NoiseSchedule { alpha, sigma })
    }

    pub fn train_steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn timestep(&self, t: usize) -> Result<Timestep> {
        self.check(t)?;
        Ok(Timestep {
            index: t,
            alpha: self.alpha[t],
            sigma: self.sigma[t],
        })
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.train_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [0, {}]",
                self.train_steps()
            )));
        }
        Ok(())
    }

    /// Uniformly strided timesteps from `T` down to `0` (inclusive), e.g.
    /// `1000, 980, …, 20, 0` for 50 steps.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t_max = self.train_steps();
        if steps == 0 || steps > t_max {
            return Err(Error::invalid(format!("inference steps must be in [1, {t_max}]")));
        }
        Ok((0..=steps)
            .map(|i| ((steps - i) as f64 * t_max as f64 / steps as f64).round() as usize)
            .collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(TRAIN_STEPS, BETA_START, BETA_END).expect("default schedule is valid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timestep {
    pub index: usize,
    pub alpha: f64,
    pub sigma: f64,
}

/// Conditioning inputs for one slice.
#[derive(Clone, Copy, Debug, Default)]
pub struct Condition<'a> {
    /// Analytic reconstruction of the same slice.
    pub fdk: Option<&'a [f32]>,
    pub slice_index: usize,
    pub num_views: usize,
}

/// Noise predictor `ε̂(x_t, t, condition)` for one 2D slice.
pub trait ScoreModel: Send + Sync {
    /// `x_t` is a row-major `shape = [ny, nx]` slice.
    fn predict(&self, x_t: &[f32], shape: [usize; 2], t: Timestep, cond: &Condition) -> Result<Vec<f32>>;

    fn is_conditional(&self) -> bool {
        false
    }
}

/// Per-pixel parameters, either shared by all slices or one block per slice.
#[derive(Clone, Debug, PartialEq)]
struct PixelTable {
    values: Vec<f32>,
}

impl PixelTable {
    fn for_slice(&self, slice: usize, len: usize) -> Result<&[f32]> {
        if len == 0 || self.values.len() % len != 0 {
            return Err(Error::invalid(format!(
                "score parameters of length {} do not tile slices of {len} pixels",
                self.values.len()
            )));
        }
        let blocks = self.values.len() / len;
        let b = if blocks == 1 { 0 } else { slice };
        if b >= blocks {
            return Err(Error::invalid(format!(
                "slice {slice} has no score parameters ({blocks} slices stored)"
            )));
        }
        Ok(&self.values[b * len..(b + 1) * len])
    }
}

fn check_positive(name: &str, v: &[f32]) -> Result<()> {
    if v.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("{name} must be positive and finite")));
    }
    Ok(())
}

/// Exact noise predictor of an independent Gaussian prior
/// `x₀ ~ N(μ, diag v)`: `ε̂ = σ (x − α μ) / (α² v + σ²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussianScore {
    mean: PixelTable,
    var: PixelTable,
}

impl AnalyticGaussianScore {
    /// `mean` and `var` hold one slice, or one block per slice.
    pub fn new(mean: Vec<f32>, var: Vec<f32>) -> Result<Self> {
        if mean.len() != var.len() || mean.is_empty() {
            return Err(Error::invalid("prior mean and variance must have equal, nonzero length"));
        }
        check_positive("prior variance", &var)?;
        Ok(AnalyticGaussianScore {
            mean: PixelTable { values: mean },
            var: PixelTable { values: var },
        })
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean.values
    }

    pub fn var(&self) -> &[f32] {
        &self.var.values
    }
}

fn gaussian_eps(x: &[f32], mean: &[f32], var: &[f32], t: Timestep) -> Vec<f32> {
    let (a, s) = (t.alpha, t.sigma);
    x.iter()
        .zip(mean.iter().zip(var))
        .map(|(&x, (&m, &v))| (s * (x as f64 - a * m as f64) / (a * a * v as f64 + s * s)) as f32)
        .collect()
}

impl ScoreModel for AnalyticGaussianScore {
    fn predict(&self, x_t: &[f32], _shape: [usize; 2], t: Timestep, cond: &Condition) -> Result<Vec<f32>> {
        let mean = self.mean.for_slice(cond.slice_index, x_t.len())?;
        let var = self.var.for_slice(cond.slice_index, x_t.len())?;
        Ok(gaussian_eps(x_t, mean, var, t))
    }
}

/// Exact noise predictor of `x₀ | c` where `x₀ ~ N(μ, diag v)` and the
/// condition is `c = x₀ + n`, `n ~ N(0, diag v_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalGaussianScore {
    prior: AnalyticGaussianScore,
    cond_var: PixelTable,
}

impl ConditionalGaussianScore {
    pub fn new(mean: Vec<f32>, var: Vec<f32>, cond_var: Vec<f32>) -> Result<Self> {
        if cond_var.len() != var.len() {
            return Err(Error::invalid("condition variance must match the prior layout"));
        }
        check_positive("condition variance", &cond_var)?;
        Ok(ConditionalGaussianScore {
            prior: AnalyticGaussianScore::new(mean, var)?,
            cond_var: PixelTable { values: cond_var },
        })
    }

    pub fn prior(&self) -> &AnalyticGaussianScore {
        &self.prior
    }

    pub fn cond_var(&self) -> &[f32] {
        &self.cond_var.values
    }

    /// Mean and variance of `x₀ | c` for one slice.
    pub fn posterior(&self, c: &[f32], slice: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let mean = self.prior.mean.for_slice(slice, c.len())?;
        let var = self.prior.var.for_slice(slice, c.len())?;
        let vc = self.cond_var.for_slice(slice, c.len())?;
        let mut pm = Vec::with_capacity(c.len());
        let mut pv = Vec::with_capacity(c.len());
        for i in 0..c.len() {
            let (m, v, w) = (mean[i] as f64, var[i] as f64, vc[i] as f64);
            pm.push(((w * m + v * c[i] as f64) / (v + w)) as f32);
            pv.push((v * w / (v + w)) as f32);
        }
        Ok((pm, pv))
    }
}

impl ScoreModel for ConditionalGaussianScore {
    fn predict(&self, x_t: &[f32], _shape: [usize; 2], t: Timestep, cond: &Condition) -> Result<Vec<f32>> {
        let c = cond
            .fdk
            .ok_or_else(|| Error::invalid("conditional score called without an analytic condition"))?;
        if c.len() != x_t.len() {
            return Err(Error::ShapeMismatch {
                context: "score condition",
                expected: vec![x_t.len()],
                found: vec![c.len()],
            });
        }
        let (m, v) = self.posterior(c, cond.slice_index)?;
        Ok(gaussian_eps(x_t, &m, &v, t))
    }

    fn is_conditional(&self) -> bool {
        true
    }
}

/// `α_t x₀ + σ_t ε`.
pub fn add_noise(x0: &[f32], t: usize, eps: &[f32], schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    schedule.check(t)?;
    same_len(x0, eps, "noise")?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (a * x as f64 + s * e as f64) as f32)
        .collect())
}

/// `(x_t − σ_t ε̂) / α_t`; identity at `t = 0`.
pub fn tweedie(x_t: &[f32], eps: &[f32], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f32>> {
    schedule.check(t)?;
    same_len(x_t, eps, "noise prediction")?;
    if t == 0 {
        return Ok(x_t.to_vec());
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    Ok(x_t
        .iter()
        .zip(eps)
        .map(|(&x, &e)| ((x as f64 - s * e as f64) / a) as f32)
        .collect())
}

fn same_len(a: &[f32], b: &[f32], context: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![a.len()],
            found: vec![b.len()],
        });
    }
    Ok(())
}

/// One DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &[f32],
    eps: &[f32],
    t: usize,
    t_prev: usize,
    eta: f64,
    schedule: &NoiseSchedule,
    rng: &mut rng::Stream,
) -> Result<Vec<f32>> {
    if t_prev >= t {
        return Err(Error::invalid(format!("DDIM step must go backwards, got {t} -> {t_prev}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
    }
    let x0 = tweedie(x_t, eps, t, schedule)?;
    let (a_t, s_t) = (schedule.alpha(t), schedule.sigma(t));
    let (a_p, s_p) = (schedule.alpha(t_prev), schedule.sigma(t_prev));
    let tilde = if eta > 0.0 {
        eta * ((s_p * s_p) / (s_t * s_t) * (1.0 - (a_t * a_t) / (a_p * a_p))).max(0.0).sqrt()
    } else {
        0.0
    };
    let dir = (s_p * s_p - tilde * tilde).max(0.0).sqrt();
    let mut out: Vec<f32> = x0
        .iter()
        .zip(eps)
        .map(|(&x, &e)| (a_p * x as f64 + dir * e as f64) as f32)
        .collect();
    if tilde > 0.0 {
        let z = rng::normal_vec(rng, out.len());
        for (o, z) in out.iter_mut().zip(z) {
            *o = (*o as f64 + tilde * z as f64) as f32;
        }
    }
    Ok(out)
}

/// How a refined estimate is mapped back to noise level `t_prev`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ResampleMode {
    /// `α x̂₀ + σ z`.
    ForwardRenoise,
    /// Gaussian blend of the re-noised estimate with the unguided DDIM
    /// iterate; `gamma` scales the variance given to the estimate.
    PosteriorBlend { gamma: f64 },
}

impl Default for ResampleMode {
    fn default() -> Self {
        ResampleMode::ForwardRenoise
    }
}

/// Maps `x0` to noise level `t_prev`. `unguided_prev` is the plain DDIM
/// iterate at `t_prev`, needed by the blend mode.
pub fn resample_map(
    x0: &[f32],
    unguided_prev: Option<&[f32]>,
    t_prev: usize,
    mode: ResampleMode,
    schedule: &NoiseSchedule,
    rng: &mut rng::Stream,
) -> Result<Vec<f32>> {
    schedule.check(t_prev)?;
    if t_prev == 0 {
        return Ok(x0.to_vec());
    }
    let (a, s) = (schedule.alpha(t_prev), schedule.sigma(t_prev));
    let z = rng::normal_vec(rng, x0.len());
    match mode {
        ResampleMode::ForwardRenoise => Ok(x0
            .iter()
            .zip(z)
            .map(|(&x, z)| (a * x as f64 + s * z as f64) as f32)
            .collect()),
        ResampleMode::PosteriorBlend { gamma } => {
            if !(gamma > 0.0) {
                return Err(Error::invalid("posterior blend needs gamma > 0"));
            }
            let prev = unguided_prev.ok_or_else(|| Error::invalid("posterior blend needs the unguided iterate"))?;
            same_len(x0, prev, "unguided iterate")?;
            let (s2, n2) = (gamma * s * s, s * s);
            let std = (s2 * n2 / (s2 + n2)).sqrt();
            Ok(x0
                .iter()
                .zip(prev)
                .zip(z)
                .map(|((&x, &p), z)| {
                    let mean = (s2 * a * x as f64 + n2 * p as f64) / (s2 + n2);
                    (mean + std * z as f64) as f32
                })
                .collect())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub eta: f64,
    pub guidance_epochs: usize,
    pub guidance_lr: f64,
    pub resample: ResampleMode,
    pub seed: u64,
    pub nonnegative: bool,
    /// Record the full-view loss around every guidance epoch.
    #[serde(skip)]
    pub track_guidance: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: INFERENCE_STEPS,
            eta: 0.0,
            guidance_epochs: 5,
            guidance_lr: GUIDANCE_LR,
            resample: ResampleMode::ForwardRenoise,
            seed: 0,
            nonnegative: false,
            track_guidance: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        AdamConfig::with_lr(self.guidance_lr).validate()
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub volume: Volume,
    /// Per diffusion step: full-view loss before guidance and after each
    /// epoch. Empty unless tracking is on.
    pub guidance_losses: Vec<Vec<f64>>,
}

/// Unguided DDIM sampling of a `shape` volume, slice by slice.
pub fn ddim_sample(
    shape: [usize; 3],
    score: &dyn ScoreModel,
    condition: Option<&Volume>,
    num_views: usize,
    cfg: &SamplerConfig,
) -> Result<Volume> {
    Ok(run(shape, score, condition, num_views, None, cfg)?.volume)
}

/// Diffusion posterior alignment with an unconditional score.
pub fn dpa_sample(problem: &DcProblem, score: &dyn ScoreModel, cfg: &SamplerConfig) -> Result<Sample> {
    if score.is_conditional() {
        return Err(Error::invalid("dpa sampling expects an unconditional score"));
    }
    let shape = problem.domain_shape();
    run(shape, score, None, problem.num_views(), Some(problem), cfg)
}

/// Conditional diffusion posterior alignment: every slice's score sees the
/// matching slice of `fdk`, its index and the view count.
pub fn cdpa_sample(
    problem: &DcProblem,
    fdk: &Volume,
    score: &dyn ScoreModel,
    cfg: &SamplerConfig,
) -> Result<Sample> {
    let shape = problem.domain_shape();
    if fdk.shape() != shape {
        return Err(Error::ShapeMismatch {
            context: "analytic condition",
            expected: shape.to_vec(),
            found: fdk.shape().to_vec(),
        });
    }
    run(shape, score, Some(fdk), problem.num_views(), Some(problem), cfg)
}

fn run(
    shape: [usize; 3],
    score: &dyn ScoreModel,
    condition: Option<&Volume>,
    num_views: usize,
    problem: Option<&DcProblem>,
    cfg: &SamplerConfig,
) -> Result<Sample> {
    cfg.validate()?;
    let schedule = NoiseSchedule::default();
    let times = schedule.inference_timesteps(cfg.steps)?;
    let [nz, ny, nx] = shape;
    let plane = ny * nx;
    if plane == 0 || nz == 0 {
        return Err(Error::invalid("cannot sample an empty volume"));
    }
    let guided = problem.is_some() && cfg.guidance_epochs > 0;
    let blend = matches!(cfg.resample, ResampleMode::PosteriorBlend { .. });

    let mut x: Vec<f32> = vec![0.0; nz * plane];
    x.par_chunks_mut(plane).enumerate().for_each(|(z, s)| {
        let mut r = rng::stream(cfg.seed, Purpose::InitialNoise, z as u64, 0);
        rng::fill_normal(&mut r, s);
    });

    let mut guidance_losses = Vec::new();
    let mut x0 = vec![0.0f32; nz * plane];
    for (step, pair) in times.windows(2).enumerate() {
        let (t, t_prev) = (pair[0], pair[1]);
        let ts = schedule.timestep(t)?;
        // score, Tweedie estimate and (when needed) the unguided DDIM update
        let per_slice: Vec<Result<(Vec<f32>, Option<Vec<f32>>)>> = x
            .par_chunks(plane)
            .enumerate()
            .map(|(z, xs)| {
                let cond = Condition {
                    fdk: condition.map(|c| c.slice(z)),
                    slice_index: z,
                    num_views,
                };
                let eps = score.predict(xs, [ny, nx], ts, &cond)?;
                if eps.len() != plane || eps.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerical {
                        step,
                        message: format!("score output for slice {z} at t = {t} is not finite or misshapen"),
                    });
                }
                let xhat = tweedie(xs, &eps, t, &schedule)?;
                let prev = if !guided || blend {
                    let mut r = rng::stream(cfg.seed, Purpose::DdimNoise, z as u64, t as u64);
                    Some(ddim_step(xs, &eps, t, t_prev, cfg.eta, &schedule, &mut r)?)
                } else {
                    None
                };
                Ok((xhat, prev))
            })
            .collect();
        let mut unguided = vec![0.0f32; if !guided || blend { nz * plane } else { 0 }];
        for (z, res) in per_slice.into_iter().enumerate() {
            let (xhat, prev) = res?;
            x0[z * plane..(z + 1) * plane].copy_from_slice(&xhat);
            if let Some(p) = prev {
                unguided[z * plane..(z + 1) * plane].copy_from_slice(&p);
            }
        }

        if !guided {
            x = unguided;
            continue;
        }
        let problem = problem.expect("guided implies a problem");
        let loop_cfg = DcLoopConfig {
            adam: AdamConfig::with_lr(cfg.guidance_lr),
            nonnegative: cfg.nonnegative,
            seed: cfg.seed,
            stream: (u64::MAX - 1, t as u64),
            track_loss: cfg.track_guidance,
        };
        let trace = adam_epochs(&mut x0, problem, cfg.guidance_epochs, &loop_cfg).map_err(|e| match e {
            Error::Numerical { message, .. } => Error::Numerical {
                step,
                message: format!("guidance at t = {t}: {message}"),
            },
            other => other,
        })?;
        if cfg.track_guidance {
            guidance_losses.push(trace.epoch_losses);
        }
        let next: Vec<Result<Vec<f32>>> = x0
            .par_chunks(plane)
            .enumerate()
            .map(|(z, xs)| {
                let mut r = rng::stream(cfg.seed, Purpose::Resample, z as u64, t as u64);
                let prev = blend.then(|| &unguided[z * plane..(z + 1) * plane]);
                resample_map(xs, prev, t_prev, cfg.resample, &schedule, &mut r)
            })
            .collect();
        for (z, res) in next.into_iter().enumerate() {
            x[z * plane..(z + 1) * plane].copy_from_slice(&res?);
        }
    }
    Ok(Sample {
        volume: Volume::from_vec(shape, x)?,
        guidance_losses,
    })
}
