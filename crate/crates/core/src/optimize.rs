//! Data-consistency loss, its gradient and Adam-based solvers.
//!
//! The loss for a subset `S` of views is `Σ_{ψ∈S} ‖A_ψ x − y_ψ‖²` and its
//! gradient is `2 Σ_{ψ∈S} A_ψᵀ (A_ψ x − y_ψ)`. Solvers draw view mini-batches
//! from a seeded permutation per epoch.

use std::sync::Arc;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::projector::{backproject_views, project_views, Projections, Projector, ViewOperator};
use crate::rng::{self, Purpose};
use crate::volume::Volume;

pub const DEFAULT_BATCH_LIMIT: usize = 30;
pub const GUIDANCE_LR: f64 = 5e-4;
pub const FINETUNE_LR: f64 = 1e-4;
pub const FINETUNE_STEPS: usize = 100;

/// Measurements, their operator and the mini-batch size.
#[derive(Clone)]
pub struct DcProblem {
    op: Arc<dyn ViewOperator>,
    measurements: Vec<Vec<f64>>,
    batch_size: usize,
    noise_sigma: f64,
}

impl std::fmt::Debug for DcProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DcProblem")
            .field("domain", &self.op.domain_shape())
            .field("views", &self.measurements.len())
            .field("batch_size", &self.batch_size)
            .field("noise_sigma", &self.noise_sigma)
            .finish()
    }
}

impl DcProblem {
    /// `measurements[v]` holds the readings of view `v`.
    pub fn new(op: Arc<dyn ViewOperator>, measurements: Vec<Vec<f64>>) -> Result<Self> {
        if measurements.len() != op.num_views() {
            return Err(Error::ShapeMismatch {
                context: "measurement views",
                expected: vec![op.num_views()],
                found: vec![measurements.len()],
            });
        }
        if let Some(m) = measurements.iter().find(|m| m.len() != op.view_len()) {
            return Err(Error::ShapeMismatch {
                context: "measurement view length",
                expected: op.view_shape().to_vec(),
                found: vec![m.len()],
            });
        }
        if measurements.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("measurements contain non-finite values"));
        }
        if measurements.is_empty() {
            return Err(Error::invalid("a data-consistency problem needs at least one view"));
        }
        let batch_size = DEFAULT_BATCH_LIMIT.min(measurements.len());
        Ok(DcProblem {
            op,
            measurements,
            batch_size,
            noise_sigma: 0.0,
        })
    }

    pub fn from_projections(p: &Projections) -> Result<Self> {
        let op = Projector::new(&p.geometry, &p.angles)?;
        let ys = (0..p.angles.count())
            .map(|v| p.view(v).iter().map(|&x| x as f64).collect())
            .collect();
        Self::new(Arc::new(op), ys)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        self.batch_size = batch_size.min(self.num_views());
        Ok(self)
    }

    /// Declared i.i.d. Gaussian measurement noise level.
    pub fn with_noise_sigma(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_views(&self) -> usize {
        self.measurements.len()
    }

    pub fn all_views(&self) -> Vec<usize> {
        (0..self.num_views()).collect()
    }

    pub fn domain_shape(&self) -> [usize; 3] {
        self.op.domain_shape()
    }

    pub fn operator(&self) -> &dyn ViewOperator {
        self.op.as_ref()
    }

    pub fn measurements(&self) -> &[Vec<f64>] {
        &self.measurements
    }

    fn check(&self, x: &[f32], views: &[usize]) -> Result<()> {
        if x.len() != self.op.domain_len() {
            return Err(Error::ShapeMismatch {
                context: "data-consistency iterate",
                expected: self.op.domain_shape().to_vec(),
                found: vec![x.len()],
            });
        }
        if let Some(&v) = views.iter().find(|&&v| v >= self.num_views()) {
            return Err(Error::invalid(format!(
                "view {v} is not part of the problem ({} views)",
                self.num_views()
            )));
        }
        Ok(())
    }

    fn residuals(&self, x: &[f32], views: &[usize]) -> Vec<Vec<f64>> {
        let mut r = project_views(self.op.as_ref(), x, views);
        for (res, &v) in r.iter_mut().zip(views) {
            for (a, b) in res.iter_mut().zip(&self.measurements[v]) {
                *a -= b;
            }
        }
        r
    }

    pub fn loss(&self, x: &[f32], views: &[usize]) -> Result<f64> {
        self.check(x, views)?;
        Ok(self.residuals(x, views).iter().flatten().map(|r| r * r).sum())
    }

    pub fn full_loss(&self, x: &[f32]) -> Result<f64> {
        self.loss(x, &self.all_views())
    }

    pub fn gradient(&self, x: &[f32], views: &[usize]) -> Result<Vec<f64>> {
        Ok(self.loss_and_gradient(x, views)?.1)
    }

    pub fn loss_and_gradient(&self, x: &[f32], views: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check(x, views)?;
        let mut r = self.residuals(x, views);
        let loss = r.iter().flatten().map(|v| v * v).sum();
        r.iter_mut().flatten().for_each(|v| *v *= 2.0);
        Ok((loss, backproject_views(self.op.as_ref(), &r, views)))
    }
}

pub fn dc_loss(x: &Volume, problem: &DcProblem, views: &[usize]) -> Result<f64> {
    check_volume(x, problem)?;
    problem.loss(x.data(), views)
}

pub fn dc_gradient(x: &Volume, problem: &DcProblem, views: &[usize]) -> Result<Volume> {
    check_volume(x, problem)?;
    let g = problem.gradient(x.data(), views)?;
    Volume::from_vec(x.shape(), g.into_iter().map(|v| v as f32).collect())
}

fn check_volume(x: &Volume, problem: &DcProblem) -> Result<()> {
    if x.shape() != problem.domain_shape() {
        return Err(Error::ShapeMismatch {
            context: "data-consistency iterate",
            expected: problem.domain_shape().to_vec(),
            found: x.shape().to_vec(),
        });
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: GUIDANCE_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            config,
        })
    }

    /// Bias-corrected Adam update of `x` in place.
    pub fn step(&mut self, x: &mut [f32], grad: &[f64]) -> Result<()> {
        if x.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "Adam update",
                expected: vec![self.m.len()],
                found: vec![x.len(), grad.len()],
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..x.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            x[i] = (x[i] as f64 - lr * m_hat / (v_hat.sqrt() + eps)) as f32;
        }
        Ok(())
    }
}

/// Pure form of [`AdamState::step`].
pub fn adam_step(x: &Volume, grad: &Volume, state: &AdamState) -> Result<(Volume, AdamState)> {
    x.ensure_same_shape(grad, "Adam gradient")?;
    let mut next = state.clone();
    let mut out = x.clone();
    let g: Vec<f64> = grad.data().iter().map(|&v| v as f64).collect();
    next.step(out.data_mut(), &g)?;
    Ok((out, next))
}

/// Settings shared by every Adam loop over view mini-batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcLoopConfig {
    pub adam: AdamConfig,
    pub nonnegative: bool,
    pub seed: u64,
    /// Keys the shuffle stream together with `seed`.
    pub stream: (u64, u64),
    /// Record the full-view loss before the loop and after every epoch.
    pub track_loss: bool,
}

impl DcLoopConfig {
    pub fn new(lr: f64, seed: u64) -> Self {
        DcLoopConfig {
            adam: AdamConfig::with_lr(lr),
            nonnegative: false,
            seed,
            stream: (0, 0),
            track_loss: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DcTrace {
    /// Full-view loss before the first epoch and after each epoch (only
    /// populated when tracking is on).
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Runs `epochs` passes of Adam over shuffled view mini-batches, updating
/// `x` in place. A fresh Adam state is used for every call.
pub fn adam_epochs(x: &mut [f32], problem: &DcProblem, epochs: usize, cfg: &DcLoopConfig) -> Result<DcTrace> {
    run_batches(x, problem, Budget::Epochs(epochs), cfg)
}

enum Budget {
    Epochs(usize),
    Steps(usize),
}

fn run_batches(x: &mut [f32], problem: &DcProblem, budget: Budget, cfg: &DcLoopConfig) -> Result<DcTrace> {
    problem.check(x, &[])?;
    let mut state = AdamState::new(x.len(), cfg.adam)?;
    let mut rng = rng::stream(cfg.seed, Purpose::ViewShuffle, cfg.stream.0, cfg.stream.1);
    let mut trace = DcTrace::default();
    if cfg.track_loss {
        trace.epoch_losses.push(problem.full_loss(x)?);
    }
    let mut order = problem.all_views();
    let (max_epochs, max_steps) = match budget {
        Budget::Epochs(e) => (e, usize::MAX),
        Budget::Steps(s) => (usize::MAX, s),
    };
    let mut epoch = 0;
    while epoch < max_epochs && trace.steps < max_steps {
        order.shuffle(&mut rng);
        for batch in order.chunks(problem.batch_size()) {
            if trace.steps >= max_steps {
                break;
            }
            let (_, g) = problem.loss_and_gradient(x, batch)?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: trace.steps,
                    message: "data-consistency gradient is not finite".into(),
                });
            }
            state.step(x, &g)?;
            if cfg.nonnegative {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical {
                    step: trace.steps,
                    message: "iterate diverged".into(),
                });
            }
            trace.steps += 1;
        }
        epoch += 1;
        if cfg.track_loss {
            let loss = problem.full_loss(x)?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    step: trace.steps,
                    message: "data-consistency loss is not finite".into(),
                });
            }
            trace.epoch_losses.push(loss);
        }
    }
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub nonnegative: bool,
}

impl Default for GdConfig {
    fn default() -> Self {
        GdConfig {
            epochs: 50,
            lr: 1e-3,
            seed: 0,
            nonnegative: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GdResult {
    pub volume: Volume,
    pub trace: DcTrace,
}

/// Adam minimization of the data-consistency loss from `init`.
pub fn gd_reconstruct(problem: &DcProblem, init: &Volume, cfg: &GdConfig) -> Result<GdResult> {
    check_volume(init, problem)?;
    let mut x = init.clone();
    let loop_cfg = DcLoopConfig {
        adam: AdamConfig::with_lr(cfg.lr),
        nonnegative: cfg.nonnegative,
        seed: cfg.seed,
        stream: (u64::MAX, 0),
        track_loss: true,
    };
    let trace = adam_epochs(x.data_mut(), problem, cfg.epochs, &loop_cfg)?;
    Ok(GdResult { volume: x, trace })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub nonnegative: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: FINETUNE_STEPS,
            lr: FINETUNE_LR,
            seed: 0,
            nonnegative: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub volume: Volume,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// A few Adam steps on the data-consistency loss starting at `x0`.
pub fn finetune(x0: &Volume, problem: &DcProblem, cfg: &FinetuneConfig) -> Result<FinetuneResult> {
    check_volume(x0, problem)?;
    let mut x = x0.clone();
    let initial_loss = problem.full_loss(x.data())?;
    let loop_cfg = DcLoopConfig {
        adam: AdamConfig::with_lr(cfg.lr),
        nonnegative: cfg.nonnegative,
        seed: cfg.seed,
        stream: (u64::MAX, 1),
        track_loss: false,
    };
    run_batches(x.data_mut(), problem, Budget::Steps(cfg.steps), &loop_cfg)?;
    let final_loss = problem.full_loss(x.data())?;
    Ok(FinetuneResult {
        volume: x,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::DenseOperator;

    fn toy() -> (DcProblem, Vec<f32>) {
        // 3 views of 2 rows over a 4-dim domain
        let m = vec![
            1.0, 0.5, 0.0, 0.0, //
            0.0, 1.0, 0.5, 0.0, //
            0.0, 0.0, 1.0, 0.5, //
            0.5, 0.0, 0.0, 1.0, //
            1.0, 1.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 1.0,
        ];
        let op = DenseOperator::new(m.clone(), 4, 2).unwrap();
        let x = vec![0.3f32, -0.2, 0.7, 0.1];
        let y: Vec<Vec<f64>> = (0..3)
            .map(|v| {
                (0..2)
                    .map(|k| (0..4).map(|c| m[(2 * v + k) * 4 + c] * x[c] as f64).sum())
                    .collect()
            })
            .collect();
        (DcProblem::new(Arc::new(op), y).unwrap(), x)
    }

    #[test]
    fn loss_vanishes_at_truth_and_equals_energy_at_zero() {
        let (p, x) = toy();
        assert!(p.full_loss(&x).unwrap() < 1e-12);
        let energy: f64 = p.measurements().iter().flatten().map(|v| v * v).sum();
        assert!((p.full_loss(&[0.0; 4]).unwrap() - energy).abs() < 1e-12);
    }

    #[test]
    fn partition_sums_exactly() {
        let (p, _) = toy();
        let x = [0.1f32, 0.2, -0.3, 0.4];
        let parts = p.loss(&x, &[0]).unwrap() + p.loss(&x, &[1, 2]).unwrap();
        assert_eq!(parts, p.loss(&x, &[0, 1, 2]).unwrap());
    }

    #[test]
    fn unknown_view_is_rejected() {
        let (p, x) = toy();
        assert!(matches!(p.loss(&x, &[3]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn default_batch_is_capped() {
        let (p, _) = toy();
        assert_eq!(p.batch_size(), 3);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut s = AdamState::new(3, AdamConfig::with_lr(0.01)).unwrap();
        let mut x = [1.0f32, 1.0, 1.0];
        s.step(&mut x, &[2.0, -5.0, 1e-3]).unwrap();
        for (xi, sign) in x.iter().zip([-1.0, 1.0, -1.0]) {
            let d = (*xi as f64 - 1.0) * sign;
            assert!((0.99 * 0.01..=0.01 + 1e-7).contains(&d), "{d}");
        }
    }

    #[test]
    fn adam_zero_gradient_is_stationary() {
        let mut s = AdamState::new(2, AdamConfig::with_lr(0.1)).unwrap();
        let mut x = [0.25f32, -4.0];
        for _ in 0..100 {
            s.step(&mut x, &[0.0, 0.0]).unwrap();
        }
        assert_eq!(x, [0.25, -4.0]);
    }

    #[test]
    fn adam_scalar_quadratic() {
        let mut s = AdamState::new(1, AdamConfig::with_lr(0.1)).unwrap();
        let mut x = [0.0f32];
        for _ in 0..500 {
            let g = x[0] as f64 - 3.0;
            s.step(&mut x, &[g]).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-2, "{}", x[0]);
    }

    #[test]
    fn zero_epochs_and_steps_are_identity() {
        let (p, _) = toy();
        let init = Volume::from_vec([1, 1, 4], vec![0.5, 0.1, -0.2, 0.3]).unwrap();
        let gd = gd_reconstruct(&p, &init, &GdConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(gd.volume, init);
        let ft = finetune(&init, &p, &FinetuneConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(ft.volume, init);
    }

    #[test]
    fn divergence_reports_step() {
        let (p, _) = toy();
        let mut x = vec![f32::INFINITY, 0.0, 0.0, 0.0];
        let err = adam_epochs(&mut x, &p, 1, &DcLoopConfig::new(1.0, 0)).unwrap_err();
        assert!(matches!(err, Error::Numerical { step: 0, .. }), "{err}");
    }

    #[test]
    fn nonnegativity_flag_clips() {
        let (p, _) = toy();
        let mut x = vec![0.0f32; 4];
        let mut cfg = DcLoopConfig::new(0.05, 1);
        cfg.nonnegative = true;
        adam_epochs(&mut x, &p, 20, &cfg).unwrap();
        assert!(x.iter().all(|&v| v >= 0.0));
    }
}
