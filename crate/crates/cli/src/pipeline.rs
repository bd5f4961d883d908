//! Reconstruction building blocks shared by the subcommands and `experiment`.

use std::sync::Arc;

use cdpa_core::analytic::{analytic_reconstruct, beer_lambert, FilterSpec};
use cdpa_core::diffusion::{cdpa_sample, dpa_sample, ScoreModel};
use cdpa_core::geometry::{subselect_views, uniform_angles};
use cdpa_core::io::{simulate_counts, CountModel};
use cdpa_core::optimize::{finetune, gd_reconstruct, FinetuneConfig, FinetuneResult, GdConfig};
use cdpa_core::rng::child_seed;
use cdpa_core::{projector, DcProblem, Geometry, Projections, SamplerConfig, Volume};
use cdpa_net::{denoise_volume, UNet, UNetScore};
use serde::{Deserialize, Serialize};

use crate::config::{AcquisitionSection, FinetuneSection, GdInit, GdSection};
use crate::error::{CliError, CliResult};
use crate::prior::GaussianPrior;

pub const VOXEL_SIZE_MM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fbp,
    Fdk,
    Gd,
    Denoise,
    Dpa,
    Cdpa,
}

impl Method {
    pub fn is_diffusion(self) -> bool {
        matches!(self, Method::Dpa | Method::Cdpa)
    }
}

/// Learned or fitted models available to a run.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub prior: Option<GaussianPrior>,
    pub score_net: Option<Arc<UNet>>,
    pub denoiser_net: Option<Arc<UNet>>,
}

/// Parallel beam for single-slice volumes, cone beam otherwise.
pub fn default_geometry(shape: [usize; 3]) -> CliResult<Geometry> {
    let [nz, ny, nx] = shape;
    if ny != nx {
        return Err(CliError::config(format!("default geometries need square slices, got {ny}×{nx}")));
    }
    let g = if nz == 1 {
        Geometry::desk_parallel(nx, VOXEL_SIZE_MM)?
    } else {
        if nz != nx {
            return Err(CliError::config("default cone geometry needs a cubic volume"));
        }
        Geometry::desk_cone(nx, VOXEL_SIZE_MM)?
    };
    Ok(g)
}

/// Noiseless projections over `views` equally spaced angles in `[0°, 360°)`.
pub fn project(x: &Volume, geometry: &Geometry, views: usize) -> CliResult<Projections> {
    let angles = uniform_angles(views, 0.0, 360.0)?;
    Ok(projector::forward(x, geometry, &angles)?)
}

/// Photon-count simulation followed by the log transform.
pub fn corrupt(p: &Projections, acq: &AcquisitionSection, seed: u64) -> CliResult<Projections> {
    let model = CountModel { dark_level: acq.dark_level, flat_level: acq.flat_level, photon_count: acq.photons, seed };
    let clean: Vec<f32> = p.data.iter().map(|v| v.max(0.0)).collect();
    let raw = simulate_counts(&clean, &model)?;
    let li = beer_lambert(&raw)?;
    Ok(Projections::new(li.values, p.angles.clone(), p.geometry.clone())?)
}

/// The `n` views of `p` closest to an equally spaced subset.
pub fn sparse_views(p: &Projections, n: usize) -> CliResult<Projections> {
    if n == p.angles.count() {
        return Ok(p.clone());
    }
    let subset = subselect_views(&p.angles, n)?;
    let idx = p.angles.indices_of(&subset)?;
    Ok(p.select_views(&idx)?)
}

pub fn analytic(p: &Projections, filter: &FilterSpec) -> CliResult<Volume> {
    Ok(analytic_reconstruct(p, filter)?)
}

pub fn problem(p: &Projections, scale: f64) -> CliResult<DcProblem> {
    if scale == 1.0 {
        return Ok(DcProblem::from_projections(p)?);
    }
    let mut q = p.clone();
    let inv = (1.0 / scale) as f32;
    q.data.iter_mut().for_each(|v| *v *= inv);
    Ok(DcProblem::from_projections(&q)?)
}

pub fn gd(p: &Projections, init: &Volume, cfg: &GdSection, seed: u64) -> CliResult<Volume> {
    let prob = problem(p, 1.0)?;
    let gd = GdConfig { epochs: cfg.epochs, lr: cfg.lr, seed, nonnegative: cfg.nonnegative };
    Ok(gd_reconstruct(&prob, init, &gd)?.volume)
}

pub fn gd_init(kind: GdInit, fdk: &Volume) -> Volume {
    match kind {
        GdInit::Zero => Volume::zeros(fdk.shape()),
        GdInit::Fdk => fdk.clone(),
    }
}

pub fn refine(x: &Volume, p: &Projections, cfg: &FinetuneSection, seed: u64) -> CliResult<FinetuneResult> {
    let prob = problem(p, 1.0)?;
    let ft = FinetuneConfig { steps: cfg.steps, lr: cfg.lr, seed, ..FinetuneConfig::default() };
    Ok(finetune(x, &prob, &ft)?)
}

/// Network denoiser when present, otherwise the prior's posterior mean.
pub fn denoise(models: &Models, fdk: &Volume, num_views: usize) -> CliResult<Volume> {
    if let Some(net) = &models.denoiser_net {
        return Ok(denoise_volume(net, fdk, num_views)?);
    }
    match &models.prior {
        Some(prior) => prior.denoise(fdk),
        None => Err(CliError::config("denoising needs --weights or --prior")),
    }
}

/// `samples` independent DPA or CDPA reconstructions; sample `i` uses the
/// child seed `i` of `cfg.seed`.
pub fn diffusion_ensemble(
    method: Method,
    p: &Projections,
    fdk: &Volume,
    models: &Models,
    cfg: &SamplerConfig,
    samples: usize,
) -> CliResult<Vec<Volume>> {
    let conditional = match method {
        Method::Dpa => false,
        Method::Cdpa => true,
        other => return Err(CliError::config(format!("{other:?} is not a diffusion method"))),
    };
    let (score, scale): (Box<dyn ScoreModel>, f64) = match (&models.score_net, &models.prior) {
        (Some(net), _) => {
            let s = if conditional { UNetScore::conditional(net.clone())? } else { UNetScore::unconditional(net.clone())? };
            (Box::new(s), net.descriptor().data_scale)
        }
        (None, Some(prior)) => {
            prior.check_volume(fdk)?;
            if conditional {
                (Box::new(prior.conditional()?), 1.0)
            } else {
                (Box::new(prior.unconditional()?), 1.0)
            }
        }
        (None, None) => return Err(CliError::config("diffusion methods need --weights or --prior")),
    };
    let prob = problem(p, scale)?;
    let cond = fdk.map(|v| (v as f64 / scale) as f32);
    (0..samples)
        .map(|i| {
            let c = SamplerConfig { seed: child_seed(cfg.seed, i as u64), ..*cfg };
            let s = if conditional {
                cdpa_sample(&prob, &cond, score.as_ref(), &c)?
            } else {
                dpa_sample(&prob, score.as_ref(), &c)?
            };
            Ok(s.volume.map(|v| (v as f64 * scale) as f32))
        })
        .collect()
}
