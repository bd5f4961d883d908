//! Subcommand definitions and their execution.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use cdpa_core::analytic::FilterKind;
use cdpa_core::io::{
    make_phantom, read_projections, read_volume, write_montages, write_projections, write_volume, Axis, PhantomKind,
    PhantomSpec, Window,
};
use cdpa_core::metrics::{psnr, psnr_to_json, ssim};
use cdpa_core::posterior::{abs_error, default_mask, mc_mean, mc_std, uncertainty_report};
use cdpa_core::{Geometry, MetricConfig, Volume};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{parse_views_list, Config, GdInit};
use crate::error::{io_error, CliError, CliResult};
use crate::experiment::{self, ExperimentOptions};
use crate::manifest::Manifest;
use crate::pipeline::{self, Method, Models, VOXEL_SIZE_MM};
use crate::prior::GaussianPrior;

pub const THREADS_ENV: &str = "CDPA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "cdpa", version, about = "Sparse-view CT reconstruction with diffusion posterior alignment")]
pub struct Cli {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rasterize a synthetic phantom.
    Phantom(PhantomArgs),
    /// Fit the per-pixel Gaussian prior used when no network weights are given.
    Prior(PriorArgs),
    /// Forward-project a volume.
    Project(ProjectArgs),
    /// Simulate detector counts with photon noise and log-transform them back.
    Corrupt(CorruptArgs),
    /// Reconstruct from projections.
    Recon(ReconArgs),
    /// Refine a reconstruction with a few data-consistency steps.
    Finetune(FinetuneArgs),
    /// Score a reconstruction against a reference.
    Eval(EvalArgs),
    /// Ensemble mean, standard deviation and uncertainty report.
    Posterior(PosteriorArgs),
    /// Run every method on held-out phantoms and tabulate the scores.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub kind: Option<PhantomKind>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub intensity_max: Option<f32>,
    /// Also write PNG montages next to the output.
    #[arg(long)]
    pub montage: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PriorArgs {
    #[arg(long)]
    pub kind: Option<PhantomKind>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Equally spaced views over a full rotation.
    #[arg(long)]
    pub views: Option<usize>,
    /// Geometry JSON; defaults to parallel beam for one slice, cone beam otherwise.
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CorruptArgs {
    #[arg(long)]
    pub projections: PathBuf,
    #[arg(long)]
    pub photons: Option<f64>,
    #[arg(long)]
    pub dark_level: Option<f64>,
    #[arg(long)]
    pub flat_level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReconArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long)]
    pub projections: PathBuf,
    /// Keep only this many equally spaced views.
    #[arg(long)]
    pub views: Option<usize>,
    /// Network weights: noise-prediction for dpa/cdpa, denoise mode for denoise.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Gaussian prior file, used when no weights are given.
    #[arg(long)]
    pub prior: Option<PathBuf>,
    #[arg(long)]
    pub filter: Option<FilterKind>,
    #[arg(long)]
    pub cutoff: Option<f64>,
    #[arg(long, value_enum)]
    pub init: Option<GdInit>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance_epochs: Option<usize>,
    #[arg(long)]
    pub guidance_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub montage: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub projections: PathBuf,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Dataset {
    Dental,
    Spine,
    Walnut,
    Unit,
}

impl Dataset {
    pub fn metric(self) -> MetricConfig {
        match self {
            Dataset::Dental => MetricConfig::DENTAL,
            Dataset::Spine => MetricConfig::SPINE,
            Dataset::Walnut => MetricConfig::WALNUT,
            Dataset::Unit => MetricConfig::UNIT,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Clamp range preset for PSNR and SSIM.
    #[arg(long, value_enum)]
    pub dataset: Option<Dataset>,
    /// Measurements for the data-consistency loss.
    #[arg(long)]
    pub projections: Option<PathBuf>,
    #[arg(long)]
    pub views: Option<usize>,
    /// JSON report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PosteriorArgs {
    /// Ensemble index written by `recon --samples N`.
    #[arg(long)]
    pub ensemble: PathBuf,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<Dataset>,
    #[arg(long)]
    pub out_mean: PathBuf,
    #[arg(long)]
    pub out_std: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub views: Option<usize>,
    /// Comma-separated view counts, e.g. `20,40,60`.
    #[arg(long, value_parser = parse_views_list)]
    pub views_list: Option<Vec<usize>>,
    #[arg(long)]
    pub kind: Option<PhantomKind>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub photons: Option<f64>,
    #[arg(long)]
    pub score_weights: Option<PathBuf>,
    #[arg(long)]
    pub denoiser_weights: Option<PathBuf>,
    /// Also write every reconstructed volume.
    #[arg(long)]
    pub save_volumes: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Ensemble index: sample files relative to the index's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleIndex {
    pub method: Method,
    pub samples: Vec<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

fn finish(mut m: Manifest, outputs: &[&Path], at: &Path) -> CliResult<()> {
    for o in outputs {
        let label = o.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        m.output(&label, o)?;
    }
    m.write(&manifest_path(at))
}

fn window_for(v: &Volume) -> CliResult<Window> {
    let hi = v.data().iter().copied().fold(0f32, f32::max);
    Ok(Window::new(0.0, if hi > 0.0 { hi } else { 1.0 })?)
}

fn montage_axes(v: &Volume) -> &'static [Axis] {
    if v.nz() == 1 {
        &[Axis::Z]
    } else {
        &Axis::ALL
    }
}

fn load_sparse(path: &Path, views: Option<usize>) -> CliResult<cdpa_core::Projections> {
    let p = read_projections(path)?;
    match views {
        Some(n) => pipeline::sparse_views(&p, n),
        None => Ok(p),
    }
}

pub fn run(cli: Cli, threads: usize) -> CliResult<()> {
    let mut cfg = Config::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Phantom(a) => phantom(&mut cfg, a, threads),
        Command::Prior(a) => prior(&mut cfg, a, threads),
        Command::Project(a) => project(&mut cfg, a, threads),
        Command::Corrupt(a) => corrupt(&mut cfg, a, threads),
        Command::Recon(a) => recon(&mut cfg, a, threads),
        Command::Finetune(a) => finetune(&mut cfg, a, threads),
        Command::Eval(a) => eval(&mut cfg, a, threads),
        Command::Posterior(a) => posterior(&mut cfg, a, threads),
        Command::Experiment(a) => run_experiment(&mut cfg, a, threads),
    }
}

fn phantom(cfg: &mut Config, a: PhantomArgs, threads: usize) -> CliResult<()> {
    set(&mut cfg.phantom.kind, a.kind);
    set(&mut cfg.phantom.size, a.size);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.phantom.intensity_max, a.intensity_max);
    cfg.validate()?;
    let spec = PhantomSpec {
        kind: cfg.phantom.kind,
        size: cfg.phantom.size,
        seed: cfg.seed,
        intensity_max: cfg.phantom.intensity_max,
    };
    let v = make_phantom(&spec)?;
    write_volume(&a.out, &v, VOXEL_SIZE_MM)?;
    let mut outputs = vec![a.out.clone()];
    if a.montage {
        outputs.extend(write_montages(&a.out.with_extension(""), &v, window_for(&v)?, montage_axes(&v))?);
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish(Manifest::new("phantom", threads, &spec)?, &refs, &a.out)
}

fn prior(cfg: &mut Config, a: PriorArgs, threads: usize) -> CliResult<()> {
    set(&mut cfg.phantom.kind, a.kind);
    set(&mut cfg.phantom.size, a.size);
    set(&mut cfg.acquisition.views, a.views);
    set(&mut cfg.experiment.train_count, a.train_count);
    set(&mut cfg.seed, a.seed);
    cfg.validate()?;
    let mut truths = Vec::new();
    let mut fdks = Vec::new();
    for j in 0..cfg.experiment.train_count {
        let spec = PhantomSpec {
            kind: cfg.phantom.kind,
            size: cfg.phantom.size,
            seed: experiment::phantom_seed(cfg.seed, 1, j),
            intensity_max: cfg.phantom.intensity_max,
        };
        let truth = make_phantom(&spec)?;
        let g = pipeline::default_geometry(truth.shape())?;
        let dense = pipeline::project(&truth, &g, cfg.acquisition.full_views)?;
        let sparse = pipeline::sparse_views(&dense, cfg.acquisition.views)?;
        fdks.push(pipeline::analytic(&sparse, &cfg.filter)?);
        truths.push(truth);
    }
    let p = GaussianPrior::fit(&truths, &fdks, cfg.acquisition.views)?;
    p.save(&a.out)?;
    finish(Manifest::new("prior", threads, &*cfg)?, &[&a.out], &a.out)
}

fn project(cfg: &mut Config, a: ProjectArgs, threads: usize) -> CliResult<()> {
    set(&mut cfg.acquisition.full_views, a.views);
    let (v, _) = read_volume(&a.volume)?;
    let g = match &a.geometry {
        Some(p) => Geometry::from_json(&std::fs::read_to_string(p).map_err(|e| io_error(p, e))?)?,
        None => pipeline::default_geometry(v.shape())?,
    };
    let p = pipeline::project(&v, &g, cfg.acquisition.full_views)?;
    write_projections(&a.out, &p)?;
    let mut m = Manifest::new("project", threads, &serde_json::json!({ "views": cfg.acquisition.full_views, "geometry": g }))?;
    m.input(&a.volume)?;
    if let Some(p) = &a.geometry {
        m.input(p)?;
    }
    finish(m, &[&a.out], &a.out)
}

fn corrupt(cfg: &mut Config, a: CorruptArgs, threads: usize) -> CliResult<()> {
    if a.photons.is_some() {
        cfg.acquisition.photons = a.photons;
    }
    set(&mut cfg.acquisition.dark_level, a.dark_level);
    set(&mut cfg.acquisition.flat_level, a.flat_level);
    set(&mut cfg.seed, a.seed);
    cfg.validate()?;
    let p = read_projections(&a.projections)?;
    let q = pipeline::corrupt(&p, &cfg.acquisition, cfg.seed)?;
    write_projections(&a.out, &q)?;
    let mut m = Manifest::new("corrupt", threads, &serde_json::json!({ "acquisition": cfg.acquisition, "seed": cfg.seed }))?;
    m.input(&a.projections)?;
    finish(m, &[&a.out], &a.out)
}

fn load_models(method: Method, weights: Option<&Path>, prior: Option<&Path>, m: &mut Manifest) -> CliResult<Models> {
    let mut models = Models::default();
    if let Some(w) = weights {
        let net = Arc::new(cdpa_net::load_weights(w)?);
        m.input(w)?;
        if method == Method::Denoise {
            models.denoiser_net = Some(net);
        } else {
            models.score_net = Some(net);
        }
    } else if let Some(p) = prior {
        models.prior = Some(GaussianPrior::load(p)?);
        m.input(p)?;
    }
    Ok(models)
}

fn recon(cfg: &mut Config, a: ReconArgs, threads: usize) -> CliResult<()> {
    set(&mut cfg.filter.kind, a.filter);
    set(&mut cfg.filter.cutoff, a.cutoff);
    set(&mut cfg.gd.init, a.init);
    set(&mut cfg.gd.epochs, a.epochs);
    set(&mut cfg.gd.lr, a.lr);
    set(&mut cfg.sampler.steps, a.steps);
    set(&mut cfg.sampler.guidance_epochs, a.guidance_epochs);
    set(&mut cfg.sampler.guidance_lr, a.guidance_lr);
    set(&mut cfg.seed, a.seed);
    cfg.sampler.seed = cfg.seed;
    set(&mut cfg.samples, a.samples);
    cfg.validate()?;
    let p = load_sparse(&a.projections, a.views)?;
    let is_parallel = matches!(p.geometry, Geometry::Parallel2d { .. });
    match a.method {
        Method::Fbp if !is_parallel => return Err(CliError::config("fbp needs parallel-beam projections; use fdk")),
        Method::Fdk if is_parallel => return Err(CliError::config("fdk needs cone-beam projections; use fbp")),
        _ => {}
    }
    let settings = serde_json::json!({
        "method": a.method,
        "views": p.angles.count(),
        "filter": cfg.filter,
        "gd": cfg.gd,
        "sampler": cfg.sampler,
        "samples": cfg.samples,
        "seed": cfg.seed,
    });
    let mut m = Manifest::new("recon", threads, &settings)?;
    m.input(&a.projections)?;
    let models = load_models(a.method, a.weights.as_deref(), a.prior.as_deref(), &mut m)?;
    let fdk = pipeline::analytic(&p, &cfg.filter)?;
    let mut outputs: Vec<PathBuf> = Vec::new();
    let result = match a.method {
        Method::Fbp | Method::Fdk => fdk,
        Method::Gd => pipeline::gd(&p, &pipeline::gd_init(cfg.gd.init, &fdk), &cfg.gd, cfg.seed)?,
        Method::Denoise => pipeline::denoise(&models, &fdk, p.angles.count())?,
        Method::Dpa | Method::Cdpa => {
            let samples = pipeline::diffusion_ensemble(a.method, &p, &fdk, &models, &cfg.sampler, cfg.samples)?;
            if samples.len() > 1 {
                let stem = a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let dir = a.out.parent().unwrap_or(Path::new(""));
                let mut names = Vec::new();
                for (i, s) in samples.iter().enumerate() {
                    let name = format!("{stem}_s{i:03}.raw");
                    let path = dir.join(&name);
                    write_volume(&path, s, VOXEL_SIZE_MM)?;
                    outputs.push(path);
                    names.push(name);
                }
                let index = EnsembleIndex { method: a.method, samples: names };
                let index_path = a.out.with_extension("ensemble.json");
                let text = serde_json::to_string_pretty(&index)? + "\n";
                cdpa_core::io::atomic_write(&index_path, text.as_bytes())?;
                outputs.push(index_path);
                mc_mean(&samples)?
            } else {
                samples.into_iter().next().expect("one sample")
            }
        }
    };
    if !result.is_finite() {
        return Err(CliError::Numerical(format!("{:?} reconstruction is not finite", a.method)));
    }
    write_volume(&a.out, &result, VOXEL_SIZE_MM)?;
    outputs.insert(0, a.out.clone());
    if a.montage {
        outputs.extend(write_montages(&a.out.with_extension(""), &result, window_for(&result)?, montage_axes(&result))?);
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish(m, &refs, &a.out)
}

fn finetune(cfg: &mut Config, a: FinetuneArgs, threads: usize) -> CliResult<()> {
    set(&mut cfg.finetune.steps, a.steps);
    set(&mut cfg.finetune.lr, a.lr);
    set(&mut cfg.seed, a.seed);
    cfg.validate()?;
    let (x, _) = read_volume(&a.volume)?;
    let p = load_sparse(&a.projections, a.views)?;
    let r = pipeline::refine(&x, &p, &cfg.finetune, cfg.seed)?;
    write_volume(&a.out, &r.volume, VOXEL_SIZE_MM)?;
    let settings = serde_json::json!({
        "finetune": cfg.finetune,
        "seed": cfg.seed,
        "views": p.angles.count(),
        "initial_loss": r.initial_loss,
        "final_loss": r.final_loss,
    });
    let mut m = Manifest::new("finetune", threads, &settings)?;
    m.input(&a.volume)?;
    m.input(&a.projections)?;
    println!("dc_loss {:.6e} -> {:.6e}", r.initial_loss, r.final_loss);
    finish(m, &[&a.out], &a.out)
}

fn metric(cfg: &Config, dataset: Option<Dataset>) -> MetricConfig {
    dataset.map(Dataset::metric).unwrap_or(cfg.metric)
}

fn emit(report: &serde_json::Value, out: Option<&Path>) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    match out {
        Some(p) => Ok(cdpa_core::io::atomic_write(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn eval(cfg: &mut Config, a: EvalArgs, _threads: usize) -> CliResult<()> {
    let mc = metric(cfg, a.dataset);
    mc.validate()?;
    let (x, _) = read_volume(&a.volume)?;
    let (r, _) = read_volume(&a.reference)?;
    let mut report = serde_json::json!({
        "psnr": psnr_to_json(psnr(&x, &r, &mc)?),
        "ssim": ssim(&x, &r, &mc)?,
        "clamp": mc,
    });
    if let Some(pp) = &a.projections {
        let p = load_sparse(pp, a.views)?;
        report["dc_loss"] = serde_json::json!(pipeline::problem(&p, 1.0)?.full_loss(x.data())?);
        report["views"] = serde_json::json!(p.angles.count());
    }
    emit(&report, a.out.as_deref())
}

fn posterior(cfg: &mut Config, a: PosteriorArgs, threads: usize) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.ensemble).map_err(|e| io_error(&a.ensemble, e))?;
    let index: EnsembleIndex = serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", a.ensemble.display())))?;
    let dir = a.ensemble.parent().unwrap_or(Path::new(""));
    let samples = index
        .samples
        .iter()
        .map(|n| Ok(read_volume(&dir.join(n))?.0))
        .collect::<CliResult<Vec<Volume>>>()?;
    let mean = mc_mean(&samples)?;
    let std = mc_std(&samples)?;
    write_volume(&a.out_mean, &mean, VOXEL_SIZE_MM)?;
    write_volume(&a.out_std, &std, VOXEL_SIZE_MM)?;
    let mut m = Manifest::new("posterior", threads, &serde_json::json!({ "method": index.method, "samples": samples.len() }))?;
    m.input(&a.ensemble)?;
    let mut outputs = vec![a.out_mean.clone(), a.out_std.clone()];
    if let Some(rp) = &a.reference {
        m.input(rp)?;
        let mc = metric(cfg, a.dataset);
        let (truth, _) = read_volume(rp)?;
        let err = abs_error(&mean, &truth)?;
        let mask = default_mask(&truth, mc.hi);
        let unc = uncertainty_report(std.data(), err.data(), Some(&mask), "ground truth above 1% of the clamp maximum")?;
        let report = serde_json::json!({
            "mean_psnr": psnr_to_json(psnr(&mean, &truth, &mc)?),
            "mean_ssim": ssim(&mean, &truth, &mc)?,
            "uncertainty": unc,
        });
        let path = a.report.clone().unwrap_or_else(|| a.out_std.with_extension("report.json"));
        emit(&report, Some(&path))?;
        outputs.push(path);
    }
    let refs: Vec<&Path> = outputs.iter().map(PathBuf::as_path).collect();
    finish(m, &refs, &a.out_mean)
}

fn run_experiment(cfg: &mut Config, a: ExperimentArgs, threads: usize) -> CliResult<()> {
    set(&mut cfg.acquisition.views, a.views);
    if a.views_list.is_some() {
        cfg.experiment.views_list = a.views_list;
    }
    set(&mut cfg.phantom.kind, a.kind);
    set(&mut cfg.phantom.size, a.size);
    set(&mut cfg.experiment.test_count, a.test_count);
    set(&mut cfg.experiment.train_count, a.train_count);
    set(&mut cfg.samples, a.samples);
    set(&mut cfg.sampler.steps, a.steps);
    set(&mut cfg.gd.epochs, a.epochs);
    set(&mut cfg.seed, a.seed);
    if a.photons.is_some() {
        cfg.acquisition.photons = a.photons;
    }
    if a.score_weights.is_some() {
        cfg.experiment.score_weights = a.score_weights;
    }
    if a.denoiser_weights.is_some() {
        cfg.experiment.denoiser_weights = a.denoiser_weights;
    }
    let opts = ExperimentOptions { out_dir: a.out, threads, save_volumes: a.save_volumes };
    let result = experiment::run(cfg, &opts)?;
    print!("{}", experiment::markdown(&result, cfg));
    Ok(())
}
