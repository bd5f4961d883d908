//! Desk-scale method comparison: every baseline and diffusion method on
//! held-out phantoms, scored by PSNR, SSIM and data-consistency loss.

use std::path::{Path, PathBuf};

use cdpa_core::io::{make_phantom, write_volume, PhantomSpec};
use cdpa_core::metrics::{psnr, ssim};
use cdpa_core::posterior::{abs_error, default_mask, mc_mean, mc_std, uncertainty_report};
use cdpa_core::rng::child_seed;
use cdpa_core::{SamplerConfig, Volume};
use serde::Serialize;

use crate::config::{Config, GdInit};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;
use crate::pipeline::{self, Method, Models, VOXEL_SIZE_MM};
use crate::prior::GaussianPrior;

/// Row labels and the file-name slugs used when saving volumes.
pub const METHODS: [(&str, &str); 9] = [
    ("fdk", "fdk"),
    ("gd_zero", "gd_zero"),
    ("gd_fdk", "gd_fdk"),
    ("denoise", "denoise"),
    ("denoise+FT", "denoise_ft"),
    ("dpa", "dpa"),
    ("cdpa", "cdpa"),
    ("μ(dpa)", "mu_dpa"),
    ("μ(cdpa)", "mu_cdpa"),
];

const TEST_SET: u64 = 0;
const TRAIN_SET: u64 = 1;

pub fn phantom_seed(seed: u64, set: u64, index: usize) -> u64 {
    child_seed(child_seed(seed, set), index as u64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Score {
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub dc_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UncertaintySummary {
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
    pub auc_top10: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PhantomRecord {
    pub index: usize,
    pub seed: u64,
    pub scores: Vec<Score>,
    pub cdpa_uncertainty: Option<UncertaintySummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodRow {
    pub method: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub dc_loss_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ViewsResult {
    pub views: usize,
    pub rows: Vec<MethodRow>,
    pub phantoms: Vec<PhantomRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub complete: bool,
    pub runs: Vec<ViewsResult>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOptions {
    pub out_dir: PathBuf,
    pub threads: usize,
    pub save_volumes: bool,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(views: usize, phantoms: Vec<PhantomRecord>) -> ViewsResult {
    let rows = METHODS
        .iter()
        .map(|(name, _)| {
            let pick = |f: fn(&Score) -> f64| -> Vec<f64> {
                phantoms.iter().filter_map(|p| p.scores.iter().find(|s| s.method == *name)).map(f).collect()
            };
            let (psnr_mean, psnr_std) = mean_std(&pick(|s| s.psnr));
            let (ssim_mean, ssim_std) = mean_std(&pick(|s| s.ssim));
            let (dc_loss_mean, _) = mean_std(&pick(|s| s.dc_loss));
            MethodRow { method: name.to_string(), psnr_mean, psnr_std, ssim_mean, ssim_std, dc_loss_mean }
        })
        .collect();
    ViewsResult { views, rows, phantoms }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    cdpa_core::io::atomic_write(path, text.as_bytes())?;
    Ok(())
}

pub fn markdown(result: &ExperimentResult, cfg: &Config) -> String {
    let mut s = String::from("# Sparse-view reconstruction comparison\n\n");
    s += &format!(
        "Phantom `{}` at size {}, {} test and {} training phantoms, {} diffusion samples, seed {}.\n",
        serde_json::to_value(cfg.phantom.kind).map(|v| v.as_str().unwrap_or("").to_string()).unwrap_or_default(),
        cfg.phantom.size,
        cfg.experiment.test_count,
        cfg.experiment.train_count,
        cfg.samples,
        cfg.seed
    );
    for run in &result.runs {
        s += &format!("\n## {} views\n\n", run.views);
        s += "| Method | PSNR (dB) | SSIM | DC loss |\n|---|---|---|---|\n";
        for r in &run.rows {
            s += &format!(
                "| {} | {:.2} ± {:.2} | {:.3} ± {:.3} | {:.4e} |\n",
                r.method, r.psnr_mean, r.psnr_std, r.ssim_mean, r.ssim_std, r.dc_loss_mean
            );
        }
        let unc: Vec<&UncertaintySummary> = run.phantoms.iter().filter_map(|p| p.cdpa_uncertainty.as_ref()).collect();
        if !unc.is_empty() {
            let (r, _) = mean_std(&unc.iter().filter_map(|u| u.pearson_r).collect::<Vec<_>>());
            let (a, _) = mean_std(&unc.iter().filter_map(|u| u.auc_top10).collect::<Vec<_>>());
            s += &format!("\nCDPA ensemble uncertainty: Pearson r(STD, |error|) = {r:.3}, AUC(top 10% errors) = {a:.3}.\n");
        }
    }
    s
}

fn sweep_json(result: &ExperimentResult) -> serde_json::Value {
    let views: Vec<usize> = result.runs.iter().map(|r| r.views).collect();
    let mut methods = serde_json::Map::new();
    for (i, (name, _)) in METHODS.iter().enumerate() {
        let col = |f: fn(&MethodRow) -> f64| -> Vec<f64> { result.runs.iter().map(|r| f(&r.rows[i])).collect() };
        methods.insert(
            name.to_string(),
            serde_json::json!({
                "psnr_mean": col(|r| r.psnr_mean),
                "psnr_std": col(|r| r.psnr_std),
                "ssim_mean": col(|r| r.ssim_mean),
                "ssim_std": col(|r| r.ssim_std),
            }),
        );
    }
    serde_json::json!({ "views": views, "methods": methods })
}

struct Case {
    truth: Volume,
    dense: cdpa_core::Projections,
}

fn make_case(cfg: &Config, seed: u64) -> CliResult<Case> {
    let spec = PhantomSpec {
        kind: cfg.phantom.kind,
        size: cfg.phantom.size,
        seed,
        intensity_max: cfg.phantom.intensity_max,
    };
    let truth = make_phantom(&spec)?;
    let g = pipeline::default_geometry(truth.shape())?;
    let clean = pipeline::project(&truth, &g, cfg.acquisition.full_views)?;
    let dense = if cfg.acquisition.photons.is_some() {
        pipeline::corrupt(&clean, &cfg.acquisition, child_seed(seed, 7))?
    } else {
        clean
    };
    Ok(Case { truth, dense })
}

fn load_models(cfg: &Config) -> CliResult<Models> {
    let load = |p: &Option<PathBuf>| -> CliResult<Option<std::sync::Arc<cdpa_net::UNet>>> {
        p.as_ref().map(|p| Ok(std::sync::Arc::new(cdpa_net::load_weights(p)?))).transpose()
    };
    Ok(Models {
        prior: None,
        score_net: load(&cfg.experiment.score_weights)?,
        denoiser_net: load(&cfg.experiment.denoiser_weights)?,
    })
}

fn fit_prior(cfg: &Config, views: usize) -> CliResult<GaussianPrior> {
    let mut truths = Vec::new();
    let mut fdks = Vec::new();
    for j in 0..cfg.experiment.train_count {
        let case = make_case(cfg, phantom_seed(cfg.seed, TRAIN_SET, j))?;
        let sparse = pipeline::sparse_views(&case.dense, views)?;
        fdks.push(pipeline::analytic(&sparse, &cfg.filter)?);
        truths.push(case.truth);
    }
    GaussianPrior::fit(&truths, &fdks, views)
}

fn run_phantom(
    cfg: &Config,
    models: &Models,
    views: usize,
    index: usize,
    save: Option<&Path>,
) -> CliResult<PhantomRecord> {
    let seed = phantom_seed(cfg.seed, TEST_SET, index);
    let case = make_case(cfg, seed)?;
    let sparse = pipeline::sparse_views(&case.dense, views)?;
    let prob = pipeline::problem(&sparse, 1.0)?;
    let fdk = pipeline::analytic(&sparse, &cfg.filter)?;
    let gd_zero = pipeline::gd(&sparse, &pipeline::gd_init(GdInit::Zero, &fdk), &cfg.gd, cfg.seed)?;
    let gd_fdk = pipeline::gd(&sparse, &pipeline::gd_init(GdInit::Fdk, &fdk), &cfg.gd, cfg.seed)?;
    let den = pipeline::denoise(models, &fdk, views)?;
    let den_ft = pipeline::refine(&den, &sparse, &cfg.finetune, cfg.seed)?.volume;
    let sampler = SamplerConfig { seed: child_seed(cfg.sampler.seed ^ cfg.seed, index as u64), ..cfg.sampler };
    let dpa = pipeline::diffusion_ensemble(Method::Dpa, &sparse, &fdk, models, &sampler, cfg.samples)?;
    let cdpa = pipeline::diffusion_ensemble(Method::Cdpa, &sparse, &fdk, models, &sampler, cfg.samples)?;
    let mu_dpa = mc_mean(&dpa)?;
    let mu_cdpa = mc_mean(&cdpa)?;
    let volumes: [&Volume; 9] = [&fdk, &gd_zero, &gd_fdk, &den, &den_ft, &dpa[0], &cdpa[0], &mu_dpa, &mu_cdpa];
    let mut scores = Vec::with_capacity(9);
    for ((name, slug), v) in METHODS.iter().zip(volumes) {
        if !v.is_finite() {
            return Err(CliError::Numerical(format!("{name} produced non-finite values on phantom {index}")));
        }
        scores.push(Score {
            method: name.to_string(),
            psnr: psnr(v, &case.truth, &cfg.metric)?,
            ssim: ssim(v, &case.truth, &cfg.metric)?,
            dc_loss: prob.full_loss(v.data())?,
        });
        if let Some(dir) = save {
            write_volume(&dir.join(format!("v{views}_p{index}_{slug}.raw")), v, VOXEL_SIZE_MM)?;
        }
    }
    let cdpa_uncertainty = if cdpa.len() >= 2 {
        let std = mc_std(&cdpa)?;
        let err = abs_error(&mu_cdpa, &case.truth)?;
        let mask = default_mask(&case.truth, cfg.metric.hi);
        uncertainty_report(std.data(), err.data(), Some(&mask), "ground truth above 1% of the clamp maximum")
            .ok()
            .map(|r| UncertaintySummary {
                pearson_r: r.pearson_r,
                spearman_rho: r.spearman_rho,
                auc_top10: r.roc.iter().find(|s| s.top_percent == 10.0).map(|s| s.auc),
            })
    } else {
        None
    };
    Ok(PhantomRecord { index, seed, scores, cdpa_uncertainty })
}

/// Runs the comparison, rewriting `results.json` after every phantom so an
/// interrupted run keeps its finished rows.
pub fn run(cfg: &Config, opts: &ExperimentOptions) -> CliResult<ExperimentResult> {
    cfg.validate()?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| crate::error::io_error(&opts.out_dir, e))?;
    let save_dir = if opts.save_volumes {
        let d = opts.out_dir.join("volumes");
        std::fs::create_dir_all(&d).map_err(|e| crate::error::io_error(&d, e))?;
        Some(d)
    } else {
        None
    };
    let base_models = load_models(cfg)?;
    let views_list = cfg.experiment.views_list.clone().unwrap_or_else(|| vec![cfg.acquisition.views]);
    let results_path = opts.out_dir.join("results.json");
    let mut result = ExperimentResult { complete: false, runs: Vec::new() };
    for &views in &views_list {
        let mut models = base_models.clone();
        if models.score_net.is_none() || models.denoiser_net.is_none() {
            models.prior = Some(fit_prior(cfg, views)?);
        }
        let mut phantoms = Vec::new();
        for i in 0..cfg.experiment.test_count {
            phantoms.push(run_phantom(cfg, &models, views, i, save_dir.as_deref())?);
            let mut partial = result.clone();
            partial.runs.push(aggregate(views, phantoms.clone()));
            write_json(&results_path, &partial)?;
        }
        result.runs.push(aggregate(views, phantoms));
    }
    result.complete = true;
    write_json(&results_path, &result)?;
    let md_path = opts.out_dir.join("results.md");
    cdpa_core::io::atomic_write(&md_path, markdown(&result, cfg).as_bytes())?;
    let mut manifest = Manifest::new("experiment", opts.threads, cfg)?;
    for p in [&cfg.experiment.score_weights, &cfg.experiment.denoiser_weights].into_iter().flatten() {
        manifest.input(p)?;
    }
    manifest.output("results.json", &results_path)?;
    manifest.output("results.md", &md_path)?;
    if cfg.experiment.views_list.is_some() {
        let sweep = opts.out_dir.join("sweep.json");
        write_json(&sweep, &sweep_json(&result))?;
        manifest.output("sweep.json", &sweep)?;
    }
    manifest.write(&opts.out_dir.join("manifest.json"))?;
    Ok(result)
}
