//! Run configuration: a JSON file whose every field has a default, overridden
//! field by field from command-line flags.

use std::path::{Path, PathBuf};

use cdpa_core::analytic::FilterSpec;
use cdpa_core::io::PhantomKind;
use cdpa_core::{MetricConfig, SamplerConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_error, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Phantom family; single-slice kinds run 2D parallel-beam experiments.
    pub phantom: PhantomSection,
    pub acquisition: AcquisitionSection,
    pub filter: FilterSpec,
    pub gd: GdSection,
    pub finetune: FinetuneSection,
    pub sampler: SamplerConfig,
    /// Ensemble size for diffusion reconstructions.
    pub samples: usize,
    pub metric: MetricConfig,
    pub experiment: ExperimentSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomSection::default(),
            acquisition: AcquisitionSection::default(),
            filter: FilterSpec::default(),
            gd: GdSection::default(),
            finetune: FinetuneSection::default(),
            sampler: SamplerConfig::default(),
            samples: cdpa_core::posterior::DEFAULT_ENSEMBLE,
            metric: MetricConfig::UNIT,
            experiment: ExperimentSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub kind: PhantomKind,
    pub size: usize,
    pub intensity_max: f32,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self { kind: PhantomKind::RandomEllipses2d, size: 64, intensity_max: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSection {
    /// Views in the dense acquisition that sparse subsets are drawn from.
    pub full_views: usize,
    /// Views used for reconstruction.
    pub views: usize,
    /// Incident photons per detector pixel; `None` means noiseless.
    pub photons: Option<f64>,
    pub dark_level: f64,
    pub flat_level: f64,
}

impl Default for AcquisitionSection {
    fn default() -> Self {
        Self { full_views: 180, views: 20, photons: None, dark_level: 0.0, flat_level: 1.0e4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GdInit {
    Zero,
    Fdk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdSection {
    pub epochs: usize,
    pub lr: f64,
    pub init: GdInit,
    pub nonnegative: bool,
}

impl Default for GdSection {
    fn default() -> Self {
        let d = cdpa_core::optimize::GdConfig::default();
        Self { epochs: d.epochs, lr: d.lr, init: GdInit::Zero, nonnegative: d.nonnegative }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self { steps: cdpa_core::optimize::FINETUNE_STEPS, lr: cdpa_core::optimize::FINETUNE_LR }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub test_count: usize,
    pub train_count: usize,
    pub views_list: Option<Vec<usize>>,
    /// Noise-prediction network; the fitted Gaussian prior is used when absent.
    pub score_weights: Option<PathBuf>,
    /// Denoise-mode network; the Gaussian posterior mean is used when absent.
    pub denoiser_weights: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            test_count: 5,
            train_count: 32,
            views_list: None,
            score_weights: None,
            denoiser_weights: None,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::config(m));
        if self.phantom.size < 4 {
            return bad("phantom.size must be at least 4");
        }
        if !(self.phantom.intensity_max > 0.0) {
            return bad("phantom.intensity_max must be positive");
        }
        let a = &self.acquisition;
        if a.views == 0 || a.full_views == 0 || a.views > a.full_views {
            return bad("acquisition.views must lie in 1..=acquisition.full_views");
        }
        if let Some(p) = a.photons {
            if !(p > 0.0 && p.is_finite()) {
                return bad("acquisition.photons must be positive");
            }
        }
        if !(a.flat_level > a.dark_level) {
            return bad("acquisition.flat_level must exceed dark_level");
        }
        if self.samples == 0 {
            return bad("samples must be at least 1");
        }
        if self.experiment.test_count == 0 || self.experiment.train_count == 0 {
            return bad("experiment.test_count and train_count must be positive");
        }
        if let Some(list) = &self.experiment.views_list {
            if list.is_empty() || list.iter().any(|&v| v == 0 || v > a.full_views) {
                return bad("experiment.views_list entries must lie in 1..=acquisition.full_views");
            }
        }
        self.filter.validate()?;
        self.metric.validate()?;
        self.sampler.validate()?;
        Ok(())
    }
}

/// Parses `20,40,60` style lists.
pub fn parse_views_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|e| format!("bad view count `{t}`: {e}")))
        .collect()
}
