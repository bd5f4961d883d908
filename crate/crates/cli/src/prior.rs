//! Per-pixel Gaussian prior fitted from training phantoms. Stands in for the
//! learned networks when no weight files are supplied: its unconditional and
//! FDK-conditional scores are exact for the fitted model, and its posterior
//! mean acts as a linear shrinkage denoiser.

use std::path::Path;

use cdpa_core::diffusion::{AnalyticGaussianScore, ConditionalGaussianScore};
use cdpa_core::Volume;
use cdpa_net::{Container, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const PRIOR_KIND: &str = "gaussian-prior";
/// Variance floor as a fraction of the squared peak training intensity.
pub const VAR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PriorHeader {
    kind: String,
    shape: [usize; 2],
    num_views: usize,
    training_volumes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrior {
    pub shape: [usize; 2],
    pub num_views: usize,
    pub training_volumes: usize,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Per-pixel variance of the analytic reconstruction around the truth.
    pub cond_var: Vec<f32>,
}

impl GaussianPrior {
    /// Pools every slice of every training pair into per-pixel moments.
    pub fn fit(truths: &[Volume], analytic: &[Volume], num_views: usize) -> CliResult<Self> {
        if truths.is_empty() || truths.len() != analytic.len() {
            return Err(CliError::config("prior fit needs matching, non-empty training sets"));
        }
        let [_, ny, nx] = truths[0].shape();
        let plane = ny * nx;
        let mut sum = vec![0f64; plane];
        let mut sq = vec![0f64; plane];
        let mut err = vec![0f64; plane];
        let mut n = 0usize;
        let mut peak = 0f64;
        for (t, a) in truths.iter().zip(analytic) {
            if t.shape() != a.shape() || t.ny() != ny || t.nx() != nx {
                return Err(CliError::config("training volumes differ in shape"));
            }
            for z in 0..t.nz() {
                for (i, (&x, &c)) in t.slice(z).iter().zip(a.slice(z)).enumerate() {
                    let (x, c) = (x as f64, c as f64);
                    sum[i] += x;
                    sq[i] += x * x;
                    err[i] += (c - x).powi(2);
                    peak = peak.max(x.abs());
                }
                n += 1;
            }
        }
        let floor = VAR_FLOOR * peak.max(1e-6).powi(2);
        let nf = n as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / nf) as f32).collect();
        let var = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / nf;
                ((q / nf - m * m).max(0.0) + floor) as f32
            })
            .collect();
        let cond_var = err.iter().map(|e| (e / nf + floor) as f32).collect();
        Ok(Self { shape: [ny, nx], num_views, training_volumes: truths.len(), mean, var, cond_var })
    }

    pub fn unconditional(&self) -> CliResult<AnalyticGaussianScore> {
        Ok(AnalyticGaussianScore::new(self.mean.clone(), self.var.clone())?)
    }

    pub fn conditional(&self) -> CliResult<ConditionalGaussianScore> {
        Ok(ConditionalGaussianScore::new(self.mean.clone(), self.var.clone(), self.cond_var.clone())?)
    }

    fn check_slices(&self, v: &Volume) -> CliResult<()> {
        if [v.ny(), v.nx()] != self.shape {
            return Err(CliError::config(format!(
                "prior fitted on {:?} slices cannot serve {:?}",
                self.shape,
                [v.ny(), v.nx()]
            )));
        }
        Ok(())
    }

    /// Posterior mean of each pixel given its analytic reconstruction.
    pub fn denoise(&self, analytic: &Volume) -> CliResult<Volume> {
        self.check_slices(analytic)?;
        let score = self.conditional()?;
        let mut out = analytic.clone();
        for z in 0..analytic.nz() {
            let (m, _) = score.posterior(analytic.slice(z), z)?;
            out.slice_mut(z).copy_from_slice(&m);
        }
        Ok(out)
    }

    pub fn check_volume(&self, v: &Volume) -> CliResult<()> {
        self.check_slices(v)
    }

    pub fn to_container(&self) -> CliResult<Container> {
        let header = PriorHeader {
            kind: PRIOR_KIND.into(),
            shape: self.shape,
            num_views: self.num_views,
            training_volumes: self.training_volumes,
        };
        let mut c = Container::new(serde_json::to_string(&header)?);
        let dims = vec![self.shape[0], self.shape[1]];
        c.insert("mean", Tensor::new(dims.clone(), self.mean.clone())?)?;
        c.insert("var", Tensor::new(dims.clone(), self.var.clone())?)?;
        c.insert("cond_var", Tensor::new(dims, self.cond_var.clone())?)?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> CliResult<Self> {
        let header: PriorHeader = serde_json::from_str(c.descriptor())
            .map_err(|e| CliError::Io(format!("prior descriptor: {e}")))?;
        if header.kind != PRIOR_KIND {
            return Err(CliError::Io(format!("`{}` is not a Gaussian prior", header.kind)));
        }
        let dims = [header.shape[0], header.shape[1]];
        let get = |name: &str| -> CliResult<Vec<f32>> {
            let t = c.require(name)?;
            if t.dims() != dims {
                return Err(CliError::Io(format!("prior tensor `{name}` has shape {:?}", t.dims())));
            }
            Ok(t.data().to_vec())
        };
        let p = Self {
            shape: header.shape,
            num_views: header.num_views,
            training_volumes: header.training_volumes,
            mean: get("mean")?,
            var: get("var")?,
            cond_var: get("cond_var")?,
        };
        p.unconditional()?;
        p.conditional()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let bytes = self.to_container()?.to_bytes()?;
        cdpa_core::io::atomic_write(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
