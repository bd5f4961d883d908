//! Adapters from the network to the reconstruction engine.

use std::sync::Arc;

use cdpa_core::diffusion::{Condition, Timestep};
use cdpa_core::{ScoreModel, Volume};
use rayon::prelude::*;

use crate::descriptor::Mode;
use crate::error::{NetError, Result};
use crate::unet::{ConditionBundle, UNet};

/// Noise-prediction network used as a diffusion score model.
///
/// Works in the network's normalized units; callers divide measurements and
/// analytic conditions by [`Descriptor::data_scale`](crate::Descriptor) first.
#[derive(Clone, Debug)]
pub struct UNetScore {
    net: Arc<UNet>,
    conditional: bool,
}

impl UNetScore {
    fn new(net: Arc<UNet>, conditional: bool) -> Result<Self> {
        let d = net.descriptor();
        if d.mode != Mode::NoisePrediction {
            return Err(NetError::invalid("score model", "weights are not a noise-prediction network"));
        }
        if conditional && d.in_channels < 2 {
            return Err(NetError::invalid("score model", "network has no analytic-condition channel"));
        }
        Ok(Self { net, conditional })
    }

    /// Reads the analytic reconstruction from the sampler's condition.
    pub fn conditional(net: Arc<UNet>) -> Result<Self> {
        Self::new(net, true)
    }

    /// Feeds zeros in place of the analytic condition channel.
    pub fn unconditional(net: Arc<UNet>) -> Result<Self> {
        Self::new(net, false)
    }

    pub fn network(&self) -> &UNet {
        &self.net
    }
}

impl ScoreModel for UNetScore {
    fn predict(&self, x_t: &[f32], shape: [usize; 2], t: Timestep, cond: &Condition) -> cdpa_core::Result<Vec<f32>> {
        let fdk_slice = if self.conditional {
            Some(cond.fdk.ok_or_else(|| {
                cdpa_core::Error::InvalidArgument("conditional score needs an analytic reconstruction".into())
            })?)
        } else {
            None
        };
        let bundle = ConditionBundle {
            fdk_slice,
            slice_index: cond.slice_index,
            num_views: cond.num_views,
            timestep: Some(t.index),
        };
        Ok(self.net.forward(x_t, shape, &bundle)?)
    }

    fn is_conditional(&self) -> bool {
        self.conditional
    }
}

/// Slice-wise post-processing of an analytic reconstruction by a denoise-mode network.
pub fn denoise_volume(net: &UNet, fdk: &Volume, num_views: usize) -> Result<Volume> {
    let d = net.descriptor();
    if d.mode != Mode::Denoise {
        return Err(NetError::invalid("denoiser", "weights are not a denoise-mode network"));
    }
    let scale = d.data_scale as f32;
    let [nz, ny, nx] = fdk.shape();
    let slices: Vec<Vec<f32>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let input: Vec<f32> = fdk.slice(z).iter().map(|v| v / scale).collect();
            let bundle = ConditionBundle { fdk_slice: None, slice_index: z, num_views, timestep: None };
            let out = net.forward(&input, [ny, nx], &bundle)?;
            Ok(out.into_iter().map(|v| v * scale).collect())
        })
        .collect::<Result<_>>()?;
    Volume::stack(&slices, ny, nx).map_err(|e| NetError::invalid("denoiser", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::Descriptor;

    fn net(mode: Mode, bias: f32) -> Arc<UNet> {
        let d = Descriptor::with_channels(mode, vec![4, 8], 2, 4, None);
        Arc::new(
            UNet::from_fn(&d, |n, dims| {
                let k: usize = dims.iter().product();
                if n == "conv_out.bias" { vec![bias; k] } else { vec![0.0; k] }
            })
            .unwrap(),
        )
    }

    #[test]
    fn mode_checks() {
        assert!(UNetScore::conditional(net(Mode::Denoise, 0.0)).is_err());
        assert!(UNetScore::conditional(net(Mode::NoisePrediction, 0.0)).unwrap().is_conditional());
        assert!(!UNetScore::unconditional(net(Mode::NoisePrediction, 0.0)).unwrap().is_conditional());
        let v = Volume::zeros([1, 4, 4]);
        assert!(denoise_volume(&net(Mode::NoisePrediction, 0.0), &v, 4).is_err());
    }

    #[test]
    fn conditional_score_requires_condition() {
        let s = UNetScore::conditional(net(Mode::NoisePrediction, 0.0)).unwrap();
        let t = Timestep { index: 10, alpha: 0.9, sigma: 0.4 };
        let x = vec![0.0; 16];
        assert!(s.predict(&x, [4, 4], t, &Condition { fdk: None, slice_index: 0, num_views: 4 }).is_err());
        let y = s.predict(&x, [4, 4], t, &Condition { fdk: Some(&x), slice_index: 0, num_views: 4 }).unwrap();
        assert_eq!(y.len(), 16);
    }

    #[test]
    fn denoiser_rescales_output() {
        let n = net(Mode::Denoise, 0.5);
        let mut d = n.descriptor().clone();
        d.data_scale = 0.1;
        let scaled = UNet::from_fn(&d, |name, dims| n.weights().get(name).unwrap().data().to_vec().into_iter().take(dims.iter().product()).collect()).unwrap();
        let out = denoise_volume(&scaled, &Volume::zeros([2, 4, 4]), 8).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.05).abs() < 1e-7));
    }
}
