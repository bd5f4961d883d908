use rand_distr::{Distribution, StandardNormal};

use crate::analytic::RawProjection;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Detector model used to turn line integrals back into counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CountModel {
    pub dark_level: f64,
    pub flat_level: f64,
    /// Photons per unattenuated ray; `None` disables noise.
    pub photon_count: Option<f64>,
    pub seed: u64,
}

impl CountModel {
    pub fn noiseless(dark_level: f64, flat_level: f64) -> Self {
        CountModel {
            dark_level,
            flat_level,
            photon_count: None,
            seed: 0,
        }
    }

    /// Standard deviation of the Gaussian count noise around `mean`.
    ///
    /// Counts are scaled so the flat field corresponds to `photon_count`
    /// photons; the Poisson variance of `N·mean/I₁` photons maps back to
    /// `mean·I₁/N` in count units.
    pub fn noise_std(&self, mean: f64) -> f64 {
        match self.photon_count {
            Some(n) if n.is_finite() => (mean.max(0.0) * self.flat_level / n).sqrt(),
            _ => 0.0,
        }
    }
}

/// `I = I₀ + (I₁ − I₀)·exp(−P)` plus optional Gaussian noise.
pub fn simulate_counts(line_integrals: &[f32], model: &CountModel) -> Result<RawProjection> {
    let span = model.flat_level - model.dark_level;
    if !(span > 0.0) || !span.is_finite() {
        return Err(Error::invalid(format!(
            "flat level {} must exceed dark level {}",
            model.flat_level, model.dark_level
        )));
    }
    if let Some(n) = model.photon_count {
        if !(n > 0.0) {
            return Err(Error::invalid(format!("photon count must be positive, got {n}")));
        }
    }
    if let Some(bad) = line_integrals.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::invalid(format!(
            "line integrals must be finite and nonnegative, found {bad}"
        )));
    }
    let mut rng = stream(model.seed, Purpose::MeasurementNoise, 0, 0);
    let counts = line_integrals
        .iter()
        .map(|&p| {
            let mean = model.dark_level + span * (-(p as f64)).exp();
            let std = model.noise_std(mean);
            if std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + std * z
            } else {
                mean
            }
        })
        .collect();
    let n = line_integrals.len();
    Ok(RawProjection {
        counts,
        dark: vec![model.dark_level; n],
        flat: vec![model.flat_level; n],
    })
}
