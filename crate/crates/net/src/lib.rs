//! Conditional U-Net inference for diffusion scores and analytic-reconstruction denoising.

pub mod descriptor;
pub mod embed;
pub mod error;
pub mod fixture;
pub mod format;
pub mod layers;
pub mod score;
pub mod unet;

pub use descriptor::{ConditionKind, Descriptor, Mode};
pub use embed::sinusoidal_embed;
pub use error::{NetError, Result};
pub use fixture::{ParityFixture, ParityReport};
pub use format::{Container, Tensor};
pub use layers::FeatureMap;
pub use score::{denoise_volume, UNetScore};
pub use unet::{ConditionBundle, UNet};

/// Loads and validates a weight file.
pub fn load_weights(path: impl AsRef<std::path::Path>) -> Result<UNet> {
    UNet::load(path)
}
