//! Reconstruction-by-inpainting U-Net with attenuable skip connections.

mod train;
mod unet;

pub use crate::attenuation::scale_mask;
pub(crate) use train::{from_toml, load_unet, obfuscate, push_unet, to_toml};
pub use train::{
    reconstruct, reconstruct_batch, reconstruction_loss, train_backbone, Attenuation, Backbone, BackboneMeta,
    BackboneTrainConfig, BackboneTrainer, EpochLog, BACKBONE_KIND,
};
pub use unet::{ForwardMode, ForwardPass, GradScope, UNet, UNetConfig};
