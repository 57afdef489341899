use crate::attenuation::{ScalingMode, SoftMask};
use crate::backbone::{reconstruct_batch, Attenuation, UNet};
use crate::error::{Error, Result};
use crate::fader::masks::{binary_mask_from_losses, soft_mask_from_losses};
use crate::fader::mlp::FaderMlp;
use crate::fader::tokens::{tokenize, LossVector};
use crate::fader::train::{AttenuationChoice, FaderModel};
use crate::image::ImageTensor;
use crate::masking::{mosaic_obfuscate, BinaryMask};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub recon: ImageTensor<T>,
    /// Predicted patch errors, when the MLP ran.
    pub predicted: Option<LossVector<T>>,
    /// Patch mask applied to the skips, if any.
    pub mask: Option<SoftMask<T>>,
}

/// Obfuscate, predict patch errors, build the patch mask and reconstruct
/// with the skips attenuated, for a batch of images.
pub fn infer_batch<T: Scalar>(
    net: &UNet<T>,
    mlp: Option<&FaderMlp<T>>,
    m: usize,
    images: &[ImageTensor<T>],
    masks: &[BinaryMask],
    choice: &AttenuationChoice<T>,
    scaling: ScalingMode,
) -> Result<Vec<Inference<T>>> {
    if images.len() != masks.len() {
        return Err(Error::shape("one binary mask per image is required"));
    }
    let mut predicted = Vec::with_capacity(images.len());
    let mut soft = Vec::with_capacity(images.len());
    for (img, mask) in images.iter().zip(masks) {
        let (pred, sm) = match choice {
            AttenuationChoice::None => (None, None),
            AttenuationChoice::Forced(f) => (None, Some(f.clone())),
            AttenuationChoice::Soft | AttenuationChoice::Hard { .. } => {
                let mlp = mlp.ok_or_else(|| Error::Config("soft or hard masking needs a trained MLP".into()))?;
                let obf = mosaic_obfuscate(img, mask, m)?;
                let pred = mlp.predict(&tokenize(&obf, m)?)?;
                let sm = match choice {
                    AttenuationChoice::Hard { keep_quantile } => binary_mask_from_losses(&pred, *keep_quantile)?,
                    _ => soft_mask_from_losses(&pred)?,
                };
                (Some(pred), Some(sm))
            }
        };
        predicted.push(pred);
        soft.push(sm);
    }
    let att: Option<Vec<Attenuation<'_, T>>> = match choice {
        AttenuationChoice::None => None,
        _ => Some(
            soft.iter()
                .map(|s| Attenuation {
                    mask: s.as_ref().expect("mask built"),
                    scaling,
                })
                .collect(),
        ),
    };
    let recons = reconstruct_batch(net, m, images, masks, att.as_deref())?;
    Ok(recons
        .into_iter()
        .zip(predicted)
        .zip(soft)
        .map(|((recon, predicted), mask)| Inference { recon, predicted, mask })
        .collect())
}

/// Single-image FADeR inference with the model's fine-tuned decoder.
pub fn infer_with_fader<T: Scalar>(
    model: &FaderModel<T>,
    image: &ImageTensor<T>,
    mask: &BinaryMask,
    choice: &AttenuationChoice<T>,
    scaling: ScalingMode,
) -> Result<Inference<T>> {
    let mut out = infer_batch(
        &model.net,
        Some(&model.mlp),
        model.meta.mosaic_scale,
        std::slice::from_ref(image),
        std::slice::from_ref(mask),
        choice,
        scaling,
    )?;
    Ok(out.remove(0))
}
