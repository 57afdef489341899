//! Inpainting pre-training of the U-Net and plain reconstruction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::unet::{ForwardMode, GradScope, UNet, UNetConfig};
use crate::attenuation::{ScalingMode, SoftMask};
use crate::checkpoint::Archive;
use crate::datasets::{iterate_batches, DatasetIndex};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::masking::{mosaic_obfuscate, provide_mask, BinaryMask, MaskContext, MaskProviderConfig};
use crate::nn::{LrSchedule, RmsProp, Tensor};
use crate::scalar::Scalar;
use crate::scoring::{default_levels, msgms_loss_with_grad, DEFAULT_GMS_C};

pub const BACKBONE_KIND: &str = "fader-backbone";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneTrainConfig {
    pub unet: UNetConfig,
    /// Mosaic cell size `m`.
    pub mosaic_scale: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Linear warm-up over this fraction of all steps (0 disables it).
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            mosaic_scale: 8,
            epochs: 100,
            lr: 1e-4,
            warmup_fraction: 0.0,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl BackboneTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.mosaic_scale == 0 || self.batch_size == 0 {
            return Err(Error::Config("mosaic_scale and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("lr must be positive and warmup_fraction in [0,1)".into()));
        }
        Ok(())
    }
}

/// Metadata stored in the configuration section of a backbone checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneMeta {
    pub dtype: String,
    pub train: BackboneTrainConfig,
    pub mask: MaskProviderConfig,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub final_loss: f64,
    /// Height and width the model was trained at.
    pub resolution: [usize; 2],
}

/// Trained (or partially trained) U-Net with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub net: UNet<T>,
    pub meta: BackboneMeta,
    pub optimizer: RmsProp<T>,
}

pub(crate) fn push_unet<T: Scalar>(ar: &mut Archive, net: &UNet<T>) {
    ar.push_params(net.params());
    for (name, v) in net.buffers() {
        ar.push(name, vec![v.len()], v);
    }
}

pub(crate) fn load_unet<T: Scalar>(ar: &Archive, net: &mut UNet<T>) -> Result<()> {
    ar.load_params(net.params_mut())?;
    for (name, v) in net.buffers_mut() {
        *v = ar.values(&name, v.len())?;
    }
    Ok(())
}

pub(crate) fn to_toml<S: Serialize>(v: &S) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub(crate) fn from_toml<S: for<'de> Deserialize<'de>>(text: &str) -> Result<S> {
    toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad checkpoint metadata: {e}")))
}

impl<T: Scalar> Backbone<T> {
    pub fn m(&self) -> usize {
        self.meta.train.mosaic_scale
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut ar = Archive::new(BACKBONE_KIND, to_toml(&self.meta)?);
        push_unet(&mut ar, &self.net);
        ar.push_optimizer("opt", &self.optimizer);
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive) -> Result<Self> {
        if ar.kind != BACKBONE_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a {BACKBONE_KIND} archive, found {}",
                ar.kind
            )));
        }
        let meta: BackboneMeta = from_toml(&ar.config)?;
        if meta.dtype != T::DTYPE.name() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} parameters, requested {}",
                meta.dtype,
                T::DTYPE.name()
            )));
        }
        let mut net = UNet::new(meta.train.unet.clone())?;
        load_unet(ar, &mut net)?;
        Ok(Self {
            net,
            optimizer: ar.load_optimizer("opt")?,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }

    /// Fails with `ConfigMismatch` when an `h x w x c` image cannot be fed to
    /// this model.
    pub fn check_compatible(&self, h: usize, w: usize, c: usize) -> Result<()> {
        self.net
            .config()
            .check_input(c, h, w)
            .map_err(|e| Error::ConfigMismatch(format!("image incompatible with backbone: {e}")))?;
        if !h.is_multiple_of(self.m()) || !w.is_multiple_of(self.m()) {
            return Err(Error::ConfigMismatch(format!(
                "{h}x{w} is not divisible by the mosaic scale {}",
                self.m()
            )));
        }
        Ok(())
    }
}

/// Mean pixel L2 plus MSGMS loss over a batch, with `dL/dÎ`.
pub fn reconstruction_loss<T: Scalar>(targets: &[&ImageTensor<T>], output: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    let n = targets.len();
    let mut grad = Tensor::zeros(output.n, output.c, output.h, output.w);
    let levels = default_levels(output.h.min(output.w));
    let batch = T::from_usize_lossy(n);
    let numel = T::from_usize_lossy(output.sample_len());
    let two = T::lit(2.0);
    let mut total = 0.0;
    for (i, (target, recon)) in targets.iter().zip(output.to_images()).enumerate() {
        let (ms, ms_grad) = msgms_loss_with_grad(target, &recon, levels, T::lit(DEFAULT_GMS_C))?;
        let mut l2 = T::zero();
        let g = grad.sample_mut(i);
        for (((g, &r), &t), &mg) in g.iter_mut().zip(recon.data()).zip(target.data()).zip(ms_grad.data()) {
            let d = r - t;
            l2 += d * d;
            *g = (two * d / numel + mg) / batch;
        }
        total += (l2 / numel + ms).as_f64();
    }
    Ok((total / n as f64, grad))
}

/// Obfuscates `image` with the `index`-th mask its provider yields.
pub(crate) fn obfuscate<T: Scalar>(
    image: &ImageTensor<T>,
    mask_cfg: &MaskProviderConfig,
    ctx: &MaskContext<'_>,
    pick: usize,
    m: usize,
) -> Result<(ImageTensor<T>, BinaryMask)> {
    let masks = provide_mask(mask_cfg, image, ctx)?;
    let mask = masks[pick % masks.len()].clone();
    Ok((mosaic_obfuscate(image, &mask, m)?, mask))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Epoch-at-a-time backbone training, resumable from a checkpoint.
///
/// Every epoch derives its batch order and masks from `(seed, epoch)`, so a
/// run resumed from an epoch-boundary checkpoint matches an uninterrupted one.
pub struct BackboneTrainer<T> {
    model: Backbone<T>,
    images: Vec<ImageTensor<T>>,
    schedule: LrSchedule,
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

impl<T: Scalar> BackboneTrainer<T> {
    pub fn new(cfg: &BackboneTrainConfig, data: &DatasetIndex, mask_cfg: &MaskProviderConfig) -> Result<Self> {
        cfg.validate()?;
        mask_cfg.validate()?;
        let net = UNet::new(cfg.unet.clone())?;
        let meta = BackboneMeta {
            dtype: T::DTYPE.name().to_string(),
            train: cfg.clone(),
            mask: mask_cfg.clone(),
            epochs_done: 0,
            steps_done: 0,
            final_loss: f64::NAN,
            resolution: [data.resolution.0, data.resolution.1],
        };
        Self::with_model(
            Backbone {
                net,
                meta,
                optimizer: RmsProp::default(),
            },
            data,
        )
    }

    /// Continues training `model` on `data` using its recorded settings.
    pub fn resume(model: Backbone<T>, data: &DatasetIndex) -> Result<Self> {
        Self::with_model(model, data)
    }

    fn with_model(model: Backbone<T>, data: &DatasetIndex) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidTrainingData("training split is empty".into()));
        }
        data.ensure_normal_only()?;
        let (h, w) = data.resolution;
        model.check_compatible(h, w, data.channels)?;
        let images = data.load_all()?;
        let cfg = &model.meta.train;
        let total = cfg.epochs * steps_per_epoch(images.len(), cfg.batch_size);
        let schedule = LrSchedule::new(cfg.lr, cfg.warmup_fraction, total);
        Ok(Self {
            model,
            images,
            schedule,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.model.meta.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.model.meta.train.epochs
    }

    pub fn model(&self) -> &Backbone<T> {
        &self.model
    }

    pub fn into_model(self) -> Backbone<T> {
        self.model
    }

    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let cfg = self.model.meta.train.clone();
        let mask_cfg = self.model.meta.mask.clone();
        let epoch = self.model.meta.epochs_done;
        let n = self.images.len();
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in iterate_batches(n, cfg.batch_size, cfg.seed, epoch as u64)? {
            let mut inputs = Vec::with_capacity(batch.len());
            for &i in &batch {
                let ctx = MaskContext {
                    salt: (epoch * n + i) as u64,
                    ..MaskContext::default()
                };
                inputs.push(obfuscate(&self.images[i], &mask_cfg, &ctx, epoch, cfg.mosaic_scale)?.0);
            }
            let x = Tensor::from_images(&inputs)?;
            let net = &mut self.model.net;
            let pass = net.forward(&x, None, ForwardMode::TRAIN)?;
            let targets: Vec<&ImageTensor<T>> = batch.iter().map(|&i| &self.images[i]).collect();
            let (loss, d_out) = reconstruction_loss(&targets, pass.output())?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            net.backward(&pass, &d_out, GradScope::All);
            net.commit_batch_stats(&pass);
            lr = self.schedule.at(self.model.meta.steps_done);
            self.model.optimizer.step(net.params_mut(), T::lit(lr));
            self.model.meta.steps_done += 1;
            loss_sum += loss * batch.len() as f64;
        }
        let loss = loss_sum / n as f64;
        self.model.meta.epochs_done += 1;
        self.model.meta.final_loss = loss;
        Ok(EpochLog {
            epoch: epoch + 1,
            loss,
            lr,
        })
    }
}

/// Trains for the configured number of epochs.
pub fn train_backbone<T: Scalar>(
    cfg: &BackboneTrainConfig,
    data: &DatasetIndex,
    mask_cfg: &MaskProviderConfig,
) -> Result<Backbone<T>> {
    let mut trainer = BackboneTrainer::new(cfg, data, mask_cfg)?;
    while !trainer.is_finished() {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_model())
}

/// Attenuation applied to the skips during reconstruction.
#[derive(Clone, Copy, Debug)]
pub struct Attenuation<'a, T> {
    pub mask: &'a SoftMask<T>,
    pub scaling: ScalingMode,
}

/// Inference-mode reconstruction of `images` after obfuscating each with the
/// matching mask.
pub fn reconstruct_batch<T: Scalar>(
    net: &UNet<T>,
    m: usize,
    images: &[ImageTensor<T>],
    masks: &[BinaryMask],
    attenuation: Option<&[Attenuation<'_, T>]>,
) -> Result<Vec<ImageTensor<T>>> {
    if images.len() != masks.len() || attenuation.is_some_and(|a| a.len() != images.len()) {
        return Err(Error::shape("images, masks and attenuations must have equal counts"));
    }
    let inputs = images
        .iter()
        .zip(masks)
        .map(|(img, mask)| mosaic_obfuscate(img, mask, m))
        .collect::<Result<Vec<_>>>()?;
    let x = Tensor::from_images(&inputs)?;
    net.config()
        .check_input(x.c, x.h, x.w)
        .map_err(|e| Error::ConfigMismatch(e.to_string()))?;
    let gates = match attenuation {
        None => None,
        Some(att) => {
            let modes: Vec<ScalingMode> = att.iter().map(|a| a.scaling).collect();
            if modes.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Config("one scaling mode per batch".into()));
            }
            let soft: Vec<SoftMask<T>> = att.iter().map(|a| a.mask.clone()).collect();
            Some(net.gates_from_masks(&soft, x.h, x.w, modes[0]))
        }
    };
    let pass = net.forward(&x, gates.as_deref(), ForwardMode::EVAL)?;
    Ok(pass.output().to_images())
}

/// Single-image reconstruction in inference mode.
pub fn reconstruct<T: Scalar>(
    backbone: &Backbone<T>,
    image: &ImageTensor<T>,
    mask: &BinaryMask,
    attenuation: Option<Attenuation<'_, T>>,
) -> Result<ImageTensor<T>> {
    let (h, w, c) = image.shape();
    backbone.check_compatible(h, w, c)?;
    let att = attenuation.map(|a| [a]);
    let mut out = reconstruct_batch(
        &backbone.net,
        backbone.m(),
        std::slice::from_ref(image),
        std::slice::from_ref(mask),
        att.as_ref().map(|a| &a[..]),
    )?;
    Ok(out.remove(0))
}
