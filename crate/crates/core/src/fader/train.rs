//! Active-learning loop: the MLP learns to rank patch errors of the current
//! model while the decoder is fine-tuned under the resulting soft masks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attenuation::{ScalingMode, SoftMask};
use crate::backbone::{
    from_toml, load_unet, obfuscate, push_unet, reconstruction_loss, to_toml, Backbone, ForwardMode, GradScope, UNet,
    UNetConfig,
};
use crate::checkpoint::Archive;
use crate::datasets::{iterate_batches, DatasetIndex};
use crate::error::{Error, Result};
use crate::fader::masks::soft_mask_from_losses;
use crate::fader::mlp::FaderMlp;
use crate::fader::ranking::{margin_ranking_loss, RankingConfig};
use crate::fader::tokens::{gt_patch_losses, tokenize};
use crate::image::ImageTensor;
use crate::masking::{MaskContext, MaskProviderConfig};
use crate::nn::{LrSchedule, RmsProp, Tensor};
use crate::scalar::Scalar;

pub const MLP_KIND: &str = "fader-mlp";
pub const DECODER_KIND: &str = "fader-decoder";

/// Which reconstruction the ground-truth patch losses are measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GtLossSource {
    /// The current model with the current soft mask on its skips.
    #[default]
    Attenuated,
    /// The current model without attenuation.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaderTrainConfig {
    /// Patch size `p`; must equal the backbone mosaic scale.
    pub patch_size: usize,
    pub epochs: usize,
    /// MLP learning rate `eta`.
    pub lr: f64,
    /// Decoder fine-tuning runs at `decoder_lr_factor * eta`.
    pub decoder_lr_factor: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub leaky_slope: f64,
    pub ranking: RankingConfig,
    pub scaling: ScalingMode,
    pub gt_losses: GtLossSource,
    pub seed: u64,
}

impl Default for FaderTrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            epochs: 100,
            lr: 1e-4,
            decoder_lr_factor: 0.1,
            warmup_fraction: 0.0,
            batch_size: 8,
            hidden: 128,
            leaky_slope: 0.2,
            ranking: RankingConfig::default(),
            scaling: ScalingMode::Nearest,
            gt_losses: GtLossSource::Attenuated,
            seed: 0,
        }
    }
}

impl FaderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ranking.validate()?;
        if self.patch_size == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "patch_size, batch_size and hidden must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.decoder_lr_factor >= 0.0) || !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("invalid learning-rate settings".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in (0,1)".into()));
        }
        Ok(())
    }
}

/// Learning rates actually used, stored with both checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrRecord {
    pub mlp_lr: f64,
    pub decoder_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaderMeta {
    pub dtype: String,
    pub train: FaderTrainConfig,
    pub mask: MaskProviderConfig,
    pub mosaic_scale: usize,
    pub unet: UNetConfig,
    pub lr_schedule: LrRecord,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub final_ranking_loss: f64,
    pub final_reconstruction_loss: f64,
    pub resolution: [usize; 2],
}

/// Trained loss predictor plus the backbone with its fine-tuned decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FaderModel<T> {
    pub mlp: FaderMlp<T>,
    pub net: UNet<T>,
    pub meta: FaderMeta,
    pub mlp_optimizer: RmsProp<T>,
    pub decoder_optimizer: RmsProp<T>,
}

impl<T: Scalar> FaderModel<T> {
    pub fn patch_size(&self) -> usize {
        self.meta.train.patch_size
    }

    pub fn save(&self, mlp_path: &Path, decoder_path: &Path) -> Result<()> {
        let config = to_toml(&self.meta)?;
        let mut mlp = Archive::new(MLP_KIND, config.clone());
        mlp.push_params(self.mlp.params());
        mlp.push_optimizer("opt", &self.mlp_optimizer);
        let mut dec = Archive::new(DECODER_KIND, config);
        push_unet(&mut dec, &self.net);
        dec.push_optimizer("opt", &self.decoder_optimizer);
        mlp.save(mlp_path)?;
        dec.save(decoder_path)
    }

    pub fn load(mlp_path: &Path, decoder_path: &Path) -> Result<Self> {
        let mlp_ar = Archive::load(mlp_path)?;
        let dec_ar = Archive::load(decoder_path)?;
        if mlp_ar.kind != MLP_KIND || dec_ar.kind != DECODER_KIND {
            return Err(Error::Checkpoint(format!(
                "expected {MLP_KIND} and {DECODER_KIND} archives, found {} and {}",
                mlp_ar.kind, dec_ar.kind
            )));
        }
        if mlp_ar.config != dec_ar.config {
            return Err(Error::ConfigMismatch(
                "MLP and decoder checkpoints come from different runs".into(),
            ));
        }
        let meta: FaderMeta = from_toml(&mlp_ar.config)?;
        if meta.dtype != T::DTYPE.name() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} parameters, requested {}",
                meta.dtype,
                T::DTYPE.name()
            )));
        }
        let mut net = UNet::new(meta.unet.clone())?;
        load_unet(&dec_ar, &mut net)?;
        let p = meta.train.patch_size;
        let mut mlp = FaderMlp::new(
            p * p * net.config().in_channels,
            meta.train.hidden,
            meta.train.leaky_slope,
            0,
        );
        mlp_ar.load_params(mlp.params_mut())?;
        Ok(Self {
            mlp,
            net,
            mlp_optimizer: mlp_ar.load_optimizer("opt")?,
            decoder_optimizer: dec_ar.load_optimizer("opt")?,
            meta,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaderEpochLog {
    pub epoch: usize,
    pub ranking_loss: f64,
    pub reconstruction_loss: f64,
    pub mlp_lr: f64,
    pub decoder_lr: f64,
}

/// Epoch-at-a-time FADeR training; resumable like the backbone trainer.
pub struct FaderTrainer<T> {
    model: FaderModel<T>,
    images: Vec<ImageTensor<T>>,
    schedule: LrSchedule,
}

impl<T: Scalar> FaderTrainer<T> {
    pub fn new(
        backbone: &Backbone<T>,
        cfg: &FaderTrainConfig,
        data: &DatasetIndex,
        mask_cfg: &MaskProviderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        mask_cfg.validate()?;
        if cfg.patch_size != backbone.m() {
            return Err(Error::ConfigMismatch(format!(
                "patch size {} differs from the backbone mosaic scale {}",
                cfg.patch_size,
                backbone.m()
            )));
        }
        let channels = backbone.net.config().in_channels;
        let p = cfg.patch_size;
        let n_batches = data.len().div_ceil(cfg.batch_size);
        let total_steps = cfg.epochs * n_batches;
        let schedule = LrSchedule::new(cfg.lr, cfg.warmup_fraction, total_steps);
        let meta = FaderMeta {
            dtype: T::DTYPE.name().to_string(),
            train: cfg.clone(),
            mask: mask_cfg.clone(),
            mosaic_scale: backbone.m(),
            unet: backbone.net.config().clone(),
            lr_schedule: LrRecord {
                mlp_lr: cfg.lr,
                decoder_lr: cfg.lr * cfg.decoder_lr_factor,
                warmup_steps: schedule.warmup_steps,
                total_steps,
            },
            epochs_done: 0,
            steps_done: 0,
            final_ranking_loss: f64::NAN,
            final_reconstruction_loss: f64::NAN,
            resolution: [data.resolution.0, data.resolution.1],
        };
        let model = FaderModel {
            mlp: FaderMlp::new(p * p * channels, cfg.hidden, cfg.leaky_slope, cfg.seed),
            net: backbone.net.clone(),
            meta,
            mlp_optimizer: RmsProp::default(),
            decoder_optimizer: RmsProp::default(),
        };
        Self::with_model(model, data)
    }

    pub fn resume(model: FaderModel<T>, data: &DatasetIndex) -> Result<Self> {
        Self::with_model(model, data)
    }

    fn with_model(model: FaderModel<T>, data: &DatasetIndex) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidTrainingData("training split is empty".into()));
        }
        data.ensure_normal_only()?;
        let (h, w) = data.resolution;
        model
            .net
            .config()
            .check_input(data.channels, h, w)
            .map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        let p = model.meta.train.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::ConfigMismatch(format!(
                "{h}x{w} is not divisible by patch size {p}"
            )));
        }
        let rec = &model.meta.lr_schedule;
        let schedule = LrSchedule {
            base: rec.mlp_lr,
            warmup_steps: rec.warmup_steps,
        };
        Ok(Self {
            images: data.load_all()?,
            model,
            schedule,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.model.meta.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done() >= self.model.meta.train.epochs
    }

    pub fn model(&self) -> &FaderModel<T> {
        &self.model
    }

    pub fn into_model(self) -> FaderModel<T> {
        self.model
    }

    pub fn run_epoch(&mut self) -> Result<FaderEpochLog> {
        let cfg = self.model.meta.train.clone();
        let mask_cfg = self.model.meta.mask.clone();
        let m = self.model.meta.mosaic_scale;
        let p = cfg.patch_size;
        let epoch = self.model.meta.epochs_done;
        let n = self.images.len();
        let (h, w, _) = self.images[0].shape();
        let (mut rank_sum, mut recon_sum) = (0.0, 0.0);
        let (mut mlp_lr, mut dec_lr) = (0.0, 0.0);
        for batch in iterate_batches(n, cfg.batch_size, cfg.seed ^ 0xFADE, epoch as u64)? {
            let b = batch.len();
            let model = &mut self.model;
            // (a) obfuscate and predict patch errors from the hint image
            let mut inputs = Vec::with_capacity(b);
            let mut tokens = Vec::with_capacity(b);
            let mut traces = Vec::with_capacity(b);
            let mut preds = Vec::with_capacity(b);
            let mut soft = Vec::with_capacity(b);
            for &i in &batch {
                let ctx = MaskContext {
                    salt: (epoch * n + i) as u64,
                    ..MaskContext::default()
                };
                let (obf, _) = obfuscate(&self.images[i], &mask_cfg, &ctx, epoch, m)?;
                let tok = tokenize(&obf, p)?;
                let (pred, trace) = model.mlp.forward_traced(&tok)?;
                soft.push(soft_mask_from_losses(&pred)?);
                inputs.push(obf);
                tokens.push(tok);
                traces.push(trace);
                preds.push(pred);
            }
            // (b) reconstruct with the current soft masks on the skips
            let x = Tensor::from_images(&inputs)?;
            let gates = model.net.gates_from_masks(&soft, h, w, cfg.scaling);
            let pass = model.net.forward(&x, Some(&gates), ForwardMode::DECODER_TUNE)?;
            let recons = match cfg.gt_losses {
                GtLossSource::Attenuated => pass.output().to_images(),
                GtLossSource::Plain => model.net.forward(&x, None, ForwardMode::EVAL)?.output().to_images(),
            };
            // (c) ranking step on the MLP
            let scale = T::one() / T::from_usize_lossy(b);
            let mut rank_batch = 0.0;
            for (k, &i) in batch.iter().enumerate() {
                let target = gt_patch_losses(&self.images[i], &recons[k], p)?;
                let salt = ((epoch * n + i) as u64) << 1;
                let rl = margin_ranking_loss(&preds[k], &target, &cfg.ranking, salt)?;
                rank_batch += rl.value.as_f64();
                let d: Vec<T> = rl.grad.iter().map(|&g| g * scale).collect();
                model.mlp.backward(&tokens[k], &traces[k], &d);
            }
            let step = model.meta.steps_done;
            mlp_lr = self.schedule.at(step);
            dec_lr = mlp_lr * cfg.decoder_lr_factor;
            model.mlp_optimizer.step(model.mlp.params_mut(), T::lit(mlp_lr));
            // (d) decoder-only reconstruction step at the reduced rate
            let targets: Vec<&ImageTensor<T>> = batch.iter().map(|&i| &self.images[i]).collect();
            let (recon_loss, d_out) = reconstruction_loss(&targets, pass.output())?;
            if !(recon_loss.is_finite() && rank_batch.is_finite()) {
                return Err(Error::Numeric(format!("non-finite FADeR loss at epoch {epoch}")));
            }
            model.net.backward(&pass, &d_out, GradScope::DecoderOnly);
            model.net.commit_batch_stats(&pass);
            model
                .decoder_optimizer
                .step(model.net.decoder_params_mut(), T::lit(dec_lr));
            model.net.zero_grad();
            model.meta.steps_done += 1;
            rank_sum += rank_batch;
            recon_sum += recon_loss * b as f64;
        }
        let meta = &mut self.model.meta;
        meta.epochs_done += 1;
        meta.final_ranking_loss = rank_sum / n as f64;
        meta.final_reconstruction_loss = recon_sum / n as f64;
        Ok(FaderEpochLog {
            epoch: meta.epochs_done,
            ranking_loss: meta.final_ranking_loss,
            reconstruction_loss: meta.final_reconstruction_loss,
            mlp_lr,
            decoder_lr: dec_lr,
        })
    }
}

/// Trains the MLP and fine-tunes the decoder for the configured epochs.
pub fn train_fader<T: Scalar>(
    backbone: &Backbone<T>,
    cfg: &FaderTrainConfig,
    data: &DatasetIndex,
    mask_cfg: &MaskProviderConfig,
) -> Result<FaderModel<T>> {
    let mut trainer = FaderTrainer::new(backbone, cfg, data, mask_cfg)?;
    while !trainer.is_finished() {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_model())
}

/// How the skips are attenuated at inference.
#[derive(Clone, Debug, PartialEq)]
pub enum AttenuationChoice<T> {
    /// Plain U-Net.
    None,
    /// A fixed patch mask, e.g. all ones.
    Forced(SoftMask<T>),
    /// Min-max flipped predictions.
    Soft,
    /// Patches above the given quantile of the predictions are cut.
    Hard { keep_quantile: f64 },
}
