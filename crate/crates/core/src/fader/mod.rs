//! Patch-wise loss prediction and soft feature attenuation.

mod infer;
mod masks;
mod mlp;
mod ranking;
mod tokens;
mod train;

pub use infer::{infer_batch, infer_with_fader, Inference};
pub use masks::{binary_mask_from_losses, soft_mask_from_losses};
pub use mlp::{FaderMlp, MlpTrace};
pub use ranking::{margin_ranking_loss, PairStrategy, RankingConfig, RankingLoss};
pub use tokens::{detokenize, gt_patch_losses, tokenize, LossVector, PatchTokens};
pub use train::{
    train_fader, AttenuationChoice, FaderEpochLog, FaderMeta, FaderModel, FaderTrainConfig, FaderTrainer, GtLossSource,
    LrRecord, DECODER_KIND, MLP_KIND,
};
