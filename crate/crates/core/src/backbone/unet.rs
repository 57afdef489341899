//! U-Net with optionally gated skip connections.
//!
//! Encoder block `d` (1-based) runs three conv3x3 -> batch-norm -> leaky-ReLU
//! units, the third with stride 2, so its output lives at `H / 2^d`. Decoder
//! block `d` upsamples its input x2 (nearest) before the first unit and
//! produces `H / 2^(d-1)`. Decoder `D` consumes the bottleneck; decoder
//! `d < D` consumes `concat(dec_{d+1}, enc_d * gate_d)`. A 1x1 convolution and
//! a sigmoid map the last decoder output back to image channels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attenuation::{scale_mask, ScalingMode, SoftMask};
use crate::error::{Error, Result};
use crate::nn::{
    concat, gate_channels, leaky_relu_backward_inplace, leaky_relu_inplace, split_channels, upsample2,
    upsample2_backward, BatchNorm2d, BnCache, BnMode, Conv2d, Param, Tensor,
};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub leaky_slope: f64,
    pub init_seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            base_channels: 32,
            in_channels: 3,
            leaky_slope: 0.2,
            init_seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("U-Net depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky_slope must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Output channels of encoder block `d` (1-based).
    pub fn channels_at(&self, d: usize) -> usize {
        self.base_channels << (d - 1)
    }

    pub fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let f = 1usize << self.depth;
        if c != self.in_channels {
            return Err(Error::shape(format!("expected {} channels, got {c}", self.in_channels)));
        }
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "{h}x{w} input is not divisible by 2^{} = {f}",
                self.depth
            )));
        }
        Ok(())
    }

    /// Spatial size of skip `d` for an `h x w` input.
    pub fn skip_hw(&self, d: usize, h: usize, w: usize) -> (usize, usize) {
        (h >> d, w >> d)
    }
}

/// Batch-norm mode for the encoder and decoder halves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardMode {
    pub encoder: BnMode,
    pub decoder: BnMode,
}

impl ForwardMode {
    pub const TRAIN: Self = Self {
        encoder: BnMode::Train,
        decoder: BnMode::Train,
    };
    pub const EVAL: Self = Self {
        encoder: BnMode::Eval,
        decoder: BnMode::Eval,
    };
    /// Frozen encoder, decoder being fine-tuned.
    pub const DECODER_TUNE: Self = Self {
        encoder: BnMode::Eval,
        decoder: BnMode::Train,
    };
}

/// Which parameters receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    All,
    DecoderOnly,
}

#[derive(Clone, Debug, PartialEq)]
struct ConvUnit<T> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

#[derive(Clone, Debug)]
struct UnitTrace<T> {
    input: Tensor<T>,
    bn: BnCache<T>,
    output: Tensor<T>,
}

impl<T: Scalar> ConvUnit<T> {
    fn forward(&self, x: Tensor<T>, mode: BnMode, slope: T) -> UnitTrace<T> {
        let z = self.conv.forward(&x);
        let (mut y, bn) = self.bn.forward(&z, mode);
        leaky_relu_inplace(&mut y.data, slope);
        UnitTrace {
            input: x,
            bn,
            output: y,
        }
    }

    fn backward(&mut self, tr: &UnitTrace<T>, mut dy: Tensor<T>, slope: T, need_dx: bool) -> Option<Tensor<T>> {
        leaky_relu_backward_inplace(&mut dy.data, &tr.output.data, slope);
        let dz = self.bn.backward(&tr.bn, &dy);
        self.conv.backward(&tr.input, &dz, need_dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block<T> {
    units: Vec<ConvUnit<T>>,
}

#[derive(Clone, Debug)]
struct BlockTrace<T> {
    units: Vec<UnitTrace<T>>,
}

impl<T: Scalar> BlockTrace<T> {
    fn output(&self) -> &Tensor<T> {
        &self.units.last().expect("three units").output
    }
}

/// Intermediate tensors of one forward pass, kept for backward.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    mode: ForwardMode,
    encoder: Vec<BlockTrace<T>>,
    /// Indexed by depth - 1, filled from the deepest block up.
    decoder: Vec<Option<BlockTrace<T>>>,
    gates: Option<Vec<Tensor<T>>>,
    /// Decoder input of every depth `d < D` (concatenated, gate applied).
    decoder_inputs: Vec<Tensor<T>>,
    head_input: Tensor<T>,
    output: Tensor<T>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn into_output(self) -> Tensor<T> {
        self.output
    }

    /// Raw encoder feature `enc_d` for `d = 1..D-1`.
    pub fn skip(&self, d: usize) -> &Tensor<T> {
        self.encoder[d - 1].output()
    }

    pub fn skip_count(&self) -> usize {
        self.encoder.len() - 1
    }

    /// Decoder input at depth `d < D`: channels `[dec_{d+1} | gated enc_d]`.
    pub fn decoder_input(&self, d: usize) -> &Tensor<T> {
        &self.decoder_inputs[d - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    config: UNetConfig,
    encoder: Vec<Block<T>>,
    /// `decoder[d - 1]` is decoder block `d`.
    decoder: Vec<Block<T>>,
    head: Conv2d<T>,
}

impl<T: Scalar> UNet<T> {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let slope = config.leaky_slope;
        let gain = (2.0 / (1.0 + slope * slope)).sqrt();
        let depth = config.depth;
        let mut encoder = Vec::with_capacity(depth);
        for d in 1..=depth {
            let cin = if d == 1 {
                config.in_channels
            } else {
                config.channels_at(d - 1)
            };
            let c = config.channels_at(d);
            let units = (0..3)
                .map(|u| {
                    let name = format!("enc{d}.{u}");
                    let stride = if u == 2 { 2 } else { 1 };
                    let ci = if u == 0 { cin } else { c };
                    ConvUnit {
                        conv: Conv2d::new(&format!("{name}.conv"), ci, c, 3, stride, false, gain, &mut rng),
                        bn: BatchNorm2d::new(&format!("{name}.bn"), c),
                    }
                })
                .collect();
            encoder.push(Block { units });
        }
        let mut decoder = Vec::with_capacity(depth);
        for d in 1..=depth {
            let cin = if d == depth {
                config.channels_at(d)
            } else {
                2 * config.channels_at(d)
            };
            let c = if d == 1 {
                config.base_channels
            } else {
                config.channels_at(d - 1)
            };
            let units = (0..3)
                .map(|u| {
                    let name = format!("dec{d}.{u}");
                    let ci = if u == 0 { cin } else { c };
                    ConvUnit {
                        conv: Conv2d::new(&format!("{name}.conv"), ci, c, 3, 1, false, gain, &mut rng),
                        bn: BatchNorm2d::new(&format!("{name}.bn"), c),
                    }
                })
                .collect();
            decoder.push(Block { units });
        }
        let head = Conv2d::new(
            "head",
            config.base_channels,
            config.in_channels,
            1,
            1,
            true,
            1.0,
            &mut rng,
        );
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// Builds per-depth gates for a batch from one patch mask per sample.
    pub fn gates_from_masks(&self, masks: &[SoftMask<T>], h: usize, w: usize, mode: ScalingMode) -> Vec<Tensor<T>> {
        (1..self.config.depth)
            .map(|d| {
                let (sh, sw) = self.config.skip_hw(d, h, w);
                let mut g = Tensor::zeros(masks.len(), 1, sh, sw);
                for (i, m) in masks.iter().enumerate() {
                    g.sample_mut(i).copy_from_slice(scale_mask(m, (sh, sw), mode).data());
                }
                g
            })
            .collect()
    }

    /// Runs the network. `gates[d - 1]` (shape `N x 1 x H/2^d x W/2^d`)
    /// multiplies skip `d` before concatenation.
    pub fn forward(&self, x: &Tensor<T>, gates: Option<&[Tensor<T>]>, mode: ForwardMode) -> Result<ForwardPass<T>> {
        let cfg = &self.config;
        cfg.check_input(x.c, x.h, x.w)?;
        let depth = cfg.depth;
        if let Some(g) = gates {
            if g.len() != depth - 1 {
                return Err(Error::shape(format!(
                    "expected {} skip gates, got {}",
                    depth - 1,
                    g.len()
                )));
            }
            for (i, gt) in g.iter().enumerate() {
                let (sh, sw) = cfg.skip_hw(i + 1, x.h, x.w);
                if gt.dims() != (x.n, 1, sh, sw) {
                    return Err(Error::shape(format!(
                        "gate {} has shape {:?}, expected {:?}",
                        i + 1,
                        gt.dims(),
                        (x.n, 1, sh, sw)
                    )));
                }
            }
        }
        let slope = T::lit(cfg.leaky_slope);

        let mut encoder = Vec::with_capacity(depth);
        let mut cur = x.clone();
        for block in &self.encoder {
            let mut units = Vec::with_capacity(3);
            for unit in &block.units {
                let tr = unit.forward(cur, mode.encoder, slope);
                cur = tr.output.clone();
                units.push(tr);
            }
            encoder.push(BlockTrace { units });
        }

        let mut decoder: Vec<Option<BlockTrace<T>>> = vec![None; depth];
        let mut decoder_inputs = vec![Tensor::zeros(0, 0, 0, 0); depth - 1];
        let mut below = encoder[depth - 1].output().clone();
        for d in (1..=depth).rev() {
            let input = if d == depth {
                below
            } else {
                let skip = encoder[d - 1].output();
                let gated = match gates {
                    Some(g) => gate_channels(skip, &g[d - 1]),
                    None => skip.clone(),
                };
                let cat = concat(&below, &gated);
                decoder_inputs[d - 1] = cat.clone();
                cat
            };
            let mut cur = upsample2(&input);
            let mut units = Vec::with_capacity(3);
            for unit in &self.decoder[d - 1].units {
                let tr = unit.forward(cur, mode.decoder, slope);
                cur = tr.output.clone();
                units.push(tr);
            }
            below = cur;
            decoder[d - 1] = Some(BlockTrace { units });
        }
        let head_input = below;
        let mut output = self.head.forward(&head_input);
        for v in &mut output.data {
            *v = T::one() / (T::one() + (-*v).exp());
        }
        Ok(ForwardPass {
            mode,
            encoder,
            decoder,
            gates: gates.map(|g| g.to_vec()),
            decoder_inputs,
            head_input,
            output,
        })
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// averages.
    pub fn commit_batch_stats(&mut self, pass: &ForwardPass<T>) {
        if pass.mode.encoder == BnMode::Train {
            for (block, tr) in self.encoder.iter_mut().zip(&pass.encoder) {
                for (u, ut) in block.units.iter_mut().zip(&tr.units) {
                    u.bn.update_running(&ut.bn);
                }
            }
        }
        if pass.mode.decoder == BnMode::Train {
            for (block, tr) in self.decoder.iter_mut().zip(&pass.decoder) {
                let tr = tr.as_ref().expect("decoder traced");
                for (u, ut) in block.units.iter_mut().zip(&tr.units) {
                    u.bn.update_running(&ut.bn);
                }
            }
        }
    }

    /// Accumulates `dL/dparams` given `dL/doutput`.
    pub fn backward(&mut self, pass: &ForwardPass<T>, d_output: &Tensor<T>, scope: GradScope) {
        let depth = self.config.depth;
        let slope = T::lit(self.config.leaky_slope);
        // sigmoid
        let mut d_logits = d_output.clone();
        for (d, &y) in d_logits.data.iter_mut().zip(&pass.output.data) {
            *d *= y * (T::one() - y);
        }
        let mut d_below = self
            .head
            .backward(&pass.head_input, &d_logits, true)
            .expect("dx requested");

        let mut d_skips: Vec<Option<Tensor<T>>> = vec![None; depth];
        for d in 1..=depth {
            let tr = pass.decoder[d - 1].as_ref().expect("decoder traced");
            let block = &mut self.decoder[d - 1];
            let mut dy = d_below;
            for (u, ut) in block.units.iter_mut().zip(&tr.units).rev() {
                dy = u.backward(ut, dy, slope, true).expect("dx requested");
            }
            let d_input = upsample2_backward(&dy);
            if d == depth {
                d_skips[depth - 1] = Some(d_input);
                d_below = Tensor::zeros(0, 0, 0, 0);
            } else {
                let c_below = self.config.channels_at(d);
                let (d_dec, mut d_gated) = split_channels(&d_input, c_below);
                if let Some(g) = &pass.gates {
                    d_gated = gate_channels(&d_gated, &g[d - 1]);
                }
                d_skips[d - 1] = Some(d_gated);
                d_below = d_dec;
            }
        }
        if scope == GradScope::DecoderOnly {
            return;
        }
        let mut carry: Option<Tensor<T>> = None;
        for d in (1..=depth).rev() {
            let mut dy = d_skips[d - 1].take().expect("skip gradient");
            if let Some(c) = carry.take() {
                for (a, b) in dy.data.iter_mut().zip(&c.data) {
                    *a += *b;
                }
            }
            let tr = &pass.encoder[d - 1];
            let block = &mut self.encoder[d - 1];
            let mut grad = Some(dy);
            for (i, (u, ut)) in block.units.iter_mut().zip(&tr.units).enumerate().rev() {
                let need_dx = !(d == 1 && i == 0);
                grad = u.backward(ut, grad.expect("upstream gradient"), slope, need_dx);
            }
            carry = grad;
        }
    }

    fn block_params_mut(blocks: &mut [Block<T>]) -> Vec<&mut Param<T>> {
        blocks
            .iter_mut()
            .flat_map(|b| b.units.iter_mut())
            .flat_map(|u| {
                let mut v = u.conv.params_mut();
                v.extend(u.bn.params_mut());
                v
            })
            .collect()
    }

    pub fn encoder_params_mut(&mut self) -> Vec<&mut Param<T>> {
        Self::block_params_mut(&mut self.encoder)
    }

    /// Decoder blocks plus the output head.
    pub fn decoder_params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Self::block_params_mut(&mut self.decoder);
        v.extend(self.head.params_mut());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Self::block_params_mut(&mut self.encoder);
        v.extend(Self::block_params_mut(&mut self.decoder));
        v.extend(self.head.params_mut());
        v
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let blocks = self.encoder.iter().chain(&self.decoder);
        let mut v: Vec<&Param<T>> = blocks
            .flat_map(|b| b.units.iter())
            .flat_map(|u| {
                let mut v = u.conv.params();
                v.extend(u.bn.params());
                v
            })
            .collect();
        v.extend(self.head.params());
        v
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Running statistics as `(name, values)` pairs.
    pub fn buffers(&self) -> Vec<(String, &Vec<T>)> {
        let mut out = Vec::new();
        for b in self.encoder.iter().chain(&self.decoder) {
            for u in &b.units {
                let base = u.bn.gamma.name.trim_end_matches(".gamma").to_string();
                out.push((format!("{base}.running_mean"), &u.bn.running_mean));
                out.push((format!("{base}.running_var"), &u.bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            for u in &mut b.units {
                let base = u.bn.gamma.name.trim_end_matches(".gamma").to_string();
                out.push((format!("{base}.running_mean"), &mut u.bn.running_mean));
                out.push((format!("{base}.running_var"), &mut u.bn.running_var));
            }
        }
        out
    }

    /// Encoder weights and statistics, for freeze checks.
    pub fn encoder_fingerprint(&self) -> Vec<T> {
        let mut v = Vec::new();
        for b in &self.encoder {
            for u in &b.units {
                v.extend_from_slice(&u.conv.weight.value);
                v.extend_from_slice(&u.bn.gamma.value);
                v.extend_from_slice(&u.bn.beta.value);
                v.extend_from_slice(&u.bn.running_mean);
                v.extend_from_slice(&u.bn.running_var);
            }
        }
        v
    }
}
