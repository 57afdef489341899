use fader::attenuation::SoftMask;
use fader::backbone::{
    reconstruct, Attenuation, Backbone, BackboneTrainConfig, BackboneTrainer, ForwardMode, GradScope, UNet, UNetConfig,
};
use fader::datasets::{generate_toy_dataset, ToyDataset, ToySpec};
use fader::fader::{train_fader, FaderModel, FaderTrainConfig, FaderTrainer};
use fader::image::ImageTensor;
use fader::masking::{BinaryMask, MaskKind, MaskProviderConfig};
use fader::nn::Tensor;
use fader::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn tiny_toy(dir: &TempDir) -> ToyDataset {
    let spec = ToySpec {
        n_train_normal: 6,
        n_test_normal: 2,
        n_test_defect: 2,
        resolution: [32, 32],
        ..ToySpec::default()
    };
    generate_toy_dataset(&spec, dir.path()).unwrap()
}

fn tiny_backbone_config(epochs: usize) -> BackboneTrainConfig {
    BackboneTrainConfig {
        unet: UNetConfig {
            base_channels: 4,
            ..UNetConfig::default()
        },
        epochs,
        lr: 1e-3,
        batch_size: 4,
        ..BackboneTrainConfig::default()
    }
}

fn tiny_fader_config(epochs: usize) -> FaderTrainConfig {
    FaderTrainConfig {
        epochs,
        lr: 1e-3,
        batch_size: 4,
        hidden: 16,
        ..FaderTrainConfig::default()
    }
}

fn train_mask() -> MaskProviderConfig {
    MaskProviderConfig {
        kind: MaskKind::RandomMulti,
        ..MaskProviderConfig::default()
    }
}

fn l2_loss(out: &Tensor<f64>, target: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let n = out.data.len() as f64;
    let mut grad = out.clone();
    let mut loss = 0.0;
    for ((g, &o), &t) in grad.data.iter_mut().zip(&out.data).zip(&target.data) {
        loss += (o - t) * (o - t) / n;
        *g = 2.0 * (o - t) / n;
    }
    (loss, grad)
}

#[test]
fn micro_unet_l2_gradient_matches_finite_differences() {
    let mut net = UNet::<f64>::new(UNetConfig {
        depth: 2,
        base_channels: 4,
        in_channels: 1,
        leaky_slope: 0.2,
        init_seed: 11,
    })
    .unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let mut random = |_: usize, _: usize, _: usize| r.gen_range(0.0..1.0);
    let images = [
        ImageTensor::from_fn(8, 8, 1, &mut random),
        ImageTensor::from_fn(8, 8, 1, &mut random),
    ];
    let x = Tensor::from_images(&images).unwrap();
    let target = Tensor::from_images(&[
        ImageTensor::from_fn(8, 8, 1, &mut random),
        ImageTensor::from_fn(8, 8, 1, &mut random),
    ])
    .unwrap();

    net.zero_grad();
    let pass = net.forward(&x, None, ForwardMode::TRAIN).unwrap();
    let (_, d_out) = l2_loss(pass.output(), &target);
    net.backward(&pass, &d_out, GradScope::All);
    let analytic: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.clone()).collect();

    // Batch norm over two 8x8 samples is strongly curved; larger steps are
    // dominated by truncation error.
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let mut fd = |d: f64| {
                let orig = net.params_mut()[pi].value[k];
                let mut at = |v: f64| {
                    net.params_mut()[pi].value[k] = v;
                    l2_loss(net.forward(&x, None, ForwardMode::TRAIN).unwrap().output(), &target).0
                };
                let g = (at(orig + d) - at(orig - d)) / (2.0 * d);
                net.params_mut()[pi].value[k] = orig;
                g
            };
            let (full, half) = (fd(eps), fd(eps / 2.0));
            let scale = a.abs().max(full.abs()).max(1e-6);
            // A leaky-ReLU kink inside the stencil shows up as disagreement
            // between step sizes.
            if (full - half).abs() / scale > 1e-6 {
                kinks += 1;
                continue;
            }
            worst = worst.max((a - full).abs() / scale);
        }
    }
    let total: usize = analytic.iter().map(Vec::len).sum();
    assert!(kinks * 20 < total, "{kinks} of {total} parameters near kinks");
    assert!(worst <= 1e-4, "max relative error {worst:e}");
}

#[test]
fn backbone_checkpoint_reloads_bit_identically() {
    let dir = TempDir::new().unwrap();
    let toy = tiny_toy(&dir);
    let bb = fader::backbone::train_backbone::<f32>(&tiny_backbone_config(1), &toy.train, &train_mask()).unwrap();
    let path = dir.path().join("bb.ckpt");
    bb.save(&path).unwrap();
    let back = Backbone::<f32>::load(&path).unwrap();
    assert_eq!(back, bb);
    let again = dir.path().join("bb2.ckpt");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let img = toy.test.load_image::<f32>(0).unwrap();
    let mask = BinaryMask::ones(32, 32);
    let a = reconstruct(&bb, &img, &mask, None).unwrap();
    let b = reconstruct(&back, &img, &mask, None).unwrap();
    assert_eq!(a, b);

    // A checkpoint of the other precision is refused.
    assert!(matches!(Backbone::<f64>::load(&path), Err(Error::ConfigMismatch(_))));
}

#[test]
fn attenuation_identity_and_cut() {
    let dir = TempDir::new().unwrap();
    let toy = tiny_toy(&dir);
    let bb = fader::backbone::train_backbone::<f64>(&tiny_backbone_config(1), &toy.train, &train_mask()).unwrap();
    let img = toy.test.load_image::<f64>(0).unwrap();
    let mask = BinaryMask::ones(32, 32);
    let plain = reconstruct(&bb, &img, &mask, None).unwrap();
    let ones = SoftMask::ones(4, 4);
    let with_ones = reconstruct(
        &bb,
        &img,
        &mask,
        Some(Attenuation {
            mask: &ones,
            scaling: Default::default(),
        }),
    )
    .unwrap();
    assert_eq!(plain, with_ones);
    let zeros = SoftMask::zeros(4, 4);
    let cut = reconstruct(
        &bb,
        &img,
        &mask,
        Some(Attenuation {
            mask: &zeros,
            scaling: Default::default(),
        }),
    )
    .unwrap();
    assert_ne!(plain, cut);
}

#[test]
fn resumed_backbone_training_matches_straight_training() {
    let dir = TempDir::new().unwrap();
    let toy = tiny_toy(&dir);
    let cfg = tiny_backbone_config(3);
    let straight = fader::backbone::train_backbone::<f32>(&cfg, &toy.train, &train_mask()).unwrap();

    let mut first = BackboneTrainer::<f32>::new(&cfg, &toy.train, &train_mask()).unwrap();
    first.run_epoch().unwrap();
    let path = dir.path().join("partial.ckpt");
    first.model().save(&path).unwrap();
    let mut resumed = BackboneTrainer::resume(Backbone::<f32>::load(&path).unwrap(), &toy.train).unwrap();
    while !resumed.is_finished() {
        resumed.run_epoch().unwrap();
    }
    assert_eq!(resumed.into_model(), straight);
}

#[test]
fn fader_training_freezes_the_encoder_and_reloads() {
    let dir = TempDir::new().unwrap();
    let toy = tiny_toy(&dir);
    let bb = fader::backbone::train_backbone::<f32>(&tiny_backbone_config(1), &toy.train, &train_mask()).unwrap();
    let model = train_fader(&bb, &tiny_fader_config(2), &toy.train, &train_mask()).unwrap();
    assert_eq!(model.net.encoder_fingerprint(), bb.net.encoder_fingerprint());
    assert_ne!(model.net, bb.net, "decoder should have moved");
    assert_eq!(model.meta.epochs_done, 2);

    let (mlp, dec) = (dir.path().join("mlp.ckpt"), dir.path().join("dec.ckpt"));
    model.save(&mlp, &dec).unwrap();
    let back = FaderModel::<f32>::load(&mlp, &dec).unwrap();
    assert_eq!(back, model);
    assert!(FaderModel::<f32>::load(&dec, &mlp).is_err());

    // One more epoch after reloading equals a three-epoch run.
    let mut longer_cfg = tiny_fader_config(3);
    longer_cfg.seed = model.meta.train.seed;
    let straight = train_fader(&bb, &longer_cfg, &toy.train, &train_mask()).unwrap();
    let mut two = FaderTrainer::new(&bb, &longer_cfg, &toy.train, &train_mask()).unwrap();
    two.run_epoch().unwrap();
    two.run_epoch().unwrap();
    let (m2, d2) = (dir.path().join("m2.ckpt"), dir.path().join("d2.ckpt"));
    two.model().save(&m2, &d2).unwrap();
    let mut resumed = FaderTrainer::resume(FaderModel::<f32>::load(&m2, &d2).unwrap(), &toy.train).unwrap();
    resumed.run_epoch().unwrap();
    assert!(resumed.is_finished());
    assert_eq!(resumed.into_model(), straight);
}

#[test]
fn fader_stage_rejects_a_patch_size_other_than_the_mosaic_scale() {
    let dir = TempDir::new().unwrap();
    let toy = tiny_toy(&dir);
    let bb = fader::backbone::train_backbone::<f32>(&tiny_backbone_config(1), &toy.train, &train_mask()).unwrap();
    let cfg = FaderTrainConfig {
        patch_size: 4,
        ..tiny_fader_config(1)
    };
    assert!(matches!(
        FaderTrainer::new(&bb, &cfg, &toy.train, &train_mask()),
        Err(Error::ConfigMismatch(_))
    ));
}
