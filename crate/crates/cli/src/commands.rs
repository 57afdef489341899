use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use fader::attenuation::ScalingMode;
use fader::backbone::{Backbone, BackboneTrainer};
use fader::datasets::{generate_toy_dataset, load_image, load_image_dataset, load_mask, DatasetIndex, Split};
use fader::fader::{infer_with_fader, AttenuationChoice, FaderModel, FaderTrainer};
use fader::masking::{provide_mask, MaskContext};
use fader::scoring::{default_levels, evaluate, export_anomaly_map, msgms_anomaly_map, MaskingMode};
use fader::{Error, Scalar};

use crate::config::{Layout, Precision, RunConfig};
use crate::{viz, CliError, Stage};

fn with_precision<F32, F64>(cfg: &RunConfig, f32: F32, f64: F64) -> Result<(), CliError>
where
    F32: FnOnce() -> Result<(), CliError>,
    F64: FnOnce() -> Result<(), CliError>,
{
    match cfg.run.precision {
        Precision::F32 => f32(),
        Precision::F64 => f64(),
    }
}

fn prepare(config: &Path) -> Result<(RunConfig, Layout), CliError> {
    let cfg = RunConfig::load(config)?;
    let layout = Layout::new(&cfg);
    layout.create().map_err(CliError::io("creating run directory"))?;
    let echo = layout.run_dir.join("config.toml");
    fs::write(&echo, cfg.to_toml()).map_err(CliError::io(format!("writing {}", echo.display())))?;
    Ok((cfg, layout))
}

fn dataset(cfg: &RunConfig, split: Split) -> Result<DatasetIndex, CliError> {
    let [h, w] = cfg.data.resolution;
    match load_image_dataset(&cfg.data.root, split, (h, w), cfg.data.strict) {
        Err(Error::NotFound(p)) => Err(CliError::Missing(format!("dataset not found: {}", p.display()))),
        other => Ok(other?),
    }
}

fn write_atomic(path: &Path, save: impl FnOnce(&Path) -> fader::Result<()>) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    save(&tmp)?;
    fs::rename(&tmp, path).map_err(CliError::io(format!("replacing {}", path.display())))
}

struct Log {
    file: fs::File,
}

impl Log {
    /// Opens the log, starting it over when `fresh`.
    fn open(path: &Path, header: &str, fresh: bool) -> Result<Self, CliError> {
        let ctx = || format!("opening {}", path.display());
        let mut file = if fresh {
            fs::File::create(path).map_err(CliError::io(ctx()))?
        } else {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(CliError::io(ctx()))?
        };
        if fresh {
            writeln!(file, "{header}").map_err(CliError::io(ctx()))?;
        }
        Ok(Self { file })
    }

    fn row(&mut self, row: String) -> Result<(), CliError> {
        writeln!(self.file, "{row}").map_err(CliError::io("writing training log"))
    }
}

pub fn synth_data(config: &Path, force: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let root = &cfg.data.root;
    if root.exists() && fs::read_dir(root).map(|mut d| d.next().is_some()).unwrap_or(false) {
        if !force {
            return Err(CliError::Usage(format!(
                "{} already exists; pass --force to overwrite it",
                root.display()
            )));
        }
        fs::remove_dir_all(root).map_err(CliError::io(format!("removing {}", root.display())))?;
    }
    let toy = generate_toy_dataset(&cfg.data.toy, root)?;
    println!("{}", toy.manifest.display());
    Ok(())
}

pub fn train(config: &Path, stage: Stage, stop_after: Option<usize>) -> Result<(), CliError> {
    let (cfg, layout) = prepare(config)?;
    match stage {
        Stage::Backbone => with_precision(
            &cfg,
            || train_backbone::<f32>(&cfg, &layout, stop_after),
            || train_backbone::<f64>(&cfg, &layout, stop_after),
        ),
        Stage::Fader => with_precision(
            &cfg,
            || train_fader::<f32>(&cfg, &layout, stop_after),
            || train_fader::<f64>(&cfg, &layout, stop_after),
        ),
    }
}

fn train_backbone<T: Scalar>(cfg: &RunConfig, layout: &Layout, stop_after: Option<usize>) -> Result<(), CliError> {
    let data = dataset(cfg, Split::Train)?;
    let ckpt = &layout.backbone_ckpt;
    let log_path = layout.logs().join("backbone.csv");
    let (mut trainer, fresh) = if ckpt.exists() {
        let bb = Backbone::<T>::load(ckpt)?;
        if bb.meta.train != cfg.backbone || bb.meta.mask != cfg.mask {
            return Err(CliError::Usage(format!(
                "{} was trained with a different configuration",
                ckpt.display()
            )));
        }
        (BackboneTrainer::resume(bb, &data)?, false)
    } else {
        (BackboneTrainer::new(&cfg.backbone, &data, &cfg.mask)?, true)
    };
    let mut log = Log::open(&log_path, "epoch,loss,lr", fresh)?;
    let mut ran = 0;
    while !trainer.is_finished() && stop_after.is_none_or(|s| ran < s) {
        let e = trainer.run_epoch()?;
        log.row(format!("{},{:.9},{:e}", e.epoch, e.loss, e.lr))?;
        write_atomic(ckpt, |p| trainer.model().save(p))?;
        println!("backbone epoch {} loss {:.6}", e.epoch, e.loss);
        ran += 1;
    }
    println!("{}", ckpt.display());
    Ok(())
}

fn load_backbone<T: Scalar>(layout: &Layout) -> Result<Backbone<T>, CliError> {
    let path = &layout.backbone_ckpt;
    if !path.exists() {
        return Err(CliError::Missing(format!(
            "backbone checkpoint {} not found; run `train --stage backbone` first",
            path.display()
        )));
    }
    Ok(Backbone::load(path)?)
}

fn load_fader<T: Scalar>(layout: &Layout) -> Result<FaderModel<T>, CliError> {
    for p in [&layout.fader_mlp_ckpt, &layout.fader_decoder_ckpt] {
        if !p.exists() {
            return Err(CliError::Missing(format!(
                "FADeR checkpoint {} not found; run `train --stage fader` first",
                p.display()
            )));
        }
    }
    Ok(FaderModel::load(&layout.fader_mlp_ckpt, &layout.fader_decoder_ckpt)?)
}

fn train_fader<T: Scalar>(cfg: &RunConfig, layout: &Layout, stop_after: Option<usize>) -> Result<(), CliError> {
    let bb = load_backbone::<T>(layout)?;
    if bb.meta.epochs_done < bb.meta.train.epochs {
        return Err(CliError::Missing(format!(
            "backbone checkpoint {} is incomplete ({}/{} epochs)",
            layout.backbone_ckpt.display(),
            bb.meta.epochs_done,
            bb.meta.train.epochs
        )));
    }
    let data = dataset(cfg, Split::Train)?;
    let resuming = layout.fader_mlp_ckpt.exists() && layout.fader_decoder_ckpt.exists();
    let mut trainer = if resuming {
        let model = load_fader::<T>(layout)?;
        if model.meta.train != cfg.fader || model.meta.mask != cfg.mask {
            return Err(CliError::Usage(
                "FADeR checkpoints were trained with a different configuration".into(),
            ));
        }
        FaderTrainer::resume(model, &data)?
    } else {
        FaderTrainer::new(&bb, &cfg.fader, &data, &cfg.mask)?
    };
    let mut log = Log::open(
        &layout.logs().join("fader.csv"),
        "epoch,ranking_loss,reconstruction_loss,mlp_lr,decoder_lr",
        !resuming,
    )?;
    let mut ran = 0;
    while !trainer.is_finished() && stop_after.is_none_or(|s| ran < s) {
        let e = trainer.run_epoch()?;
        log.row(format!(
            "{},{:.9},{:.9},{:e},{:e}",
            e.epoch, e.ranking_loss, e.reconstruction_loss, e.mlp_lr, e.decoder_lr
        ))?;
        let model = trainer.model();
        let tmp_dec = layout.fader_decoder_ckpt.with_extension("tmp2");
        write_atomic(&layout.fader_mlp_ckpt, |p| model.save(p, &tmp_dec))?;
        fs::rename(&tmp_dec, &layout.fader_decoder_ckpt).map_err(CliError::io("replacing decoder checkpoint"))?;
        println!(
            "fader epoch {} ranking {:.6} reconstruction {:.6}",
            e.epoch, e.ranking_loss, e.reconstruction_loss
        );
        ran += 1;
    }
    println!("{}", layout.fader_mlp_ckpt.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EvalFlags {
    pub no_fader: bool,
    pub hard_mask: bool,
    pub force_ones: bool,
    pub scaling: Option<ScalingMode>,
}

pub fn eval(config: &Path, flags: EvalFlags) -> Result<(), CliError> {
    let (cfg, layout) = prepare(config)?;
    with_precision(
        &cfg,
        || eval_impl::<f32>(&cfg, &layout, flags),
        || eval_impl::<f64>(&cfg, &layout, flags),
    )
}

fn eval_impl<T: Scalar>(cfg: &RunConfig, layout: &Layout, flags: EvalFlags) -> Result<(), CliError> {
    let test = dataset(cfg, Split::Test)?;
    let mut opts = cfg.eval_options();
    if let Some(s) = flags.scaling {
        opts.scaling = s;
    }
    if flags.hard_mask {
        opts.masking = MaskingMode::Hard;
    }
    if flags.force_ones {
        opts.masking = MaskingMode::ForcedOnes;
    } else if flags.no_fader {
        opts.masking = MaskingMode::None;
    }
    let variant = match (flags.no_fader, opts.masking) {
        (true, MaskingMode::ForcedOnes) => "backbone-ones".to_string(),
        (true, _) => "backbone".to_string(),
        (false, m) => format!("fader-{}-{}", masking_name(m), opts.scaling.name()),
    };
    let report = if flags.no_fader {
        let bb = load_backbone::<T>(layout)?;
        evaluate(&bb.net, None, bb.m(), &test, &opts)?
    } else {
        let model = load_fader::<T>(layout)?;
        evaluate(&model.net, Some(&model.mlp), model.meta.mosaic_scale, &test, &opts)?
    };
    let mut doc: toml::Table = toml::from_str(&report.to_text()?).expect("report is valid TOML");
    doc.insert("variant".into(), toml::Value::String(variant.clone()));
    doc.insert(
        "config".into(),
        toml::Value::try_from(cfg).map_err(|e| CliError::Usage(e.to_string()))?,
    );
    let base = layout.reports().join(format!("eval_{variant}"));
    let text = toml::to_string(&doc).expect("table serializes");
    fs::write(base.with_extension("toml"), text).map_err(CliError::io("writing report"))?;
    fs::write(base.with_extension("csv"), report.to_csv()?).map_err(CliError::io("writing score table"))?;
    if cfg.scoring.export_maps {
        let dir = layout.viz().join(format!("maps_{variant}"));
        fs::create_dir_all(&dir).map_err(CliError::io("creating map directory"))?;
        for (rec, map) in report.records.iter().zip(&report.maps) {
            let stem = format!("{}_{}", rec.category, file_stem(&rec.path));
            export_anomaly_map(map, &dir.join(format!("{stem}.png")))?;
        }
    }
    println!("{variant}: {}", report.summary_line());
    println!("{}", base.with_extension("toml").display());
    Ok(())
}

fn masking_name(m: MaskingMode) -> &'static str {
    match m {
        MaskingMode::None => "none",
        MaskingMode::ForcedOnes => "ones",
        MaskingMode::Soft => "soft",
        MaskingMode::Hard => "hard",
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string()
}

pub fn visualize(config: &Path, image: &Path, gt: Option<&Path>) -> Result<(), CliError> {
    if !image.is_file() {
        return Err(CliError::Usage(format!("image {} does not exist", image.display())));
    }
    let (cfg, layout) = prepare(config)?;
    with_precision(
        &cfg,
        || visualize_impl::<f32>(&cfg, &layout, image, gt),
        || visualize_impl::<f64>(&cfg, &layout, image, gt),
    )
}

fn visualize_impl<T: Scalar>(
    cfg: &RunConfig,
    layout: &Layout,
    image: &Path,
    gt: Option<&Path>,
) -> Result<(), CliError> {
    let [h, w] = cfg.data.resolution;
    let img = match load_image::<T>(image, (h, w)) {
        Err(e @ Error::Decode { .. }) => return Err(CliError::Usage(e.to_string())),
        other => other?,
    };
    let gt_map = gt.map(|p| load_mask(p, (h, w))).transpose()?;
    let model = load_fader::<T>(layout)?;
    let ctx = MaskContext {
        gt: gt_map.as_ref(),
        image_path: Some(image),
        salt: 0,
    };
    let mask = provide_mask(&cfg.scoring.mask, &img, &ctx)?.swap_remove(0);
    let choice = match cfg.scoring.masking {
        MaskingMode::Hard => AttenuationChoice::Hard {
            keep_quantile: cfg.scoring.keep_quantile,
        },
        _ => AttenuationChoice::Soft,
    };
    let out = infer_with_fader(&model, &img, &mask, &choice, cfg.scoring.scaling)?;
    let levels = cfg.scoring.levels.unwrap_or_else(|| default_levels(h.min(w)));
    let map = msgms_anomaly_map(&img, &out.recon, levels, T::lit(cfg.scoring.gms_c))?;
    let stem = file_stem(image);
    let dir = layout.viz();
    let paths: [PathBuf; 4] =
        ["input", "binary_mask", "soft_mask", "anomaly_map"].map(|k| dir.join(format!("{stem}_{k}.png")));
    let io = |p: &PathBuf| CliError::io(format!("writing {}", p.display()));
    viz::write_input(&img, &paths[0]).map_err(io(&paths[0]))?;
    viz::write_binary_overlay(&img, &mask, &paths[1]).map_err(io(&paths[1]))?;
    let soft = out.mask.expect("soft or hard mask built");
    viz::write_soft_overlay(&img, soft.grid(), &paths[2]).map_err(io(&paths[2]))?;
    viz::write_heat(map.map(), &paths[3]).map_err(io(&paths[3]))?;
    for p in &paths {
        println!("{}", p.display());
    }
    Ok(())
}
