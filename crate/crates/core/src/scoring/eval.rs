//! Test-set evaluation and report serialization.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::attenuation::{ScalingMode, SoftMask};
use crate::backbone::UNet;
use crate::datasets::{DatasetIndex, Label};
use crate::error::{Error, Result};
use crate::fader::{gt_patch_losses, infer_batch, AttenuationChoice, FaderMlp};
use crate::image::Map2;
use crate::masking::{provide_mask, MaskContext, MaskProviderConfig};
use crate::scalar::Scalar;
use crate::scoring::auroc::{auroc, pixel_auroc};
use crate::scoring::gms::{default_levels, default_window, image_anomaly_score, msgms_anomaly_map, AnomalyMap};

/// Skip-attenuation variant used during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    /// Plain U-Net, no MLP.
    #[default]
    None,
    /// All-ones patch mask on every skip.
    ForcedOnes,
    Soft,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub mask: MaskProviderConfig,
    pub masking: MaskingMode,
    /// Quantile for [`MaskingMode::Hard`].
    pub keep_quantile: f64,
    pub scaling: ScalingMode,
    /// MSGMS levels; derived from the image size when absent.
    pub levels: Option<usize>,
    /// Smoothing window; derived from the image size when absent.
    pub window: Option<usize>,
    pub gms_c: f64,
    pub batch_size: usize,
    /// Keep every anomaly map in the report.
    pub keep_maps: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            mask: MaskProviderConfig::default(),
            masking: MaskingMode::None,
            keep_quantile: 0.75,
            scaling: ScalingMode::Nearest,
            levels: None,
            window: None,
            gms_c: crate::scoring::DEFAULT_GMS_C,
            batch_size: 16,
            keep_maps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub category: String,
    pub label: Label,
    pub score: f64,
    /// Mean of the applied patch mask.
    pub mask_mean: Option<f64>,
}

/// Patch-mask statistics on the test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    /// Mean mask value over patches touching the defect, on defect images.
    pub defect_patch_mean: Option<f64>,
    /// Mean mask value over the other patches of defect images.
    pub normal_patch_mean: Option<f64>,
    /// Mean mask value on defect-free images.
    pub normal_image_mean: Option<f64>,
    /// Mean per-image Spearman correlation between predicted and measured
    /// patch errors on defect-free images.
    pub spearman_normal: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub image_auroc: f64,
    pub pixel_auroc: Option<f64>,
    pub records: Vec<ImageRecord>,
    pub options: EvalOptions,
    pub levels: usize,
    pub window: usize,
    pub mosaic_scale: usize,
    pub mask_stats: MaskStats,
    pub maps: Vec<Map2<f64>>,
    pub warnings: Vec<String>,
}

#[derive(Serialize)]
struct Summary {
    image_auroc: f64,
    pixel_auroc: Option<f64>,
    images: usize,
    anomalous: usize,
}

#[derive(Serialize)]
struct Scoring {
    levels: usize,
    window: usize,
    mosaic_scale: usize,
}

#[derive(Serialize)]
struct ReportText<'a> {
    summary: Summary,
    scoring: Scoring,
    options: &'a EvalOptions,
    mask_stats: &'a MaskStats,
    warnings: &'a [String],
}

impl EvalReport {
    /// Sectioned key-value text (TOML).
    pub fn to_text(&self) -> Result<String> {
        let doc = ReportText {
            summary: Summary {
                image_auroc: self.image_auroc,
                pixel_auroc: self.pixel_auroc,
                images: self.records.len(),
                anomalous: self.records.iter().filter(|r| r.label == Label::Anomalous).count(),
            },
            scoring: Scoring {
                levels: self.levels,
                window: self.window,
                mosaic_scale: self.mosaic_scale,
            },
            options: &self.options,
            mask_stats: &self.mask_stats,
            warnings: &self.warnings,
        };
        toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))
    }

    /// Per-image score table.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e));
        w.write_record(["path", "category", "label", "score", "mask_mean"])
            .map_err(io)?;
        for r in &self.records {
            let label = match r.label {
                Label::Normal => "normal",
                Label::Anomalous => "anomalous",
            };
            let mean = r.mask_mean.map(|m| format!("{m:.9}")).unwrap_or_default();
            w.write_record([
                r.path.display().to_string(),
                r.category.clone(),
                label.to_string(),
                format!("{:.9}", r.score),
                mean,
            ])
            .map_err(io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io("<csv>", std::io::Error::other(e.to_string())))?;
        String::from_utf8(bytes).map_err(|e| Error::Numeric(e.to_string()))
    }

    /// Short human-readable summary.
    pub fn summary_line(&self) -> String {
        let mut s = format!("image_auroc={:.4}", self.image_auroc);
        if let Some(p) = self.pixel_auroc {
            let _ = write!(s, " pixel_auroc={p:.4}");
        }
        s
    }
}

/// Writes an anomaly map in `[0, 1]` as a 16-bit grayscale PNG.
pub fn export_anomaly_map<T: Scalar>(map: &Map2<T>, path: &Path) -> Result<()> {
    let (h, w) = map.dims();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map.get(y as usize, x as usize).as_f64().clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    buf.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Patches (grid cells of size `p`) containing at least one defect pixel.
fn defect_patches(gt: &Map2<bool>, p: usize) -> Map2<bool> {
    let (h, w) = gt.dims();
    let mut out = Map2::filled(h / p, w / p, false);
    for y in 0..h {
        for x in 0..w {
            if gt.get(y, x) {
                out.set(y / p, x / p, true);
            }
        }
    }
    out
}

/// Runs the test split through the chosen pipeline and scores it.
///
/// `mlp` is required for soft and hard masking and ignored otherwise; `net`
/// should be the fine-tuned network whenever an MLP is used.
pub fn evaluate<T: Scalar>(
    net: &UNet<T>,
    mlp: Option<&FaderMlp<T>>,
    mosaic_scale: usize,
    test: &DatasetIndex,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    opts.mask.validate()?;
    if test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let (h, w) = test.resolution;
    let side = h.min(w);
    let levels = opts.levels.unwrap_or_else(|| default_levels(side));
    let window = opts.window.unwrap_or_else(|| default_window(side));
    let c = T::lit(opts.gms_c);
    let m = mosaic_scale;
    if h % m != 0 || w % m != 0 {
        return Err(Error::ConfigMismatch(format!(
            "{h}x{w} is not divisible by the mosaic scale {m}"
        )));
    }
    let choice = match opts.masking {
        MaskingMode::None => AttenuationChoice::None,
        MaskingMode::ForcedOnes => AttenuationChoice::Forced(SoftMask::ones(h / m, w / m)),
        MaskingMode::Soft => AttenuationChoice::Soft,
        MaskingMode::Hard => AttenuationChoice::Hard {
            keep_quantile: opts.keep_quantile,
        },
    };

    let mut warnings = test.warnings.clone();
    let mut records = Vec::with_capacity(test.len());
    let mut maps: Vec<AnomalyMap<T>> = Vec::with_capacity(test.len());
    let mut gts: Vec<Option<Map2<bool>>> = Vec::with_capacity(test.len());
    let (mut defect_vals, mut normal_vals, mut clean_vals, mut rhos) = (vec![], vec![], vec![], vec![]);

    let order: Vec<usize> = (0..test.len()).collect();
    for chunk in order.chunks(opts.batch_size.max(1)) {
        let mut images = Vec::with_capacity(chunk.len());
        let mut masks = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let img = test.load_image::<T>(i)?;
            let entry = &test.entries[i];
            let gt = match test.load_gt(i) {
                Ok(g) => Some(g),
                Err(Error::MissingGroundTruth(p)) => {
                    warnings.push(format!("no ground truth for {}", p.display()));
                    None
                }
                Err(e) => return Err(e),
            };
            let ctx = MaskContext {
                gt: gt.as_ref(),
                image_path: Some(&entry.image_path),
                salt: i as u64,
            };
            let mask = provide_mask(&opts.mask, &img, &ctx)?.swap_remove(0);
            images.push(img);
            masks.push(mask);
            gts.push(gt);
        }
        let outs = infer_batch(net, mlp, m, &images, &masks, &choice, opts.scaling)?;
        for ((&i, img), out) in chunk.iter().zip(&images).zip(outs) {
            let entry = &test.entries[i];
            let map = msgms_anomaly_map(img, &out.recon, levels, c)?;
            let score = image_anomaly_score(&map, window).as_f64();
            let mask_mean = out.mask.as_ref().map(|s| s.mean().as_f64());
            if let Some(sm) = &out.mask {
                let gt = gts[i].as_ref();
                match (entry.label, gt) {
                    (Label::Anomalous, Some(gt)) => {
                        let dp = defect_patches(gt, m);
                        for (&v, &d) in sm.values().iter().zip(dp.data()) {
                            if d {
                                defect_vals.push(v.as_f64());
                            } else {
                                normal_vals.push(v.as_f64());
                            }
                        }
                    }
                    (Label::Normal, _) => {
                        clean_vals.extend(sm.values().iter().map(|v| v.as_f64()));
                        if let Some(pred) = &out.predicted {
                            let gt_l = gt_patch_losses(img, &out.recon, m)?;
                            let a: Vec<f64> = pred.values.iter().map(|v| v.as_f64()).collect();
                            let b: Vec<f64> = gt_l.values.iter().map(|v| v.as_f64()).collect();
                            rhos.extend(spearman(&a, &b));
                        }
                    }
                    _ => {}
                }
            }
            records.push(ImageRecord {
                path: entry.image_path.clone(),
                category: entry.category.clone(),
                label: entry.label,
                score,
                mask_mean,
            });
            maps.push(map);
        }
    }

    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.label == Label::Anomalous).collect();
    let image_auroc = auroc(&scores, &labels)?;
    let pixel_auroc = if gts.iter().all(Option::is_some) {
        let gt_maps: Vec<Map2<bool>> = gts.into_iter().map(|g| g.expect("checked")).collect();
        match pixel_auroc(&maps, &gt_maps) {
            Ok(v) => Some(v),
            Err(Error::DegenerateLabels) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };
    Ok(EvalReport {
        image_auroc,
        pixel_auroc,
        records,
        options: opts.clone(),
        levels,
        window,
        mosaic_scale: m,
        mask_stats: MaskStats {
            defect_patch_mean: mean(&defect_vals),
            normal_patch_mean: mean(&normal_vals),
            normal_image_mean: mean(&clean_vals),
            spearman_normal: mean(&rhos),
        },
        maps: if opts.keep_maps {
            maps.iter().map(|a| a.0.map(|v| v.as_f64())).collect()
        } else {
            Vec::new()
        },
        warnings,
    })
}
