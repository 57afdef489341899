//! Procedural textures with injected defects.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_image_dataset, DatasetIndex, Split};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Map2};
use crate::seeding;

pub const NOISE_SIGMA: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureFamily {
    Stripes,
    Checker,
    Blobs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    PatchSwap,
    IntensitySpot,
    ScratchLine,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [
        DefectKind::PatchSwap,
        DefectKind::IntensitySpot,
        DefectKind::ScratchLine,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            DefectKind::PatchSwap => "patch-swap",
            DefectKind::IntensitySpot => "intensity-spot",
            DefectKind::ScratchLine => "scratch-line",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub n_train_normal: usize,
    pub n_test_normal: usize,
    pub n_test_defect: usize,
    /// `[H, W]`
    pub resolution: [usize; 2],
    pub texture_family: TextureFamily,
    pub defect_kinds: Vec<DefectKind>,
    /// Upper bound on the defect area as a fraction of the image.
    pub defect_area_fraction: f64,
    /// Offset of spot and scratch fills from the texture mean.
    pub defect_contrast: f64,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            n_train_normal: 200,
            n_test_normal: 50,
            n_test_defect: 50,
            resolution: [64, 64],
            texture_family: TextureFamily::Stripes,
            defect_kinds: DefectKind::ALL.to_vec(),
            defect_area_fraction: 0.05,
            defect_contrast: 0.4,
            seed: 7,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_normal == 0 || self.n_test_normal == 0 || self.n_test_defect == 0 {
            return Err(Error::Config("toy dataset counts must be positive".into()));
        }
        if !(self.defect_area_fraction > 0.0 && self.defect_area_fraction <= 0.25) {
            return Err(Error::Config(format!(
                "defect_area_fraction must lie in (0, 0.25], got {}",
                self.defect_area_fraction
            )));
        }
        if !(self.defect_contrast >= 0.2 && self.defect_contrast <= 0.5) {
            return Err(Error::Config(format!(
                "defect_contrast must lie in [0.2, 0.5], got {}",
                self.defect_contrast
            )));
        }
        if self.defect_kinds.is_empty() {
            return Err(Error::Config("defect_kinds must not be empty".into()));
        }
        if self.resolution[0] < 16 || self.resolution[1] < 16 {
            return Err(Error::Config("toy resolution must be at least 16x16".into()));
        }
        Ok(())
    }

    /// Largest number of defective pixels in one image.
    pub fn max_defect_pixels(&self) -> usize {
        (self.defect_area_fraction * (self.resolution[0] * self.resolution[1]) as f64).ceil() as usize
    }
}

/// One rendered image before quantization. `base` is the defect-free
/// texture the defect was injected into.
#[derive(Clone, Debug)]
pub struct ToySample {
    pub base: ImageTensor<f64>,
    pub image: ImageTensor<f64>,
    pub defect: Option<(DefectKind, Map2<bool>)>,
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub train: DatasetIndex,
    pub test: DatasetIndex,
    pub manifest: PathBuf,
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST_NORMAL: u64 = 2;
const STREAM_TEST_DEFECT: u64 = 3;

struct Jitter {
    phase: f64,
    shift: (f64, f64),
    brightness: f64,
    blobs: Vec<(f64, f64, f64, f64)>,
}

impl Jitter {
    fn draw(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        Self {
            phase: rng.gen_range(0.0..2.0 * PI),
            shift: (rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0)),
            brightness: rng.gen_range(-0.05..0.05),
            blobs: (0..8)
                .map(|_| {
                    (
                        rng.gen_range(0.0..h as f64),
                        rng.gen_range(0.0..w as f64),
                        rng.gen_range(3.0..7.0),
                        if rng.gen_bool(0.5) { 0.25 } else { -0.25 },
                    )
                })
                .collect(),
        }
    }
}

const TINT: [f64; 3] = [1.0, 0.85, 0.7];

fn texture_value(family: TextureFamily, j: &Jitter, y: f64, x: f64, rotated: bool) -> f64 {
    let (y, x) = if rotated { (x, -y) } else { (y, x) };
    match family {
        TextureFamily::Stripes => {
            let t = (x + y) / std::f64::consts::SQRT_2;
            0.5 + 0.25 * (2.0 * PI * t / 10.0 + j.phase).sin()
        }
        TextureFamily::Checker => {
            let cy = ((y + j.shift.0) / 8.0).floor() as i64;
            let cx = ((x + j.shift.1) / 8.0).floor() as i64;
            if (cy + cx).rem_euclid(2) == 0 {
                0.3
            } else {
                0.7
            }
        }
        TextureFamily::Blobs => {
            0.5 + j
                .blobs
                .iter()
                .map(|&(by, bx, s, a)| a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp())
                .sum::<f64>()
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

fn render_texture(
    family: TextureFamily,
    j: &Jitter,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
    rotated: bool,
) -> ImageTensor<f64> {
    let mut img = ImageTensor::zeros(h, w, 3);
    for y in 0..h {
        for x in 0..w {
            let v = texture_value(family, j, y as f64, x as f64, rotated);
            for (c, tint) in TINT.iter().enumerate() {
                let n = NOISE_SIGMA * gaussian(rng);
                img.set(y, x, c, (v * tint + j.brightness + n).clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Rasterizes `inside` and shrinks `scale` until the region fits the budget.
fn fit_region(h: usize, w: usize, budget: usize, mut scale: f64, inside: impl Fn(f64, f64, f64) -> bool) -> Map2<bool> {
    loop {
        let region = Map2::from_fn(h, w, |y, x| inside(y as f64, x as f64, scale));
        let count = region.data().iter().filter(|&&r| r).count();
        if count <= budget && count > 0 {
            return region;
        }
        if count == 0 {
            scale *= 1.1;
        } else {
            scale *= 0.95;
        }
    }
}

fn inject(
    kind: DefectKind,
    spec: &ToySpec,
    base: &ImageTensor<f64>,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor<f64>, Map2<bool>) {
    let (h, w, _) = base.shape();
    let budget = spec.max_defect_pixels();
    let area = budget as f64 * rng.gen_range(0.5..1.0);
    let margin = 6.0;
    let cy = rng.gen_range(margin..h as f64 - margin);
    let cx = rng.gen_range(margin..w as f64 - margin);
    let mut img = base.clone();
    let region = match kind {
        DefectKind::IntensitySpot => {
            let r0 = (area / PI).sqrt();
            let aspect = rng.gen_range(0.6..1.0);
            fit_region(h, w, budget, r0, |y, x, r| {
                ((y - cy) / (r * aspect)).powi(2) + ((x - cx) / r).powi(2) <= 1.0
            })
        }
        DefectKind::ScratchLine => {
            let angle = rng.gen_range(0.0..PI);
            let (dy, dx) = (angle.sin(), angle.cos());
            fit_region(h, w, budget, area / 2.0, |y, x, len| {
                let along = (y - cy) * dy + (x - cx) * dx;
                let across = (y - cy) * dx - (x - cx) * dy;
                along.abs() <= len / 2.0 && across.abs() <= 1.0
            })
        }
        DefectKind::PatchSwap => {
            let s0 = area.sqrt() / 2.0;
            fit_region(h, w, budget, s0, |y, x, s| (y - cy).abs() <= s && (x - cx).abs() <= s)
        }
    };
    let cells: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| region.get(y, x))
        .collect();
    match kind {
        DefectKind::IntensitySpot | DefectKind::ScratchLine => {
            let mean = base.mean();
            // Flat fill far from the texture mean, on whichever side has room.
            let k = spec.defect_contrast;
            let target = if mean < 0.5 { mean + k } else { mean - k };
            for &(y, x) in &cells {
                for (c, tint) in TINT.iter().enumerate() {
                    let n = NOISE_SIGMA * gaussian(rng);
                    img.set(y, x, c, (target * tint + n).clamp(0.0, 1.0));
                }
            }
        }
        DefectKind::PatchSwap => {
            let j = Jitter::draw(rng, h, w);
            let other = render_texture(spec.texture_family, &j, h, w, rng, true);
            for &(y, x) in &cells {
                for c in 0..3 {
                    img.set(y, x, c, other.get(y, x, c));
                }
            }
        }
    }
    (img, region)
}

/// Renders sample `index` of a stream; `defect` selects the injected kind.
pub fn render_toy_sample(spec: &ToySpec, stream: u64, index: usize, defect: Option<DefectKind>) -> ToySample {
    let [h, w] = spec.resolution;
    let mut rng = seeding::stream(spec.seed, &[stream, index as u64]);
    let j = Jitter::draw(&mut rng, h, w);
    let base = render_texture(spec.texture_family, &j, h, w, &mut rng, false);
    match defect {
        None => ToySample {
            image: base.clone(),
            base,
            defect: None,
        },
        Some(kind) => {
            let (image, region) = inject(kind, spec, &base, &mut rng);
            ToySample {
                base,
                image,
                defect: Some((kind, region)),
            }
        }
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_rgb(img: &ImageTensor<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = img.shape();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (y, x) = (y as usize, x as usize);
        Rgb([0, 1, 2].map(|c| quantize(img.get(y, x, c))))
    });
    buf.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn write_mask(m: &Map2<bool>, path: &Path) -> Result<()> {
    let (h, w) = m.dims();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    buf.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[derive(Serialize)]
struct Manifest<'a> {
    format: &'static str,
    seed: u64,
    noise_sigma: f64,
    spec: &'a ToySpec,
    counts: ManifestCounts,
}

#[derive(Serialize)]
struct ManifestCounts {
    train_good: usize,
    test_good: usize,
    test_defect: BTreeMap<String, usize>,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes the dataset in MVTec layout under `out_dir` plus `manifest.toml`,
/// then indexes it. Output is a pure function of `spec`.
pub fn generate_toy_dataset(spec: &ToySpec, out_dir: &Path) -> Result<ToyDataset> {
    spec.validate()?;
    let train_dir = out_dir.join("train").join("good");
    let test_good = out_dir.join("test").join("good");
    mkdir(&train_dir)?;
    mkdir(&test_good)?;
    for i in 0..spec.n_train_normal {
        let s = render_toy_sample(spec, STREAM_TRAIN, i, None);
        write_rgb(&s.image, &train_dir.join(format!("{i:03}.png")))?;
    }
    for i in 0..spec.n_test_normal {
        let s = render_toy_sample(spec, STREAM_TEST_NORMAL, i, None);
        write_rgb(&s.image, &test_good.join(format!("{i:03}.png")))?;
    }
    let mut per_kind = vec![0usize; spec.defect_kinds.len()];
    for i in 0..spec.n_test_defect {
        let k = i % spec.defect_kinds.len();
        let kind = spec.defect_kinds[k];
        per_kind[k] += 1;
        let s = render_toy_sample(spec, STREAM_TEST_DEFECT, i, Some(kind));
        let img_dir = out_dir.join("test").join(kind.dir_name());
        let gt_dir = out_dir.join("ground_truth").join(kind.dir_name());
        mkdir(&img_dir)?;
        mkdir(&gt_dir)?;
        write_rgb(&s.image, &img_dir.join(format!("{i:03}.png")))?;
        let (_, region) = s.defect.as_ref().expect("defect sample");
        write_mask(region, &gt_dir.join(format!("{i:03}_mask.png")))?;
    }
    let manifest = Manifest {
        format: "fader-toy-v1",
        seed: spec.seed,
        noise_sigma: NOISE_SIGMA,
        spec,
        counts: ManifestCounts {
            train_good: spec.n_train_normal,
            test_good: spec.n_test_normal,
            test_defect: spec
                .defect_kinds
                .iter()
                .zip(&per_kind)
                .map(|(k, &n)| (k.dir_name().to_string(), n))
                .collect(),
        },
    };
    let manifest_path = out_dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    let res = (spec.resolution[0], spec.resolution[1]);
    Ok(ToyDataset {
        root: out_dir.to_path_buf(),
        train: load_image_dataset(out_dir, Split::Train, res, true)?,
        test: load_image_dataset(out_dir, Split::Test, res, true)?,
        manifest: manifest_path,
    })
}

/// Stream identifiers, exposed so tests can re-render exact samples.
pub mod streams {
    pub const TRAIN: u64 = super::STREAM_TRAIN;
    pub const TEST_NORMAL: u64 = super::STREAM_TEST_NORMAL;
    pub const TEST_DEFECT: u64 = super::STREAM_TEST_DEFECT;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defects_stay_inside_gt_and_within_budget() {
        let spec = ToySpec::default();
        let budget = spec.max_defect_pixels();
        for i in 0..30 {
            let kind = DefectKind::ALL[i % 3];
            let s = render_toy_sample(&spec, streams::TEST_DEFECT, i, Some(kind));
            let (_, gt) = s.defect.as_ref().unwrap();
            let n = gt.data().iter().filter(|&&g| g).count();
            assert!(n >= 1 && n <= budget, "{n} > {budget}");
            for (k, (&a, &b)) in s.image.data().iter().zip(s.base.data()).enumerate() {
                let p = k % (64 * 64);
                if a != b {
                    assert!(gt.get(p / 64, p % 64));
                }
            }
        }
    }

    #[test]
    fn intensity_spots_contrast_with_surround() {
        let spec = ToySpec::default();
        for i in 0..20 {
            let s = render_toy_sample(&spec, streams::TEST_DEFECT, i, Some(DefectKind::IntensitySpot));
            let (_, gt) = s.defect.unwrap();
            let lum = s.image.luminance();
            let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
            for (v, g) in lum.data().iter().zip(gt.data()) {
                if *g {
                    inside += v;
                    ni += 1;
                } else {
                    outside += v;
                    no += 1;
                }
            }
            assert!((inside / ni as f64 - outside / no as f64).abs() >= 0.2);
        }
    }

    #[test]
    fn validation_bounds() {
        let mut s = ToySpec {
            defect_area_fraction: 0.3,
            ..ToySpec::default()
        };
        assert!(s.validate().is_err());
        s.defect_area_fraction = 0.05;
        s.n_test_defect = 0;
        assert!(s.validate().is_err());
    }
}
