//! Binary masks of suspected defects and the mosaic obfuscation hint.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Map2};
use crate::scalar::Scalar;
use crate::scoring::box_filter;
use crate::seeding;

/// Pixel mask; `true` keeps the pixel, `false` marks it as masked.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(Map2<bool>);

impl BinaryMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self(Map2::filled(height, width, true))
    }

    pub fn from_keep(keep: Map2<bool>) -> Self {
        Self(keep)
    }

    /// Builds a mask whose masked region is `region`.
    pub fn masking(region: &Map2<bool>) -> Self {
        Self(region.map(|r| !r))
    }

    pub fn keep(&self) -> &Map2<bool> {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    #[inline]
    pub fn is_kept(&self, y: usize, x: usize) -> bool {
        self.0.get(y, x)
    }

    pub fn masked_count(&self) -> usize {
        self.0.data().iter().filter(|&&k| !k).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.0.data().len().max(1) as f64
    }

    /// `1` for kept pixels, `0` for masked ones.
    pub fn values<T: Scalar>(&self) -> Map2<T> {
        self.0.map(|k| if k { T::one() } else { T::zero() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    #[default]
    Saliency,
    Precomputed,
    OracleGt,
    RandomMulti,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskProviderConfig {
    pub kind: MaskKind,
    /// Binarization threshold on the normalized saliency or attention map.
    pub threshold: f64,
    /// Directory of `<image stem>.png` or `<image stem>.txt` attention maps.
    pub precomputed_dir: Option<PathBuf>,
    /// Fraction of each ground-truth region the oracle covers; below 1 the
    /// deepest pixels are kept (an incomplete mask).
    pub oracle_coverage: f64,
    pub mask_count: usize,
    /// Target masked-area fraction for random masks.
    pub random_area: f64,
    /// Random rectangles are aligned to cells of this size.
    pub random_cell: usize,
    pub seed: u64,
}

impl Default for MaskProviderConfig {
    fn default() -> Self {
        Self {
            kind: MaskKind::Saliency,
            threshold: 0.6,
            precomputed_dir: None,
            oracle_coverage: 1.0,
            mask_count: 1,
            random_area: 0.25,
            random_cell: 8,
            seed: 0,
        }
    }
}

impl MaskProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, MaskKind::Saliency | MaskKind::Precomputed)
            && !(self.threshold > 0.0 && self.threshold < 1.0)
        {
            return Err(Error::Config(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        if self.kind == MaskKind::Precomputed && self.precomputed_dir.is_none() {
            return Err(Error::Config("precomputed masks need precomputed_dir".into()));
        }
        if !(self.oracle_coverage > 0.0 && self.oracle_coverage <= 1.0) {
            return Err(Error::Config("oracle_coverage must lie in (0,1]".into()));
        }
        if self.kind == MaskKind::RandomMulti && self.mask_count == 0 {
            return Err(Error::Config("random_multi needs mask_count >= 1".into()));
        }
        if !(self.random_area > 0.0 && self.random_area <= 0.5) || self.random_cell == 0 {
            return Err(Error::Config(
                "random_area must lie in (0,0.5] and random_cell > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-image inputs some providers need.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaskContext<'a> {
    /// Ground-truth defect region (`true` = defective).
    pub gt: Option<&'a Map2<bool>>,
    /// Used to locate precomputed attention files.
    pub image_path: Option<&'a Path>,
    /// Distinguishes random draws for different images and epochs.
    pub salt: u64,
}

/// Masks for one image: one entry for deterministic providers, `mask_count`
/// entries for `random_multi`.
pub fn provide_mask<T: Scalar>(
    cfg: &MaskProviderConfig,
    image: &ImageTensor<T>,
    ctx: &MaskContext<'_>,
) -> Result<Vec<BinaryMask>> {
    cfg.validate()?;
    let (h, w, _) = image.shape();
    match cfg.kind {
        MaskKind::Saliency => Ok(vec![saliency_mask(image, T::lit(cfg.threshold))]),
        MaskKind::Precomputed => {
            let dir = cfg.precomputed_dir.as_deref().expect("validated");
            let stem = ctx
                .image_path
                .and_then(|p| p.file_stem())
                .ok_or_else(|| Error::Config("precomputed masks need the image path".into()))?;
            let png = dir.join(stem).with_extension("png");
            let txt = dir.join(stem).with_extension("txt");
            let path = if png.exists() { png } else { txt };
            Ok(vec![load_precomputed_attention(&path, cfg.threshold, (h, w))?])
        }
        MaskKind::OracleGt => {
            let mask = match ctx.gt {
                None => BinaryMask::ones(h, w),
                Some(gt) => {
                    if gt.dims() != (h, w) {
                        return Err(Error::shape("ground-truth mask size differs from image"));
                    }
                    oracle_mask(gt, cfg.oracle_coverage)
                }
            };
            Ok(vec![mask])
        }
        MaskKind::RandomMulti => Ok((0..cfg.mask_count)
            .map(|k| random_mask(h, w, cfg.random_cell, cfg.random_area, cfg.seed, ctx.salt, k as u64))
            .collect()),
    }
}

/// Min-max normalization; a flat map normalizes to all zeros.
fn normalize<T: Scalar>(m: &Map2<T>) -> Map2<T> {
    let (lo, hi) = (m.min_value(), m.max_value());
    if !(hi > lo) {
        return m.map(|_| T::zero());
    }
    let span = hi - lo;
    m.map(|v| (v - lo) / span)
}

/// Masks at most half the pixels, keeping the highest scores first
/// (ties in raster order).
fn threshold_capped<T: Scalar>(norm: &Map2<T>, threshold: T) -> BinaryMask {
    let total = norm.data().len();
    let mut above: Vec<usize> = (0..total).filter(|&i| norm.data()[i] > threshold).collect();
    if above.len() * 2 > total {
        above.sort_by(|&a, &b| {
            norm.data()[b]
                .partial_cmp(&norm.data()[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        above.truncate(total / 2);
    }
    let mut keep = Map2::filled(norm.height(), norm.width(), true);
    for i in above {
        keep.data_mut()[i] = false;
    }
    BinaryMask(keep)
}

/// Channel-summed `|pixel - 9x9 local mean|`.
pub fn contrast_map<T: Scalar>(image: &ImageTensor<T>) -> Map2<T> {
    let (h, w, c) = image.shape();
    let mut acc = Map2::filled(h, w, T::zero());
    for ch in 0..c {
        let plane = Map2::from_vec(h, w, image.plane(ch).to_vec()).expect("plane sized");
        let local = box_filter(&plane, 9);
        for ((a, &v), &m) in acc.data_mut().iter_mut().zip(plane.data()).zip(local.data()) {
            *a += (v - m).abs();
        }
    }
    acc
}

/// Center-surround saliency stand-in for pre-trained attention masks.
pub fn saliency_mask<T: Scalar>(image: &ImageTensor<T>, threshold: T) -> BinaryMask {
    threshold_capped(&normalize(&contrast_map(image)), threshold)
}

fn parse_attention_text(text: &str) -> Result<Map2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::shape(format!("bad attention value {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let w = rows.first().map_or(0, Vec::len);
    if w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(Error::shape("attention grid must be a non-empty rectangle"));
    }
    let h = rows.len();
    Map2::from_vec(h, w, rows.into_iter().flatten().collect())
}

fn read_attention(path: &Path) -> Result<Map2<f64>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let is_text = path.extension().is_some_and(|e| e == "txt");
    if is_text {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return parse_attention_text(&text);
    }
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_luma16();
    let (w, h) = img.dimensions();
    Map2::from_vec(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect(),
    )
}

/// Loads an attention map (single-channel PNG or whitespace text grid),
/// normalizes it, resizes it (nearest) to `target` and thresholds it.
pub fn load_precomputed_attention(path: &Path, threshold: f64, target: (usize, usize)) -> Result<BinaryMask> {
    let raw = read_attention(path)?;
    let (ih, iw) = raw.dims();
    let (oh, ow) = target;
    let fits = |i: usize, o: usize| o.is_multiple_of(i) || i.is_multiple_of(o);
    if !fits(ih, oh) || !fits(iw, ow) {
        return Err(Error::shape(format!(
            "attention grid {ih}x{iw} does not scale to {oh}x{ow}"
        )));
    }
    let norm = normalize(&raw);
    let resized = Map2::from_fn(oh, ow, |y, x| norm.get(y * ih / oh, x * iw / ow));
    Ok(threshold_capped(&resized, threshold))
}

/// `I' = M * I + (1 - M) * mosaic(I)`, where the mosaic averages `m x m`
/// cells and repeats each mean over its cell.
pub fn mosaic_obfuscate<T: Scalar>(image: &ImageTensor<T>, mask: &BinaryMask, m: usize) -> Result<ImageTensor<T>> {
    let (h, w, c) = image.shape();
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!("mosaic scale {m} does not divide {h}x{w}")));
    }
    if mask.dims() != (h, w) {
        return Err(Error::shape(format!(
            "mask {:?} does not match image {h}x{w}",
            mask.dims()
        )));
    }
    let mut out = image.clone();
    let inv = T::one() / T::from_usize_lossy(m * m);
    for ch in 0..c {
        for cy in 0..h / m {
            for cx in 0..w / m {
                let cells = (cy * m..(cy + 1) * m).flat_map(|y| (cx * m..(cx + 1) * m).map(move |x| (y, x)));
                if cells.clone().all(|(y, x)| mask.is_kept(y, x)) {
                    continue;
                }
                let mean = cells.clone().map(|(y, x)| image.get(y, x, ch)).sum::<T>() * inv;
                for (y, x) in cells {
                    if !mask.is_kept(y, x) {
                        out.set(y, x, ch, mean);
                    }
                }
            }
        }
    }
    Ok(out)
}

fn dilate(region: &Map2<bool>) -> Map2<bool> {
    let (h, w) = region.dims();
    Map2::from_fn(h, w, |y, x| {
        (y.saturating_sub(1)..=(y + 1).min(h - 1))
            .any(|yy| (x.saturating_sub(1)..=(x + 1).min(w - 1)).any(|xx| region.get(yy, xx)))
    })
}

/// Depth of every region pixel: 1 on the boundary, growing inward
/// (4-neighbour erosion steps until the pixel disappears).
fn erosion_depth(region: &Map2<bool>) -> Map2<u32> {
    let (h, w) = region.dims();
    let mut depth = region.map(|r| if r { u32::MAX } else { 0 });
    let mut current = region.clone();
    let mut level = 0;
    while current.data().iter().any(|&v| v) {
        level += 1;
        let next = Map2::from_fn(h, w, |y, x| {
            current.get(y, x)
                && y > 0
                && x > 0
                && y + 1 < h
                && x + 1 < w
                && current.get(y - 1, x)
                && current.get(y + 1, x)
                && current.get(y, x - 1)
                && current.get(y, x + 1)
        });
        for i in 0..h * w {
            if current.data()[i] && !next.data()[i] {
                depth.data_mut()[i] = level;
            }
        }
        current = next;
    }
    depth
}

/// Oracle mask from a ground-truth region: the region dilated by one pixel
/// at full coverage, or its `coverage` fraction of deepest pixels otherwise.
pub fn oracle_mask(gt: &Map2<bool>, coverage: f64) -> BinaryMask {
    if coverage >= 1.0 {
        return BinaryMask::masking(&dilate(gt));
    }
    let depth = erosion_depth(gt);
    let mut idx: Vec<usize> = (0..gt.data().len()).filter(|&i| gt.data()[i]).collect();
    let keep_n = (coverage * idx.len() as f64).ceil() as usize;
    idx.sort_by(|&a, &b| depth.data()[b].cmp(&depth.data()[a]).then(a.cmp(&b)));
    let mut region = Map2::filled(gt.height(), gt.width(), false);
    for &i in idx.iter().take(keep_n) {
        region.data_mut()[i] = true;
    }
    BinaryMask::masking(&region)
}

/// Grid-aligned random rectangles covering roughly `area` of the image.
pub fn random_mask(h: usize, w: usize, cell: usize, area: f64, seed: u64, salt: u64, index: u64) -> BinaryMask {
    let mut rng = seeding::stream(seed, &[0x4d41_534b, salt, index]);
    let (gh, gw) = ((h / cell).max(1), (w / cell).max(1));
    let cell_h = h / gh;
    let cell_w = w / gw;
    let mut region = Map2::filled(gh, gw, false);
    let target = ((area * (gh * gw) as f64).round() as usize).clamp(1, gh * gw / 2);
    let mut covered = 0;
    let mut attempts = 0;
    while covered < target && attempts < 1000 {
        attempts += 1;
        let rh = rng.gen_range(1..=(gh / 2).max(1));
        let rw = rng.gen_range(1..=(gw / 2).max(1));
        let y0 = rng.gen_range(0..=gh - rh);
        let x0 = rng.gen_range(0..=gw - rw);
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                if covered < target && !region.get(y, x) {
                    region.set(y, x, true);
                    covered += 1;
                }
            }
        }
    }
    BinaryMask::masking(&Map2::from_fn(h, w, |y, x| {
        region.get((y / cell_h).min(gh - 1), (x / cell_w).min(gw - 1))
    }))
}
