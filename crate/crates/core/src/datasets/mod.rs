//! MVTec-AD style dataset ingestion, a procedural toy dataset, and
//! deterministic batching.

mod toy;

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Map2};
use crate::scalar::Scalar;
use crate::seeding;

pub use toy::{
    generate_toy_dataset, render_toy_sample, streams, DefectKind, TextureFamily, ToyDataset, ToySample, ToySpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub image_path: PathBuf,
    pub label: Label,
    /// Defect type directory name (`good` for normal images).
    pub category: String,
    pub gt_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    /// Sorted by image path.
    pub entries: Vec<Entry>,
    /// `(H, W)`
    pub resolution: (usize, usize),
    pub channels: usize,
    /// Problems tolerated in lenient mode.
    pub warnings: Vec<String>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    /// Fails unless every entry is normal.
    pub fn ensure_normal_only(&self) -> Result<()> {
        if let Some(e) = self.entries.iter().find(|e| e.label != Label::Normal) {
            return Err(Error::InvalidTrainingData(format!(
                "{} is labelled anomalous",
                e.image_path.display()
            )));
        }
        Ok(())
    }

    pub fn load_image<T: Scalar>(&self, i: usize) -> Result<ImageTensor<T>> {
        load_image(&self.entries[i].image_path, self.resolution)
    }

    /// Ground-truth region of entry `i`; normal entries yield an empty mask.
    pub fn load_gt(&self, i: usize) -> Result<Map2<bool>> {
        let (h, w) = self.resolution;
        match &self.entries[i].gt_path {
            Some(p) => load_mask(p, self.resolution),
            None if self.entries[i].label == Label::Normal => Ok(Map2::filled(h, w, false)),
            None => Err(Error::MissingGroundTruth(self.entries[i].image_path.clone())),
        }
    }

    pub fn load_all<T: Scalar>(&self) -> Result<Vec<ImageTensor<T>>> {
        (0..self.len()).map(|i| self.load_image(i)).collect()
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    v.sort();
    Ok(v)
}

fn find_gt(root: &Path, category: &str, image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?.to_str()?;
    let dir = root.join("ground_truth").join(category);
    [format!("{stem}_mask.png"), format!("{stem}.png")]
        .into_iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
}

/// Indexes `<root>/train/good/*` or `<root>/test/<type>/*`; `good` is normal,
/// every other directory is anomalous and needs a mask under
/// `<root>/ground_truth/<type>/` with the same stem (optionally `_mask`).
/// With `strict = false` missing masks are recorded as warnings instead.
pub fn load_image_dataset(root: &Path, split: Split, resolution: (usize, usize), strict: bool) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::NotFound(root.to_path_buf()));
    }
    let split_dir = root.join(split.dir_name());
    if !split_dir.is_dir() {
        return Err(Error::NotFound(split_dir));
    }
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for cat_dir in sorted_dir(&split_dir)?.into_iter().filter(|p| p.is_dir()) {
        let category = cat_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let label = if category == "good" {
            Label::Normal
        } else {
            Label::Anomalous
        };
        for image_path in sorted_dir(&cat_dir)?.into_iter().filter(|p| is_image_file(p)) {
            let gt_path = match label {
                Label::Normal => None,
                Label::Anomalous => {
                    let gt = find_gt(root, &category, &image_path);
                    if gt.is_none() {
                        if strict {
                            return Err(Error::MissingGroundTruth(image_path));
                        }
                        warnings.push(format!("no ground truth for {}", image_path.display()));
                    }
                    gt
                }
            };
            entries.push(Entry {
                image_path,
                label,
                category: category.clone(),
                gt_path,
            });
        }
    }
    entries.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        entries,
        resolution,
        channels: 3,
        warnings,
    })
}

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decodes an 8-bit image, resizes it bilinearly to `(H, W)`, scales it to
/// `[0, 1]` and replicates gray images to three channels.
pub fn load_image<T: Scalar>(path: &Path, resolution: (usize, usize)) -> Result<ImageTensor<T>> {
    let (h, w) = resolution;
    let mut rgb = open(path)?.into_rgb8();
    if rgb.dimensions() != (w as u32, h as u32) {
        rgb = image::imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle);
    }
    let inv = T::lit(1.0 / 255.0);
    Ok(ImageTensor::from_fn(h, w, 3, |y, x, c| {
        T::from_u8(rgb.get_pixel(x as u32, y as u32).0[c]).expect("u8") * inv
    }))
}

/// Binary ground-truth mask (`> 127` is defective), resized nearest.
pub fn load_mask(path: &Path, resolution: (usize, usize)) -> Result<Map2<bool>> {
    let (h, w) = resolution;
    let mut g = open(path)?.into_luma8();
    if g.dimensions() != (w as u32, h as u32) {
        g = image::imageops::resize(&g, w as u32, h as u32, FilterType::Nearest);
    }
    Ok(Map2::from_fn(h, w, |y, x| g.get_pixel(x as u32, y as u32).0[0] > 127))
}

/// Batches of entry indices for one epoch. The order is a pure function of
/// `(shuffle_seed, epoch)`; the last batch may be short.
pub fn iterate_batches(len: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seeding::stream(shuffle_seed, &[0x4241_5443, epoch]));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
