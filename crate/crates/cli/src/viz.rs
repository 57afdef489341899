//! PNG renderings of inputs, masks and anomaly maps.

use std::path::Path;

use fader::image::{ImageTensor, Map2};
use fader::masking::BinaryMask;
use fader::Scalar;
use image::{Rgb, RgbImage};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn pixel<T: Scalar>(img: &ImageTensor<T>, y: usize, x: usize) -> [f64; 3] {
    let c = img.channels();
    std::array::from_fn(|k| img.get(y, x, k.min(c - 1)).as_f64())
}

/// Blue (0) through green to red (1).
pub fn heat(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v < 0.5 {
        [0.0, 2.0 * v, 1.0 - 2.0 * v]
    } else {
        [2.0 * v - 1.0, 2.0 - 2.0 * v, 0.0]
    }
}

fn blend(a: [f64; 3], b: [f64; 3], alpha: f64) -> Rgb<u8> {
    Rgb(std::array::from_fn(|k| to_u8((1.0 - alpha) * a[k] + alpha * b[k])))
}

fn save(img: RgbImage, path: &Path) -> std::io::Result<()> {
    img.save(path).map_err(std::io::Error::other)
}

pub fn write_input<T: Scalar>(img: &ImageTensor<T>, path: &Path) -> std::io::Result<()> {
    let (h, w, _) = img.shape();
    save(
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            blend(pixel(img, y as usize, x as usize), [0.0; 3], 0.0)
        }),
        path,
    )
}

/// Masked pixels tinted red.
pub fn write_binary_overlay<T: Scalar>(img: &ImageTensor<T>, mask: &BinaryMask, path: &Path) -> std::io::Result<()> {
    let (h, w, _) = img.shape();
    save(
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            let alpha = if mask.is_kept(y, x) { 0.0 } else { 0.6 };
            blend(pixel(img, y, x), [1.0, 0.0, 0.0], alpha)
        }),
        path,
    )
}

/// Patch values upsampled to the image and blended as a heat map; blue marks
/// strong attenuation.
pub fn write_soft_overlay<T: Scalar>(img: &ImageTensor<T>, grid: &Map2<T>, path: &Path) -> std::io::Result<()> {
    let (h, w, _) = img.shape();
    let (gh, gw) = grid.dims();
    save(
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            let v = grid.get(y * gh / h, x * gw / w).as_f64();
            blend(pixel(img, y, x), heat(v), 0.5)
        }),
        path,
    )
}

pub fn write_heat<T: Scalar>(map: &Map2<T>, path: &Path) -> std::io::Result<()> {
    let (h, w) = map.dims();
    save(
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            blend([0.0; 3], heat(map.get(y as usize, x as usize).as_f64()), 1.0)
        }),
        path,
    )
}
