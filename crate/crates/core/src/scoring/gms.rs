//! Gradient magnitude similarity (GMS) and its multi-scale anomaly map.

use crate::error::{Error, Result};
use crate::image::{avg_pool2, upsample_nearest, ImageTensor, Map2};
use crate::scalar::Scalar;

/// Default stabilizing constant for images in `[0, 1]`.
pub const DEFAULT_GMS_C: f64 = 0.0026;

/// Per-pixel anomaly in `[0, 1]`; 0 means perfectly similar.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap<T>(pub Map2<T>);

impl<T: Scalar> AnomalyMap<T> {
    pub fn map(&self) -> &Map2<T> {
        &self.0
    }
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Horizontal and vertical Prewitt responses (kernels scaled by 1/3) with
/// replicated borders.
pub(crate) fn prewitt<T: Scalar>(m: &Map2<T>) -> (Map2<T>, Map2<T>) {
    let (h, w) = m.dims();
    let third = T::lit(1.0 / 3.0);
    let at = |y: isize, x: isize| m.get(clamp_idx(y, h), clamp_idx(x, w));
    let mut gx = Map2::filled(h, w, T::zero());
    let mut gy = Map2::filled(h, w, T::zero());
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sx = T::zero();
            let mut sy = T::zero();
            for d in -1..=1 {
                sx += at(y + d, x + 1) - at(y + d, x - 1);
                sy += at(y + 1, x + d) - at(y - 1, x + d);
            }
            gx.set(y as usize, x as usize, sx * third);
            gy.set(y as usize, x as usize, sy * third);
        }
    }
    (gx, gy)
}

fn magnitude<T: Scalar>(gx: &Map2<T>, gy: &Map2<T>) -> Map2<T> {
    Map2::from_fn(gx.height(), gx.width(), |y, x| {
        let (a, b) = (gx.get(y, x), gy.get(y, x));
        (a * a + b * b).sqrt()
    })
}

fn check_c<T: Scalar>(c: T) -> Result<()> {
    if !(c > T::zero()) {
        return Err(Error::Config(format!("GMS constant must be > 0, got {c}")));
    }
    Ok(())
}

fn gms_grid<T: Scalar>(a: &Map2<T>, b: &Map2<T>, c: T) -> Map2<T> {
    let (ax, ay) = prewitt(a);
    let (bx, by) = prewitt(b);
    let ga = magnitude(&ax, &ay);
    let gb = magnitude(&bx, &by);
    let two = T::lit(2.0);
    Map2::from_fn(a.height(), a.width(), |y, x| {
        let (p, q) = (ga.get(y, x), gb.get(y, x));
        (two * p * q + c) / (p * p + q * q + c)
    })
}

/// Single-scale similarity map on luminance; values in `(0, 1]`.
pub fn gms_map<T: Scalar>(image: &ImageTensor<T>, recon: &ImageTensor<T>, c: T) -> Result<Map2<T>> {
    image.same_shape(recon)?;
    check_c(c)?;
    Ok(gms_grid(&image.luminance(), &recon.luminance(), c))
}

fn check_levels(h: usize, w: usize, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Config("MSGMS needs at least one level".into()));
    }
    let f = 1usize << (levels - 1);
    if !h.is_multiple_of(f) || !w.is_multiple_of(f) {
        return Err(Error::shape(format!(
            "{h}x{w} is not divisible by 2^{} for {levels} MSGMS levels",
            levels - 1
        )));
    }
    Ok(())
}

/// `1 - mean_k GMS_k`, where level `k` compares the pair after `k` rounds of
/// 2x2 average pooling and is upsampled back (nearest) to full size.
pub fn msgms_anomaly_map<T: Scalar>(
    image: &ImageTensor<T>,
    recon: &ImageTensor<T>,
    levels: usize,
    c: T,
) -> Result<AnomalyMap<T>> {
    image.same_shape(recon)?;
    check_c(c)?;
    let (h, w, _) = image.shape();
    check_levels(h, w, levels)?;
    let mut a = image.luminance();
    let mut b = recon.luminance();
    let mut acc = Map2::filled(h, w, T::zero());
    for k in 0..levels {
        if k > 0 {
            a = avg_pool2(&a);
            b = avg_pool2(&b);
        }
        let g = upsample_nearest(&gms_grid(&a, &b, c), 1 << k);
        for (o, &v) in acc.data_mut().iter_mut().zip(g.data()) {
            *o += v;
        }
    }
    let n = T::from_usize_lossy(levels);
    Ok(AnomalyMap(acc.map(|s| T::one() - s / n)))
}

/// Mean MSGMS anomaly and its gradient w.r.t. every channel of `recon`.
///
/// Used as a training loss; `d/d recon` flows through luminance, pooling,
/// Prewitt filters and the magnitude (taken as zero where the magnitude is 0).
pub fn msgms_loss_with_grad<T: Scalar>(
    image: &ImageTensor<T>,
    recon: &ImageTensor<T>,
    levels: usize,
    c: T,
) -> Result<(T, ImageTensor<T>)> {
    image.same_shape(recon)?;
    check_c(c)?;
    let (h, w, ch) = image.shape();
    check_levels(h, w, levels)?;
    let two = T::lit(2.0);
    let third = T::lit(1.0 / 3.0);
    let nl = T::from_usize_lossy(levels);
    let npx = T::from_usize_lossy(h * w);

    let mut a = image.luminance();
    let mut b = recon.luminance();
    let mut loss = T::zero();
    // gradient w.r.t. the luminance of recon at full resolution
    let mut d_lum = Map2::filled(h, w, T::zero());
    for k in 0..levels {
        if k > 0 {
            a = avg_pool2(&a);
            b = avg_pool2(&b);
        }
        let (lh, lw) = b.dims();
        let f = 1usize << k;
        let (ax, ay) = prewitt(&a);
        let (bx, by) = prewitt(&b);
        let ga = magnitude(&ax, &ay);
        // each level pixel covers f*f full-res pixels of the averaged map
        let weight = T::from_usize_lossy(f * f) / (nl * npx);
        let mut d_bx = Map2::filled(lh, lw, T::zero());
        let mut d_by = Map2::filled(lh, lw, T::zero());
        for y in 0..lh {
            for x in 0..lw {
                let p = ga.get(y, x);
                let (qx, qy) = (bx.get(y, x), by.get(y, x));
                let q = (qx * qx + qy * qy).sqrt();
                let num = two * p * q + c;
                let den = p * p + q * q + c;
                loss += (T::one() - num / den) * weight;
                if q > T::zero() {
                    // d(1 - num/den)/dq
                    let dq = -(two * p * den - num * two * q) / (den * den) * weight;
                    d_bx.set(y, x, dq * qx / q);
                    d_by.set(y, x, dq * qy / q);
                }
            }
        }
        // adjoint of the replicated-border Prewitt filters
        let mut d_b = Map2::filled(lh, lw, T::zero());
        for y in 0..lh as isize {
            for x in 0..lw as isize {
                let gxv = d_bx.get(y as usize, x as usize) * third;
                let gyv = d_by.get(y as usize, x as usize) * third;
                for d in -1..=1 {
                    let add = |m: &mut Map2<T>, yy: isize, xx: isize, v: T| {
                        let (cy, cx) = (clamp_idx(yy, lh), clamp_idx(xx, lw));
                        let cur = m.get(cy, cx);
                        m.set(cy, cx, cur + v);
                    };
                    add(&mut d_b, y + d, x + 1, gxv);
                    add(&mut d_b, y + d, x - 1, -gxv);
                    add(&mut d_b, y + 1, x + d, gyv);
                    add(&mut d_b, y - 1, x + d, -gyv);
                }
            }
        }
        // adjoint of k rounds of 2x2 averaging: spread evenly over f*f pixels
        let spread = T::one() / T::from_usize_lossy(f * f);
        for y in 0..h {
            for x in 0..w {
                let v = d_lum.get(y, x) + d_b.get(y / f, x / f) * spread;
                d_lum.set(y, x, v);
            }
        }
    }
    let inv_c = T::one() / T::from_usize_lossy(ch);
    let grad = ImageTensor::from_fn(h, w, ch, |y, x, _| d_lum.get(y, x) * inv_c);
    Ok((loss, grad))
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// Box filter of odd side `window` with mirror (edge-exclusive) padding.
pub fn box_filter<T: Scalar>(m: &Map2<T>, window: usize) -> Map2<T> {
    let (h, w) = m.dims();
    let r = (window / 2) as isize;
    let norm = T::one() / T::from_usize_lossy(window * window);
    // separable: rows then columns
    let rows = Map2::from_fn(h, w, |y, x| {
        let mut s = T::zero();
        for d in -r..=r {
            s += m.get(y, reflect(x as isize + d, w));
        }
        s
    });
    Map2::from_fn(h, w, |y, x| {
        let mut s = T::zero();
        for d in -r..=r {
            s += rows.get(reflect(y as isize + d, h), x);
        }
        s * norm
    })
}

/// Image-level score: maximum of the box-smoothed anomaly map.
pub fn image_anomaly_score<T: Scalar>(map: &AnomalyMap<T>, window: usize) -> T {
    box_filter(&map.0, window.max(1) | 1).max_value()
}

/// Smoothing window for a given image side: 21 at 256 pixels and above,
/// 7 for desk-scale inputs.
pub fn default_window(side: usize) -> usize {
    if side >= 256 {
        21
    } else {
        7
    }
}

/// Default number of MSGMS levels for an image side.
pub fn default_levels(side: usize) -> usize {
    if side >= 256 {
        3
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ImageTensor<f64> {
        ImageTensor::from_fn(h, w, 1, |y, x, _| f(y, x))
    }

    #[test]
    fn identical_images_are_fully_similar() {
        let a = img(8, 8, |y, x| ((y * 7 + x * 3) % 5) as f64 / 5.0);
        let g = gms_map(&a, &a, 0.0026).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
        let m = msgms_anomaly_map(&a, &a, 3, 0.0026).unwrap();
        assert!(m.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_images_are_fully_similar() {
        let a = img(8, 8, |_, _| 0.2);
        let b = img(8, 8, |_, _| 0.9);
        let g = gms_map(&a, &b, 0.0026).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_level_is_complement_of_gms() {
        let a = img(8, 8, |y, x| ((y * x) % 3) as f64 / 3.0);
        let b = img(8, 8, |y, x| ((y + x) % 4) as f64 / 4.0);
        let g = gms_map(&a, &b, 0.0026).unwrap();
        let m = msgms_anomaly_map(&a, &b, 1, 0.0026).unwrap();
        for (s, v) in g.data().iter().zip(m.0.data()) {
            assert_eq!(1.0 - s, *v);
        }
    }

    #[test]
    fn invalid_inputs() {
        let a = img(6, 6, |_, _| 0.0);
        assert!(matches!(gms_map(&a, &a, 0.0), Err(Error::Config(_))));
        assert!(matches!(msgms_anomaly_map(&a, &a, 3, 0.0026), Err(Error::Shape(_))));
        let b = img(6, 4, |_, _| 0.0);
        assert!(gms_map(&a, &b, 0.0026).is_err());
    }

    #[test]
    fn score_of_constant_and_spike() {
        let z = AnomalyMap(Map2::filled(64, 64, 0.0f64));
        assert_eq!(image_anomaly_score(&z, 21), 0.0);
        let c = AnomalyMap(Map2::filled(64, 64, 0.3f64));
        assert!((image_anomaly_score(&c, 21) - 0.3).abs() < 1e-12);
        let mut s = Map2::filled(64, 64, 0.0f64);
        s.set(30, 30, 1.0);
        assert!((image_anomaly_score(&AnomalyMap(s), 21) - 1.0 / 441.0).abs() < 1e-15);
    }

    #[test]
    fn window_defaults() {
        assert_eq!(default_window(256), 21);
        assert_eq!(default_window(64), 7);
        assert_eq!(default_levels(64), 2);
        assert_eq!(default_levels(256), 3);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 1);
        assert_eq!(reflect(4, 4), 2);
        assert_eq!(reflect(-7, 4), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn msgms_loss_gradient_matches_finite_differences() {
        let a = ImageTensor::<f64>::from_fn(8, 8, 2, |y, x, c| (((y * 13 + x * 7 + c * 5) % 11) as f64) / 11.0);
        let b = ImageTensor::<f64>::from_fn(8, 8, 2, |y, x, c| {
            (((y * 3 + x * 5 + c * 2) % 9) as f64) / 9.0 + 0.01 * (x as f64)
        });
        let (loss, grad) = msgms_loss_with_grad(&a, &b, 2, 0.0026).unwrap();
        let direct = msgms_anomaly_map(&a, &b, 2, 0.0026).unwrap().0.mean();
        assert!((loss - direct).abs() < 1e-12);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..b.data().len() {
            let mut p = b.clone();
            p.data_mut()[i] += h;
            let mut m = b.clone();
            m.data_mut()[i] -= h;
            let lp = msgms_anomaly_map(&a, &p, 2, 0.0026).unwrap().0.mean();
            let lm = msgms_anomaly_map(&a, &m, 2, 0.0026).unwrap().0.mean();
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max((fd - grad.data()[i]).abs());
        }
        assert!(worst < 1e-7, "max abs deviation {worst}");
    }
}
