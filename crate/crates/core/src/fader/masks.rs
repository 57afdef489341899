use crate::attenuation::{Provenance, SoftMask};
use crate::error::{Error, Result};
use crate::fader::tokens::LossVector;
use crate::scalar::Scalar;

/// `1 - (v - min) / (max - min)`; equal predictions give an all-ones mask.
pub fn soft_mask_from_losses<T: Scalar>(pred: &LossVector<T>) -> Result<SoftMask<T>> {
    if pred.is_empty() {
        return Err(Error::shape("soft mask needs at least one patch"));
    }
    if pred.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite predicted patch error".into()));
    }
    let lo = pred.values.iter().copied().fold(T::infinity(), T::min);
    let hi = pred.values.iter().copied().fold(T::neg_infinity(), T::max);
    let (nh, nw) = pred.grid;
    if !(hi > lo) {
        return Ok(SoftMask::ones(nh, nw));
    }
    let span = hi - lo;
    let grid = pred
        .as_map()
        .map(|v| (T::one() - (v - lo) / span).max(T::zero()).min(T::one()));
    SoftMask::new(grid, Provenance::Soft)
}

/// Linear-interpolated quantile of unsorted values.
fn quantile<T: Scalar>(values: &[T], q: f64) -> T {
    let mut s = values.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = T::lit(pos - lo as f64);
    s[lo] + (s[hi] - s[lo]) * f
}

/// Hard variant: patches strictly above the `keep_quantile` quantile get 0.
pub fn binary_mask_from_losses<T: Scalar>(pred: &LossVector<T>, keep_quantile: f64) -> Result<SoftMask<T>> {
    if !(keep_quantile > 0.0 && keep_quantile < 1.0) {
        return Err(Error::Config(format!(
            "keep_quantile must lie in (0,1), got {keep_quantile}"
        )));
    }
    if pred.is_empty() {
        return Err(Error::shape("binary mask needs at least one patch"));
    }
    if pred.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite predicted patch error".into()));
    }
    let t = quantile(&pred.values, keep_quantile);
    let grid = pred.as_map().map(|v| if v > t { T::zero() } else { T::one() });
    SoftMask::new(grid, Provenance::Binary)
}
