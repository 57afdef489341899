//! Area under the ROC curve via the Mann-Whitney statistic.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::image::Map2;
use crate::scalar::Scalar;
use crate::scoring::gms::AnomalyMap;

/// `(#{pos > neg} + 0.5 * #{pos = neg}) / (P * N)`, computed with exact
/// integer counts.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let mut neg: Vec<T> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || neg.is_empty() {
        return Err(Error::DegenerateLabels);
    }
    neg.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));

    // twice the Mann-Whitney U, kept integral
    let mut twice_u: u128 = 0;
    for (&s, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        let below = neg.partition_point(|&v| v < s);
        let not_above = neg.partition_point(|&v| v <= s);
        twice_u += 2 * below as u128 + (not_above - below) as u128;
    }
    let denom = 2 * n_pos as u128 * neg.len() as u128;
    Ok(twice_u as f64 / denom as f64)
}

/// AUROC over the pooled pixel population of every map; ground-truth pixels
/// set to `true` are anomalous.
pub fn pixel_auroc<T: Scalar>(maps: &[AnomalyMap<T>], gt: &[Map2<bool>]) -> Result<f64> {
    if maps.len() != gt.len() {
        return Err(Error::shape(format!("{} maps vs {} masks", maps.len(), gt.len())));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (m, g) in maps.iter().zip(gt) {
        if m.0.dims() != g.dims() {
            return Err(Error::shape(format!("map {:?} vs mask {:?}", m.0.dims(), g.dims())));
        }
        scores.extend_from_slice(m.0.data());
        labels.extend_from_slice(g.data());
    }
    auroc(&scores, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_with_tie() {
        let a = auroc(&[0.9f64, 0.5, 0.5, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(a, 0.875);
    }

    #[test]
    fn perfect_and_inverted() {
        let s = [0.1f32, 0.2, 0.8, 0.9];
        assert_eq!(auroc(&s, &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[true, true, false, false]).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_degenerate() {
        assert!(matches!(
            auroc(&[0.1f64, 0.2], &[true, true]),
            Err(Error::DegenerateLabels)
        ));
        assert!(matches!(
            auroc(&[0.1f64, 0.2], &[false, false]),
            Err(Error::DegenerateLabels)
        ));
    }

    #[test]
    fn pixel_level() {
        let gt = Map2::from_fn(4, 4, |y, x| y < 2 && x < 2);
        let exact = AnomalyMap(gt.map(|b| if b { 1.0f64 } else { 0.0 }));
        assert_eq!(pixel_auroc(&[exact], std::slice::from_ref(&gt)).unwrap(), 1.0);
        let flat = AnomalyMap(Map2::filled(4, 4, 0.4f64));
        assert_eq!(pixel_auroc(&[flat], std::slice::from_ref(&gt)).unwrap(), 0.5);
        let bad = AnomalyMap(Map2::filled(2, 2, 0.4f64));
        assert!(pixel_auroc(&[bad], &[gt]).is_err());
    }
}
