use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fader::tokens::LossVector;
use crate::scalar::Scalar;
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    /// All ordered pairs up to 256 patches, sampled pairs beyond.
    #[default]
    Auto,
    AllPairs,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankingConfig {
    pub margin: f64,
    pub pair_strategy: PairStrategy,
    /// Pairs drawn per image when sampling; `None` means `8 n`.
    pub pairs_per_image: Option<usize>,
    pub seed: u64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            pair_strategy: PairStrategy::Auto,
            pairs_per_image: None,
            seed: 0,
        }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "ranking margin must be > 0, got {}",
                self.margin
            )));
        }
        Ok(())
    }

    fn uses_all_pairs(&self, n: usize) -> bool {
        match self.pair_strategy {
            PairStrategy::AllPairs => true,
            PairStrategy::Sampled => false,
            PairStrategy::Auto => n <= 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingLoss<T> {
    pub value: T,
    /// `dL/dprediction`
    pub grad: Vec<T>,
    pub pairs: usize,
}

/// Mean over pairs `(i, j)`, `i != j`, of
/// `max(0, -s_ij (pred_i - pred_j) + margin)` with `s_ij = +1` when
/// `target_i > target_j` and `-1` otherwise.
pub fn margin_ranking_loss<T: Scalar>(
    pred: &LossVector<T>,
    target: &LossVector<T>,
    cfg: &RankingConfig,
    salt: u64,
) -> Result<RankingLoss<T>> {
    cfg.validate()?;
    let n = pred.len();
    if target.len() != n {
        return Err(Error::shape(format!("{n} predictions vs {} targets", target.len())));
    }
    if n < 2 {
        return Err(Error::InsufficientPatches(n));
    }
    let margin = T::lit(cfg.margin);
    let (p, l) = (&pred.values, &target.values);
    let mut total = T::zero();
    let mut grad = vec![T::zero(); n];
    let mut pairs = 0usize;
    let mut visit = |i: usize, j: usize| {
        let sign = if l[i] > l[j] { T::one() } else { -T::one() };
        let pre = -sign * (p[i] - p[j]) + margin;
        if pre > T::zero() {
            total += pre;
            grad[i] -= sign;
            grad[j] += sign;
        }
        pairs += 1;
    };
    if cfg.uses_all_pairs(n) {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    visit(i, j);
                }
            }
        }
    } else {
        let count = cfg.pairs_per_image.unwrap_or(8 * n).max(1);
        let mut rng = seeding::stream(cfg.seed, &[0x5241_4e4b, salt]);
        for _ in 0..count {
            let i = rng.gen_range(0..n);
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            visit(i, j);
        }
    }
    let inv = T::one() / T::from_usize_lossy(pairs);
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok(RankingLoss {
        value: total * inv,
        grad,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lv(v: &[f64]) -> LossVector<f64> {
        LossVector::from_values(v.to_vec())
    }

    #[test]
    fn satisfied_margin_is_zero() {
        let r = margin_ranking_loss(
            &lv(&[0.0, 1.0, 2.0]),
            &lv(&[1.0, 2.0, 3.0]),
            &RankingConfig::default(),
            0,
        )
        .unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_prediction_pays_the_margin() {
        let r = margin_ranking_loss(&lv(&[0.5; 4]), &lv(&[1.0, 2.0, 3.0, 4.0]), &RankingConfig::default(), 0).unwrap();
        assert!((r.value - 0.1).abs() < 1e-15);
        assert_eq!(r.pairs, 12);
    }

    #[test]
    fn too_few_patches() {
        assert!(matches!(
            margin_ranking_loss(&lv(&[1.0]), &lv(&[1.0]), &RankingConfig::default(), 0),
            Err(Error::InsufficientPatches(1))
        ));
        let bad = RankingConfig {
            margin: 0.0,
            ..Default::default()
        };
        assert!(margin_ranking_loss(&lv(&[1.0, 2.0]), &lv(&[1.0, 2.0]), &bad, 0).is_err());
    }

    #[test]
    fn sampled_pairs_are_seeded() {
        let cfg = RankingConfig {
            pair_strategy: PairStrategy::Sampled,
            pairs_per_image: Some(40),
            seed: 3,
            ..Default::default()
        };
        let p: Vec<f64> = (0..10).map(|i| ((i * 7) % 5) as f64).collect();
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let a = margin_ranking_loss(&lv(&p), &lv(&t), &cfg, 9).unwrap();
        let b = margin_ranking_loss(&lv(&p), &lv(&t), &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pairs, 40);
    }
}
