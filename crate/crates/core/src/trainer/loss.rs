//! Pixel-level contrastive loss over positive pairs with a negatives-only
//! denominator, and its trajectory/mask weighted combination.
//!
//! For unit features `F`, positives `P` (|P| = n) and negatives `N`:
//!
//! ```text
//! L = -1/(n(n-1)) * sum_{i != j in P} log( exp(F_i.F_j / tau) / sum_{k in N} exp(F_i.F_k / tau) )
//! ```
//!
//! The loss may be negative. Reductions run in f64 and the log-sum-exp is
//! max-shifted.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrvError};
use crate::features::FeatureMap;
use crate::sampling::{SampleCounts, SampleSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub omega_mask: f64,
    pub n_pos_traj: usize,
    pub n_neg_traj: usize,
    pub n_pos_mask: usize,
    pub n_neg_mask: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            omega_mask: 0.05,
            n_pos_traj: SampleCounts::TRAJECTORY.n_pos,
            n_neg_traj: SampleCounts::TRAJECTORY.n_neg,
            n_pos_mask: SampleCounts::MASK.n_pos,
            n_neg_mask: SampleCounts::MASK.n_neg,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(TrvError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.omega_mask) {
            return Err(TrvError::Config(format!(
                "omega_mask must be in [0, 1], got {}",
                self.omega_mask
            )));
        }
        Ok(())
    }

    pub fn traj_counts(&self) -> SampleCounts {
        SampleCounts {
            n_pos: self.n_pos_traj,
            n_neg: self.n_neg_traj,
        }
    }

    pub fn mask_counts(&self) -> SampleCounts {
        SampleCounts {
            n_pos: self.n_pos_mask,
            n_neg: self.n_neg_mask,
        }
    }
}

/// Max-shifted log-sum-exp. Empty input gives negative infinity.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(exp(pair) / sum_k exp(negatives_k))`, stabilized.
pub fn pair_log_ratio(pair_logit: f64, negative_logits: &[f64]) -> f64 {
    pair_logit - log_sum_exp(negative_logits)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Gradient with respect to each positive feature, in input order.
    pub grad_pos: Vec<Vec<f64>>,
    /// Gradient with respect to each negative feature, in input order.
    pub grad_neg: Vec<Vec<f64>>,
}

/// Contrastive loss and its analytic gradient.
pub fn contrastive_loss(positives: &[&[f64]], negatives: &[&[f64]], tau: f64) -> Result<ContrastiveOutput> {
    let n = positives.len();
    if n < 2 {
        return Err(TrvError::InsufficientPositives(n));
    }
    if negatives.is_empty() {
        return Err(TrvError::EmptyRegion(
            "contrastive loss needs at least one negative".into(),
        ));
    }
    if !(tau > 0.0) {
        return Err(TrvError::Config(format!("tau must be positive, got {tau}")));
    }
    let d = positives[0].len();
    if let Some(bad) = positives.iter().chain(negatives).find(|f| f.len() != d) {
        return Err(TrvError::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    let nf = n as f64;
    let mut sum = vec![0.0; d];
    for f in positives {
        sum.iter_mut().zip(*f).for_each(|(s, v)| *s += v);
    }
    let pair_scale = 1.0 / (nf * (nf - 1.0));
    let mut pair_total = 0.0;
    let mut lse_total = 0.0;
    let mut grad_pos = Vec::with_capacity(n);
    let mut grad_neg = vec![vec![0.0; d]; negatives.len()];
    let mut logits = vec![0.0; negatives.len()];
    for fi in positives {
        let others: Vec<f64> = sum.iter().zip(*fi).map(|(s, v)| s - v).collect();
        pair_total += dot(fi, &others) / tau;
        for (l, fk) in logits.iter_mut().zip(negatives) {
            *l = dot(fi, fk) / tau;
        }
        let lse = log_sum_exp(&logits);
        lse_total += lse;
        // d/dF_i: pair term, then the softmax-weighted negatives
        let mut g: Vec<f64> = others.iter().map(|o| -2.0 * pair_scale * o / tau).collect();
        for (k, fk) in negatives.iter().enumerate() {
            let w = (logits[k] - lse).exp() / (nf * tau);
            g.iter_mut().zip(*fk).for_each(|(gv, v)| *gv += w * v);
            grad_neg[k].iter_mut().zip(*fi).for_each(|(gv, v)| *gv += w * v);
        }
        grad_pos.push(g);
    }
    let loss = -pair_scale * (pair_total - (nf - 1.0) * lse_total);
    if !loss.is_finite() {
        return Err(TrvError::Numeric(format!("contrastive loss is {loss}")));
    }
    Ok(ContrastiveOutput {
        loss,
        grad_pos,
        grad_neg,
    })
}

/// Contrastive loss on a decoded feature map with pixel samples mapped to
/// cells by the map's stride.
pub fn contrastive_loss_on_map(map: &FeatureMap, samples: &SampleSet, tau: f64) -> Result<ContrastiveOutput> {
    let fetch =
        |px: &[(usize, usize)]| -> Vec<Vec<f64>> { px.iter().map(|&p| map.cell_f64(map.cell_of_pixel(p))).collect() };
    let pos = fetch(&samples.positives);
    let neg = fetch(&samples.negatives);
    let pr: Vec<&[f64]> = pos.iter().map(Vec::as_slice).collect();
    let nr: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
    contrastive_loss(&pr, &nr, tau)
}

/// Sample indices into a shared table of feature rows.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CellSamples {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLoss {
    pub loss_traj: f64,
    pub loss_mask: Option<f64>,
    pub total: f64,
    /// Gradient of `total` with respect to each feature row.
    pub grads: Vec<Vec<f64>>,
}

/// `(1 - w) * L(traj) + w * L(mask)`; without a mask the frame uses `L(traj)` alone.
pub fn combined_loss(
    rows: &[Vec<f64>],
    traj: &CellSamples,
    mask: Option<&CellSamples>,
    cfg: &LossConfig,
) -> Result<FrameLoss> {
    cfg.validate()?;
    let d = rows.first().map(Vec::len).unwrap_or(0);
    let mut grads = vec![vec![0.0; d]; rows.len()];
    let run = |s: &CellSamples, weight: f64, grads: &mut Vec<Vec<f64>>| -> Result<f64> {
        let pos: Vec<&[f64]> = s.positives.iter().map(|&i| rows[i].as_slice()).collect();
        let neg: Vec<&[f64]> = s.negatives.iter().map(|&i| rows[i].as_slice()).collect();
        let out = contrastive_loss(&pos, &neg, cfg.tau)?;
        if weight != 0.0 {
            for (&i, g) in s.positives.iter().zip(&out.grad_pos) {
                grads[i].iter_mut().zip(g).for_each(|(a, b)| *a += weight * b);
            }
            for (&i, g) in s.negatives.iter().zip(&out.grad_neg) {
                grads[i].iter_mut().zip(g).for_each(|(a, b)| *a += weight * b);
            }
        }
        Ok(out.loss)
    };
    let omega = if mask.is_some() { cfg.omega_mask } else { 0.0 };
    let loss_traj = run(traj, 1.0 - omega, &mut grads)?;
    let loss_mask = match mask {
        Some(m) => Some(run(m, omega, &mut grads)?),
        None => None,
    };
    let total = (1.0 - omega) * loss_traj + omega * loss_mask.unwrap_or(0.0);
    Ok(FrameLoss {
        loss_traj,
        loss_mask,
        total,
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct transcription of the double sum, no stabilization.
    pub(crate) fn naive_loss(pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
        let n = pos.len() as f64;
        let mut acc = 0.0;
        for i in 0..pos.len() {
            for j in 0..pos.len() {
                if i == j {
                    continue;
                }
                let num = (dot(&pos[i], &pos[j]) / tau).exp();
                let den: f64 = neg.iter().map(|k| (dot(&pos[i], k) / tau).exp()).sum();
                acc += (num / den).ln();
            }
        }
        -acc / (n * (n - 1.0))
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn hand_computed_cases() {
        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let out = contrastive_loss(&[&e1, &e1], &[&e2], 1.0).unwrap();
        assert_eq!(out.loss, -1.0);
        let out = contrastive_loss(&[&e1, &e2], &[&e1], 1.0).unwrap();
        assert_eq!(out.loss, 0.5);
    }

    #[test]
    fn insufficient_positives() {
        let e1 = [1.0, 0.0];
        assert!(matches!(
            contrastive_loss(&[&e1], &[&e1], 1.0),
            Err(TrvError::InsufficientPositives(1))
        ));
        assert!(contrastive_loss(&[&e1, &e1], &[], 1.0).is_err());
    }

    #[test]
    fn matches_naive_double_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let d = rng.random_range(1..=8);
            let pos: Vec<_> = (0..rng.random_range(2..=16)).map(|_| unit(&mut rng, d)).collect();
            let neg: Vec<_> = (0..rng.random_range(1..=64)).map(|_| unit(&mut rng, d)).collect();
            let tau = rng.random_range(0.05..2.0);
            let got = contrastive_loss(&refs(&pos), &refs(&neg), tau).unwrap().loss;
            assert!((got - naive_loss(&pos, &neg, tau)).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 8;
        let pos: Vec<_> = (0..5).map(|_| unit(&mut rng, d)).collect();
        let neg: Vec<_> = (0..7).map(|_| unit(&mut rng, d)).collect();
        let tau = 0.3;
        let out = contrastive_loss(&refs(&pos), &refs(&neg), tau).unwrap();
        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-8);
            assert!(rel < 1e-4, "fd {fd} vs analytic {analytic}");
        };
        for i in 0..pos.len() {
            for k in 0..d {
                let (mut p, mut m) = (pos.clone(), pos.clone());
                p[i][k] += h;
                m[i][k] -= h;
                check(out.grad_pos[i][k], naive_loss(&p, &neg, tau), naive_loss(&m, &neg, tau));
            }
        }
        for j in 0..neg.len() {
            for k in 0..d {
                let (mut p, mut m) = (neg.clone(), neg.clone());
                p[j][k] += h;
                m[j][k] -= h;
                check(out.grad_neg[j][k], naive_loss(&pos, &p, tau), naive_loss(&pos, &m, tau));
            }
        }
    }

    #[test]
    fn log_ratio_shift_invariant_and_stable() {
        let negs = [0.3, -1.2, 2.5, 0.0];
        let base = pair_log_ratio(1.1, &negs);
        for c in [-700.0, -3.0, 0.0, 5.0, 1000.0] {
            let shifted: Vec<f64> = negs.iter().map(|v| v + c).collect();
            let got = pair_log_ratio(1.1 + c, &shifted);
            assert!(got.is_finite());
            assert!((got - base).abs() < 1e-9, "shift {c}: {got} vs {base}");
        }
        let naive = (1.1f64.exp() / negs.iter().map(|v| v.exp()).sum::<f64>()).ln();
        assert!((base - naive).abs() < 1e-12);
    }

    fn rows_and_samples(seed: u64) -> (Vec<Vec<f64>>, CellSamples, CellSamples) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<_> = (0..30).map(|_| unit(&mut rng, 6)).collect();
        let traj = CellSamples {
            positives: (0..6).collect(),
            negatives: (10..25).collect(),
        };
        let mask = CellSamples {
            positives: (0..10).collect(),
            negatives: (12..30).collect(),
        };
        (rows, traj, mask)
    }

    #[test]
    fn omega_endpoints_and_linearity() {
        let (rows, traj, mask) = rows_and_samples(3);
        let cfg = |w| LossConfig {
            tau: 0.05,
            omega_mask: w,
            ..LossConfig::default()
        };
        let a = combined_loss(&rows, &traj, Some(&mask), &cfg(0.0)).unwrap();
        assert_eq!(a.total, a.loss_traj);
        let b = combined_loss(&rows, &traj, Some(&mask), &cfg(1.0)).unwrap();
        assert_eq!(b.total, b.loss_mask.unwrap());
        let c = combined_loss(&rows, &traj, Some(&mask), &cfg(0.05)).unwrap();
        assert!((c.total - (0.95 * c.loss_traj + 0.05 * c.loss_mask.unwrap())).abs() < 1e-12);
        let none = combined_loss(&rows, &traj, None, &cfg(0.05)).unwrap();
        assert_eq!(none.total, none.loss_traj);
        assert_eq!(none.loss_mask, None);
    }

    #[test]
    fn loss_on_map_uses_stride() {
        let map = FeatureMap::new(2, 2, 2, 4, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let s = SampleSet {
            positives: vec![(0, 0), (3, 7)],
            negatives: vec![(5, 1)],
            source: crate::sampling::SampleSource::Trajectory,
        };
        assert_eq!(contrastive_loss_on_map(&map, &s, 1.0).unwrap().loss, -1.0);
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..1000, rot_p in 0usize..6, rot_n in 0usize..15) {
            let (rows, traj, _) = rows_and_samples(seed);
            let cfg = LossConfig::default();
            let a = combined_loss(&rows, &traj, None, &cfg).unwrap().total;
            let mut t2 = traj.clone();
            t2.positives.rotate_left(rot_p);
            t2.negatives.rotate_left(rot_n);
            t2.negatives.reverse();
            let b = combined_loss(&rows, &t2, None, &cfg).unwrap().total;
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }
}
