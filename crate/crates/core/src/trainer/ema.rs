//! Running traversability vector.

use serde::{Deserialize, Serialize};

fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-12 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Unit vector tracking the mean decoded feature of driven pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversabilityVector {
    pub z: Vec<f64>,
    pub alpha: f64,
    pub initialized: bool,
}

impl TraversabilityVector {
    pub fn new(dim: usize, alpha: f64) -> Self {
        Self {
            z: vec![0.0; dim],
            alpha,
            initialized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    /// Blend in the mean of `positives` (each normalized first).
    ///
    /// The first call with usable input sets `z` to the normalized mean.
    /// Empty or degenerate input leaves the vector unchanged; returns whether it changed.
    pub fn update(&mut self, positives: &[&[f64]]) -> bool {
        if positives.is_empty() {
            return false;
        }
        let mut mean = vec![0.0; self.z.len()];
        for p in positives {
            if let Some(u) = normalized(p) {
                mean.iter_mut().zip(&u).for_each(|(m, v)| *m += v);
            }
        }
        let Some(mean) = normalized(&mean) else {
            return false;
        };
        if !self.initialized {
            self.z = mean;
            self.initialized = true;
            return true;
        }
        let z = normalized(&self.z).unwrap_or_else(|| mean.clone());
        let blended: Vec<f64> = z
            .iter()
            .zip(&mean)
            .map(|(a, b)| self.alpha * a + (1.0 - self.alpha) * b)
            .collect();
        // antipodal blend at alpha = 0.5 has no direction; keep the old vector
        match normalized(&blended) {
            Some(v) => {
                self.z = v;
                true
            }
            None => false,
        }
    }
}

/// Functional form of [`TraversabilityVector::update`].
pub fn ema_update(vec: &TraversabilityVector, positives: &[&[f64]]) -> TraversabilityVector {
    let mut out = vec.clone();
    out.update(positives);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_update_initializes() {
        let v = TraversabilityVector::new(2, 0.999);
        let out = ema_update(&v, &[&[2.0, 0.0], &[0.0, 3.0]]);
        assert!(out.initialized);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out.z[0] - s).abs() < 1e-15 && (out.z[1] - s).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_and_half_blend() {
        let mut v = TraversabilityVector {
            z: vec![1.0, 0.0],
            alpha: 0.5,
            initialized: true,
        };
        assert!(v.update(&[&[5.0, 0.0]]));
        assert_eq!(v.z, vec![1.0, 0.0]);
        v.update(&[&[0.0, 1.0]]);
        let s = 2f64.sqrt() / 2.0;
        assert!((v.z[0] - s).abs() < 1e-15 && (v.z[1] - s).abs() < 1e-15);
    }

    #[test]
    fn empty_positives_leave_vector_unchanged() {
        let v = TraversabilityVector {
            z: vec![0.6, 0.8],
            alpha: 0.9,
            initialized: true,
        };
        assert_eq!(ema_update(&v, &[]), v);
        let u = TraversabilityVector::new(3, 0.9);
        assert_eq!(ema_update(&u, &[]), u);
    }

    #[test]
    fn slow_drift_with_high_momentum() {
        let mut v = TraversabilityVector {
            z: vec![1.0, 0.0],
            alpha: 0.999,
            initialized: true,
        };
        for _ in 0..1000 {
            v.update(&[&[0.0, 1.0]]);
        }
        // 1000 steps at 0.1% each: angle grows but stays well short of 90 degrees
        let angle = v.z[1].atan2(v.z[0]).to_degrees();
        assert!(angle > 30.0 && angle < 60.0, "{angle}");
    }

    proptest! {
        #[test]
        fn stays_unit_norm(updates in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..40),
                           alpha in 0.0f64..1.0) {
            let mut v = TraversabilityVector::new(4, alpha);
            for u in &updates {
                v.update(&[u.as_slice()]);
                if v.initialized {
                    let n = v.z.iter().map(|x| x * x).sum::<f64>().sqrt();
                    prop_assert!((n - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
