//! Diagonal Gaussian class priors over the u-space embedding.
//!
//! One prior per positive source class. Variances are unbiased sample
//! variances floored at [`VAR_FLOOR`] so log-densities and sampling stay
//! well conditioned when a class collapses.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::label_space::ClassId;

/// Variance floor applied per dimension.
pub const VAR_FLOOR: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and per-dimension variance of one positive class at u-space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrior {
    pub class_id: ClassId,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

impl ClassPrior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Log-density of the diagonal Gaussian at `u`.
    pub fn log_density(&self, u: &ArrayView1<f64>) -> f64 {
        assert_eq!(u.len(), self.dim());
        let mut acc = 0.0;
        for ((&x, &m), &v) in u.iter().zip(self.mean.iter()).zip(self.var.iter()) {
            let d = x - m;
            acc += LN_2PI + v.ln() + d * d / v;
        }
        -0.5 * acc
    }

    /// Mahalanobis distance of `u` from the prior mean.
    pub fn mahalanobis(&self, u: &ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for ((&x, &m), &v) in u.iter().zip(self.mean.iter()).zip(self.var.iter()) {
            let d = x - m;
            acc += d * d / v;
        }
        acc.sqrt()
    }

    /// `n` i.i.d. draws, one per row.
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let dim = self.dim();
        let std: Array1<f64> = self.var.mapv(f64::sqrt);
        let mut out = Array2::zeros((n, dim));
        for mut row in out.rows_mut() {
            for d in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                row[d] = self.mean[d] + std[d] * z;
            }
        }
        out
    }
}

/// Sample mean and floored unbiased variance per class. Every class needs
/// at least two samples.
pub fn compute_class_priors(
    features_by_class: &BTreeMap<ClassId, Array2<f64>>,
) -> Result<Vec<ClassPrior>> {
    let mut priors = Vec::with_capacity(features_by_class.len());
    for (&class_id, features) in features_by_class {
        let n = features.nrows();
        if n < 2 {
            return Err(Error::PriorEstimation(format!(
                "class {class_id} has {n} feature vector(s); need at least 2"
            )));
        }
        let mean = features.mean_axis(Axis(0)).expect("non-empty");
        let mut var = Array1::<f64>::zeros(features.ncols());
        for row in features.rows() {
            for (d, (&x, &m)) in row.iter().zip(mean.iter()).enumerate() {
                let diff = x - m;
                var[d] += diff * diff;
            }
        }
        var.mapv_inplace(|s| (s / (n as f64 - 1.0)).max(VAR_FLOOR));
        priors.push(ClassPrior {
            class_id,
            mean,
            var,
        });
    }
    Ok(priors)
}

/// Log-densities of every row of `u` under every prior: `(rows, priors)`.
pub fn log_density_matrix(priors: &[ClassPrior], u: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((u.nrows(), priors.len()));
    for (r, row) in u.rows().into_iter().enumerate() {
        for (c, prior) in priors.iter().enumerate() {
            out[(r, c)] = prior.log_density(&row);
        }
    }
    out
}

/// Rejection-samples u vectors at Mahalanobis distance >= `min_sigma`
/// from every prior. Proposals come from the priors themselves with the
/// spread widened by `spread`.
pub fn sample_far_from_priors<R: Rng>(
    priors: &[ClassPrior],
    n: usize,
    min_sigma: f64,
    spread: f64,
    rng: &mut R,
) -> Result<Array2<f64>> {
    assert!(!priors.is_empty());
    let dim = priors[0].dim();
    let mut out = Array2::zeros((n, dim));
    let max_attempts = 10_000 * n.max(1);
    let mut attempts = 0;
    let mut accepted = 0;
    while accepted < n {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::PriorEstimation(format!(
                "could not find {n} feature vectors at {min_sigma}-sigma from all priors"
            )));
        }
        let pick = rng.gen_range(0..priors.len());
        let prior = &priors[pick];
        let mut candidate = Array1::zeros(dim);
        for d in 0..dim {
            let z: f64 = StandardNormal.sample(rng);
            candidate[d] = prior.mean[d] + spread * prior.var[d].sqrt() * z;
        }
        if priors
            .iter()
            .all(|p| p.mahalanobis(&candidate.view()) >= min_sigma)
        {
            out.row_mut(accepted).assign(&candidate);
            accepted += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_point_statistics() {
        let mut by_class = BTreeMap::new();
        by_class.insert(0, array![[0.0, 0.0], [2.0, 2.0]]);
        let priors = compute_class_priors(&by_class).unwrap();
        assert_eq!(priors[0].mean, array![1.0, 1.0]);
        assert_eq!(priors[0].var, array![2.0, 2.0]);
    }

    #[test]
    fn identical_features_hit_the_floor() {
        let mut by_class = BTreeMap::new();
        by_class.insert(3, array![[0.5, -1.0], [0.5, -1.0], [0.5, -1.0]]);
        let priors = compute_class_priors(&by_class).unwrap();
        assert_eq!(priors[0].class_id, 3);
        assert_eq!(priors[0].var, array![VAR_FLOOR, VAR_FLOOR]);
    }

    #[test]
    fn undersized_class_is_reported() {
        let mut by_class = BTreeMap::new();
        by_class.insert(7, array![[1.0, 2.0]]);
        let err = compute_class_priors(&by_class).unwrap_err();
        match err {
            Error::PriorEstimation(msg) => assert!(msg.contains('7'), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn monte_carlo_recovery_within_three_standard_errors() {
        // Draw from a known diagonal Gaussian and recover its parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = ClassPrior {
            class_id: 0,
            mean: array![1.0, -2.0, 0.25],
            var: array![0.5, 2.0, 1.0],
        };
        let n = 1000;
        let draws = truth.sample(n, &mut rng);
        let mut by_class = BTreeMap::new();
        by_class.insert(0, draws);
        let recovered = &compute_class_priors(&by_class).unwrap()[0];
        for d in 0..3 {
            let se_mean = (truth.var[d] / n as f64).sqrt();
            assert!(
                (recovered.mean[d] - truth.mean[d]).abs() < 3.0 * se_mean,
                "mean dim {d}"
            );
            // SE of the sample variance of a Gaussian is var * sqrt(2 / (n - 1)).
            let se_var = truth.var[d] * (2.0 / (n as f64 - 1.0)).sqrt();
            assert!(
                (recovered.var[d] - truth.var[d]).abs() < 3.0 * se_var,
                "var dim {d}"
            );
        }
    }

    #[test]
    fn floored_prior_concentrates_at_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let prior = ClassPrior {
            class_id: 0,
            mean: array![2.0, -3.0],
            var: array![VAR_FLOOR, VAR_FLOOR],
        };
        let draws = prior.sample(200, &mut rng);
        for row in draws.rows() {
            for (d, &x) in row.iter().enumerate() {
                assert!((x - prior.mean[d]).abs() < 5.0 * VAR_FLOOR.sqrt());
            }
        }
    }

    #[test]
    fn sample_mean_obeys_law_of_large_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let prior = ClassPrior {
            class_id: 0,
            mean: array![0.5, -0.5],
            var: array![1.0, 4.0],
        };
        let n = 10_000;
        let draws = prior.sample(n, &mut rng);
        let mean = draws.mean_axis(Axis(0)).unwrap();
        for d in 0..2 {
            let bound = 4.0 * prior.var[d].sqrt() / (n as f64).sqrt();
            assert!((mean[d] - prior.mean[d]).abs() < bound, "dim {d}");
        }
    }

    #[test]
    fn sampling_is_deterministic_for_a_seed() {
        let prior = ClassPrior {
            class_id: 0,
            mean: array![0.0, 1.0],
            var: array![1.0, 0.25],
        };
        let a = prior.sample(8, &mut ChaCha8Rng::seed_from_u64(99));
        let b = prior.sample(8, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(a, b);
    }

    #[test]
    fn log_density_matches_direct_formula() {
        let prior = ClassPrior {
            class_id: 0,
            mean: array![0.0],
            var: array![2.0],
        };
        let x = array![1.5];
        let expected = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 1.5 * 1.5 / 2.0);
        assert!((prior.log_density(&x.view()) - expected).abs() < 1e-12);
    }

    #[test]
    fn far_samples_respect_the_sigma_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let priors = vec![
            ClassPrior {
                class_id: 0,
                mean: array![0.0, 0.0],
                var: array![1.0, 1.0],
            },
            ClassPrior {
                class_id: 1,
                mean: array![4.0, 4.0],
                var: array![1.0, 1.0],
            },
        ];
        let samples = sample_far_from_priors(&priors, 32, 3.0, 3.0, &mut rng).unwrap();
        for row in samples.rows() {
            for p in &priors {
                assert!(p.mahalanobis(&row) >= 3.0);
            }
        }
    }
}
