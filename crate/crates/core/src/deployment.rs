//! Source-free adaptation of the target feature extractor.
//!
//! Every batch is weighted per sample by the source similarity metric
//! computed through the frozen source path; gradients flow through the
//! frozen classifier into the target extractor, which is the only
//! component that updates.

use ndarray::{Array1, Array2, Array3, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DeploymentModel;
use crate::nn::{softmax_rows, softmax_vec, Adam, MlpGrad};
use crate::procurement::TraceRow;

/// Group-sum floor applied before the logarithms of the adaptation loss.
pub const GROUP_SUM_CLAMP: f64 = 1e-12;

/// Per-sample affinity weights, both in `[1, e]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsmWeight {
    pub w: f64,
    pub w_prime: f64,
}

/// Source similarity metric from the frozen-path class probabilities:
/// `w = max_i exp(y_i)` and `w' = max_i exp(1 - y_i)` over the positive
/// classes only.
pub fn compute_ssm(y_hat: &ArrayView1<f64>, num_positive: usize) -> Result<SsmWeight> {
    if num_positive == 0 || num_positive > y_hat.len() {
        return Err(Error::InvalidInput(format!(
            "num_positive {num_positive} incompatible with a {}-class probability vector",
            y_hat.len()
        )));
    }
    let mut max_p = f64::NEG_INFINITY;
    let mut min_p = f64::INFINITY;
    for &p in y_hat.iter().take(num_positive) {
        if !(-1e-9..=1.0 + 1e-9).contains(&p) {
            return Err(Error::InvalidInput(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        max_p = max_p.max(p);
        min_p = min_p.min(p);
    }
    Ok(SsmWeight {
        w: max_p.clamp(0.0, 1.0).exp(),
        w_prime: (1.0 - min_p.clamp(0.0, 1.0)).exp(),
    })
}

/// SSM for every row of a probability matrix.
pub fn compute_ssm_batch(probs: &Array2<f64>, num_positive: usize) -> Result<Vec<SsmWeight>> {
    probs
        .rows()
        .into_iter()
        .map(|row| compute_ssm(&row, num_positive))
        .collect()
}

/// Two softmaxes over disjoint logit segments: positive classes first,
/// negative classes after.
pub fn split_softmax(h: &ArrayView1<f64>, num_positive: usize) -> (Array1<f64>, Array1<f64>) {
    assert!(num_positive < h.len(), "need at least one negative logit");
    let pos = softmax_vec(&h.slice(ndarray::s![..num_positive]));
    let neg = softmax_vec(&h.slice(ndarray::s![num_positive..]));
    (pos, neg)
}

/// Group alignment term of the adaptation loss for one sample.
pub fn loss_d1(z_hat: &ArrayView1<f64>, ssm: &SsmWeight, num_positive: usize) -> f64 {
    let pos_sum: f64 = z_hat.iter().take(num_positive).sum();
    let neg_sum: f64 = z_hat.iter().skip(num_positive).sum();
    ssm.w * -(pos_sum.max(GROUP_SUM_CLAMP).ln()) + ssm.w_prime * -(neg_sum.max(GROUP_SUM_CLAMP).ln())
}

fn entropy(p: &ArrayView1<f64>) -> f64 {
    // 0 * ln 0 = 0 by convention.
    -p.iter()
        .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
        .sum::<f64>()
}

/// Weighted entropy term of the adaptation loss for one sample.
pub fn loss_d2(z_tilde_s: &ArrayView1<f64>, z_tilde_n: &ArrayView1<f64>, ssm: &SsmWeight) -> f64 {
    ssm.w * entropy(z_tilde_s) + ssm.w_prime * entropy(z_tilde_n)
}

/// Deployment-stage hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Entropy-term weight.
    pub beta: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 1e-4,
            beta: 0.1,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "beta must be non-negative, got {}",
                self.beta
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

pub struct AdaptationLossGrads {
    pub d1: f64,
    pub d2: f64,
    pub total: f64,
    pub target_extractor: MlpGrad,
}

/// `L_d = L_d1 + beta * L_d2` (batch means) with gradients for the
/// target extractor only.
pub fn adaptation_loss(
    deploy: &DeploymentModel,
    v: &Array2<f64>,
    ssm: &[SsmWeight],
    beta: f64,
) -> AdaptationLossGrads {
    assert_eq!(v.nrows(), ssm.len());
    let p = deploy.num_positive();
    let ft_cache = deploy.target_extractor.forward_cached(v);
    let head_cache = deploy.frozen.classifier.forward_cached(ft_cache.output());
    let h = head_cache.output();
    let k = h.ncols();
    let z = softmax_rows(h);
    let batch = v.nrows() as f64;

    let mut d1 = 0.0;
    let mut d2 = 0.0;
    let mut dh = Array2::zeros(h.raw_dim());
    for (b, z_row) in z.rows().into_iter().enumerate() {
        let weights = &ssm[b];
        let pos_sum: f64 = z_row.iter().take(p).sum();
        let neg_sum: f64 = z_row.iter().skip(p).sum();
        d1 += (weights.w * -(pos_sum.max(GROUP_SUM_CLAMP).ln())
            + weights.w_prime * -(neg_sum.max(GROUP_SUM_CLAMP).ln()))
            / batch;

        // dL_d1 / dz_k, zero through a clamped group.
        let dpos = if pos_sum > GROUP_SUM_CLAMP {
            -weights.w / pos_sum
        } else {
            0.0
        };
        let dneg = if neg_sum > GROUP_SUM_CLAMP {
            -weights.w_prime / neg_sum
        } else {
            0.0
        };
        let mut dz = Array1::zeros(k);
        for i in 0..k {
            dz[i] = if i < p { dpos } else { dneg } / batch;
        }
        // Softmax jacobian: dh = z * (dz - <dz, z>).
        let dot: f64 = dz
            .iter()
            .zip(z_row.iter())
            .map(|(&a, &b_)| a * b_)
            .sum();
        for i in 0..k {
            dh[(b, i)] += z_row[i] * (dz[i] - dot);
        }

        // Entropy term over the two split softmaxes.
        let h_row = h.row(b);
        let (zs, zn) = split_softmax(&h_row, p);
        let hs = entropy(&zs.view());
        let hn = entropy(&zn.view());
        d2 += (weights.w * hs + weights.w_prime * hn) / batch;
        let scale = beta / batch;
        for i in 0..p {
            if zs[i] > 0.0 {
                dh[(b, i)] += scale * weights.w * (-zs[i] * (zs[i].ln() + hs));
            }
        }
        for i in 0..k - p {
            if zn[i] > 0.0 {
                dh[(b, p + i)] += scale * weights.w_prime * (-zn[i] * (zn[i].ln() + hn));
            }
        }
    }

    let (_, du) = deploy.frozen.classifier.backward(&head_cache, &dh);
    let (ft_grad, _) = deploy.target_extractor.backward(&ft_cache, &du);
    AdaptationLossGrads {
        d1,
        d2,
        total: d1 + beta * d2,
        target_extractor: ft_grad,
    }
}

/// Checksums of the frozen components before and after adaptation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenAudit {
    pub before: [[u8; 32]; 4],
    pub after: [[u8; 32]; 4],
}

impl FrozenAudit {
    pub fn ok(&self) -> bool {
        self.before == self.after
    }
}

pub struct AdaptationOutcome {
    pub model: DeploymentModel,
    pub trace: Vec<TraceRow>,
    pub frozen_audit: FrozenAudit,
}

/// Adapts the target extractor on unlabeled target images. The input
/// carries pixels only; no label information exists on this path.
pub fn run_adaptation(
    mut deploy: DeploymentModel,
    target_images: &[Array3<f64>],
    config: &AdaptationConfig,
) -> Result<AdaptationOutcome> {
    config.validate()?;
    if target_images.is_empty() {
        return Err(Error::InvalidInput("no target samples".into()));
    }
    let before = deploy.frozen.frozen_checksums();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let stacked = crate::procurement::stack_images(target_images);
    let v_all = deploy.frozen.backbone.forward_images(&stacked);
    let n = v_all.nrows();

    let mut adam = Adam::new(
        deploy.target_extractor.param_count(),
        config.learning_rate,
    );
    let mut trace = Vec::with_capacity(config.iterations * 3);
    for step in 0..config.iterations {
        let idx = rand::seq::index::sample(&mut rng, n, config.batch_size.min(n)).into_vec();
        let vb = v_all.select(Axis(0), &idx);
        // Weights come from the frozen source path, fresh every batch.
        let source_probs = deploy.frozen.probs_from_v(&vb);
        let ssm = compute_ssm_batch(&source_probs, deploy.num_positive())?;
        let losses = adaptation_loss(&deploy, &vb, &ssm, config.beta);
        if !losses.total.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                loss: "l_d".into(),
            });
        }
        let mut params = deploy.target_extractor.flat_params();
        adam.step(&mut params, &losses.target_extractor.flat());
        deploy.target_extractor.set_flat_params(&params);
        trace.push(TraceRow {
            step,
            loss_name: "l_d1".into(),
            value: losses.d1,
        });
        trace.push(TraceRow {
            step,
            loss_name: "l_d2".into(),
            value: losses.d2,
        });
        trace.push(TraceRow {
            step,
            loss_name: "l_d".into(),
            value: losses.total,
        });
    }
    let after = deploy.frozen.frozen_checksums();
    Ok(AdaptationOutcome {
        model: deploy,
        trace,
        frozen_audit: FrozenAudit { before, after },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActSpec, ArchSpec, BackboneSpec, ProcurementModel};
    use crate::nn::{gradient_relative_error, numeric_gradient};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    const E: f64 = std::f64::consts::E;

    #[test]
    fn ssm_extreme_negative_affinity() {
        // All probability mass on a negative class.
        let y = array![0.0, 0.0, 1.0];
        let ssm = compute_ssm(&y.view(), 2).unwrap();
        assert!((ssm.w - 1.0).abs() < 1e-12);
        assert!((ssm.w_prime - E).abs() < 1e-12);
    }

    #[test]
    fn ssm_uniform_case() {
        let y = Array1::from_elem(10, 0.1);
        let ssm = compute_ssm(&y.view(), 4).unwrap();
        assert!((ssm.w - 0.1f64.exp()).abs() < 1e-12);
        assert!((ssm.w - 1.10517).abs() < 1e-5);
        assert!((ssm.w_prime - 0.9f64.exp()).abs() < 1e-12);
        assert!((ssm.w_prime - 2.45960).abs() < 1e-5);
    }

    #[test]
    fn ssm_direct_evaluation() {
        let y = array![0.6, 0.3, 0.05, 0.05];
        let ssm = compute_ssm(&y.view(), 2).unwrap();
        assert!((ssm.w - 1.82212).abs() < 1e-5);
        assert!((ssm.w_prime - 2.01375).abs() < 1e-5);
    }

    #[test]
    fn ssm_rejects_bad_probabilities() {
        let y = array![1.2, -0.2];
        assert!(matches!(
            compute_ssm(&y.view(), 2),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn d1_symmetric_case() {
        let z = array![0.25, 0.25, 0.25, 0.25];
        let ssm = SsmWeight { w: 1.0, w_prime: 1.0 };
        let value = loss_d1(&z.view(), &ssm, 2);
        assert!((value - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn d1_direct_evaluation() {
        let z = array![0.3, 0.3, 0.4];
        let ssm = SsmWeight { w: 1.5, w_prime: 1.0 };
        let value = loss_d1(&z.view(), &ssm, 2);
        let expected = 1.5 * -(0.6f64.ln()) + -(0.4f64.ln());
        assert!((value - expected).abs() < 1e-12);
        assert!((value - 1.68253).abs() < 1e-5);
    }

    #[test]
    fn d1_minimizer_drives_positive_mass_up() {
        // 1-D oracle: with z = (s, 1 - s) over the two groups, scan s and
        // find the minimizer of L_d1.
        let scan = |w: f64, w_prime: f64| {
            let mut best = (f64::INFINITY, 0.0);
            for i in 1..1000 {
                let s = i as f64 / 1000.0;
                let z = array![s, 1.0 - s];
                let v = loss_d1(&z.view(), &SsmWeight { w, w_prime }, 1);
                if v < best.0 {
                    best = (v, s);
                }
            }
            best.1
        };
        let s_heavy = scan(20.0, 1.0);
        assert!(s_heavy > 0.9, "large w should drive positive mass up, got {s_heavy}");
        // Analytic optimum of w*(-ln s) + w'*(-ln(1-s)) is s = w/(w+w').
        assert!((s_heavy - 20.0 / 21.0).abs() < 2e-3);
        let s_balanced = scan(1.0, 1.0);
        assert!((s_balanced - 0.5).abs() < 2e-3);
    }

    #[test]
    fn split_softmax_uniform_and_shift_invariance() {
        let h = Array1::from_elem(5, 0.7);
        let (zs, zn) = split_softmax(&h.view(), 2);
        assert!(zs.iter().all(|&p| (p - 0.5).abs() < 1e-12));
        assert!(zn.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
        let h1 = array![0.3, -1.0, 2.0, 0.0, 1.0];
        let h2 = h1.mapv(|x| x + 11.0);
        let (a_s, a_n) = split_softmax(&h1.view(), 2);
        let (b_s, b_n) = split_softmax(&h2.view(), 2);
        for (a, b) in a_s.iter().zip(b_s.iter()).chain(a_n.iter().zip(b_n.iter())) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn split_softmax_direct_evaluation() {
        let h = array![1.0, 2.0, 0.0, 0.0, 0.0];
        let (zs, _) = split_softmax(&h.view(), 2);
        assert!((zs[0] - 0.26894).abs() < 1e-5);
        assert!((zs[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn d2_maximum_entropy_case() {
        let zs = Array1::from_elem(4, 0.25);
        let zn = array![1.0, 0.0, 0.0];
        let ssm = SsmWeight { w: 1.0, w_prime: 1.0 };
        let value = loss_d2(&zs.view(), &zn.view(), &ssm);
        assert!((value - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn d2_zero_entropy_case() {
        let zs = array![0.0, 1.0];
        let zn = array![1.0, 0.0, 0.0];
        let ssm = SsmWeight { w: 3.0, w_prime: 2.0 };
        assert_eq!(loss_d2(&zs.view(), &zn.view(), &ssm), 0.0);
    }

    #[test]
    fn d2_direct_evaluation() {
        let zs = array![0.9, 0.1];
        let zn = array![1.0, 0.0];
        let ssm = SsmWeight { w: 2.0, w_prime: 1.0 };
        let value = loss_d2(&zs.view(), &zn.view(), &ssm);
        assert!((value - 0.65017).abs() < 1e-5);
    }

    fn tiny_deploy(rng: &mut ChaCha8Rng) -> DeploymentModel {
        let arch = ArchSpec {
            backbone: BackboneSpec::Identity { input: (1, 1, 4) },
            u_dim: 3,
            fs_hidden: vec![5],
            dec_hidden: vec![5],
            activation: ActSpec::Tanh,
        };
        let model = ProcurementModel::new(&arch, 2, 2, rng).unwrap();
        DeploymentModel::from_procurement(model, vec![])
    }

    #[test]
    fn adaptation_loss_matches_per_sample_operations() {
        // Two routes to the same number: the fused batch loss vs the
        // spec-level per-sample operations.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let deploy = tiny_deploy(&mut rng);
        let v = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let ssm: Vec<SsmWeight> = (0..5)
            .map(|_| SsmWeight {
                w: rng.gen_range(1.0..E),
                w_prime: rng.gen_range(1.0..E),
            })
            .collect();
        let beta = 0.1;
        let fused = adaptation_loss(&deploy, &v, &ssm, beta);
        let h = deploy.logits_from_v(&v);
        let z = softmax_rows(&h);
        let p = deploy.num_positive();
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for b in 0..5 {
            d1 += loss_d1(&z.row(b), &ssm[b], p) / 5.0;
            let (zs, zn) = split_softmax(&h.row(b), p);
            d2 += loss_d2(&zs.view(), &zn.view(), &ssm[b]) / 5.0;
        }
        assert!((fused.d1 - d1).abs() < 1e-12);
        assert!((fused.d2 - d2).abs() < 1e-12);
        assert!((fused.total - (d1 + beta * d2)).abs() < 1e-12);
    }

    #[test]
    fn adaptation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for trial in 0..5 {
            let mut deploy = tiny_deploy(&mut rng);
            let v = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
            let ssm: Vec<SsmWeight> = (0..3)
                .map(|_| SsmWeight {
                    w: rng.gen_range(1.0..E),
                    w_prime: rng.gen_range(1.0..E),
                })
                .collect();
            let beta = 0.1;
            let flat = deploy.target_extractor.flat_params();
            let analytic = adaptation_loss(&deploy, &v, &ssm, beta)
                .target_extractor
                .flat();
            let mut probe = deploy.clone();
            let numeric = numeric_gradient(
                move |p: &[f64]| {
                    probe.target_extractor.set_flat_params(p);
                    adaptation_loss(&probe, &v, &ssm, beta).total
                },
                &flat,
                1e-3,
            );
            let err = gradient_relative_error(&analytic, &numeric);
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
            deploy.target_extractor.set_flat_params(&flat);
        }
    }

    #[test]
    fn zero_iterations_leave_ft_equal_to_fs() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let deploy = tiny_deploy(&mut rng);
        let fs_flat = deploy.frozen.feature_extractor.flat_params();
        let targets: Vec<Array3<f64>> = (0..4)
            .map(|i| Array3::from_shape_fn((1, 1, 4), |_| i as f64 * 0.1))
            .collect();
        let config = AdaptationConfig {
            iterations: 0,
            ..AdaptationConfig::default()
        };
        let outcome = run_adaptation(deploy, &targets, &config).unwrap();
        assert_eq!(outcome.model.target_extractor.flat_params(), fs_flat);
        assert!(outcome.frozen_audit.ok());
    }

    #[test]
    fn frozen_components_never_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let deploy = tiny_deploy(&mut rng);
        let before = deploy.frozen.frozen_checksums();
        let targets: Vec<Array3<f64>> = (0..8)
            .map(|_| Array3::from_shape_fn((1, 1, 4), |_| rng.gen_range(0.0..1.0)))
            .collect();
        let config = AdaptationConfig {
            iterations: 25,
            batch_size: 4,
            learning_rate: 1e-3,
            ..AdaptationConfig::default()
        };
        let outcome = run_adaptation(deploy, &targets, &config).unwrap();
        assert!(outcome.frozen_audit.ok());
        assert_eq!(outcome.model.frozen.frozen_checksums(), before);
        // Ft did move.
        assert_ne!(
            crate::nn::param_checksum(&outcome.model.target_extractor.flat_params()),
            crate::nn::param_checksum(&outcome.model.frozen.feature_extractor.flat_params()),
        );
        assert_eq!(outcome.trace.len(), 25 * 3);
    }

    proptest! {
        #[test]
        fn ssm_bounds_hold(raw in proptest::collection::vec(0.0f64..1.0, 4..10), p in 1usize..4) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-6);
            let probs: Vec<f64> = raw.iter().map(|x| x / sum).collect();
            let y = Array1::from(probs);
            let p = p.min(y.len() - 1);
            let ssm = compute_ssm(&y.view(), p).unwrap();
            prop_assert!(ssm.w >= 1.0 - 1e-12 && ssm.w <= E + 1e-12);
            prop_assert!(ssm.w_prime >= 1.0 - 1e-12 && ssm.w_prime <= E + 1e-12);
        }

        #[test]
        fn ssm_attains_e_only_at_certainty(p_mass in 0.0f64..1.0) {
            let y = array![p_mass, 1.0 - p_mass];
            let ssm = compute_ssm(&y.view(), 1).unwrap();
            let at_e = (ssm.w - E).abs() < 1e-12;
            prop_assert_eq!(at_e, (p_mass - 1.0).abs() < 1e-12);
            let prime_at_e = (ssm.w_prime - E).abs() < 1e-12;
            prop_assert_eq!(prime_at_e, p_mass.abs() < 1e-12);
        }
    }
}
