//! The generative source classifier and its deployment-time twin.
//!
//! Four components: a backbone `M` mapping raw inputs to v-space, a
//! feature extractor mapping v to u, a classifier head over
//! `|Cs| + |Cn|` logits, and a decoder mapping u back to v. Deployment
//! adds a trainable copy of the feature extractor while everything else
//! stays frozen.

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{param_checksum, Activation, ConvNet, Mlp};
use crate::priors::ClassPrior;

/// Named parameter bundles; optimizers and checksums bind to these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    FeatureExtractor,
    Classifier,
    Decoder,
}

/// Architecture description, serializable into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub backbone: BackboneSpec,
    pub u_dim: usize,
    #[serde(default)]
    pub fs_hidden: Vec<usize>,
    #[serde(default)]
    pub dec_hidden: Vec<usize>,
    pub activation: ActSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    /// Flatten images (or pass vectors through); v_dim = product of the
    /// input shape.
    Identity { input: (usize, usize, usize) },
    /// Small conv stack: one 3x3 conv + activation + 2x2 avg pool per
    /// channel entry.
    Conv {
        input: (usize, usize, usize),
        channels: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActSpec {
    Tanh,
    Relu,
}

impl From<ActSpec> for Activation {
    fn from(a: ActSpec) -> Self {
        match a {
            ActSpec::Tanh => Activation::Tanh,
            ActSpec::Relu => Activation::Relu,
        }
    }
}

/// The backbone `M`. Identity flattens; conv runs the stack.
#[derive(Debug, Clone)]
pub enum Backbone {
    Identity { input: (usize, usize, usize) },
    Conv(ConvNet),
}

impl Backbone {
    pub fn from_spec<R: Rng>(spec: &BackboneSpec, act: Activation, rng: &mut R) -> Self {
        match spec {
            BackboneSpec::Identity { input } => Backbone::Identity { input: *input },
            BackboneSpec::Conv { input, channels } => {
                Backbone::Conv(ConvNet::new(*input, channels, act, rng))
            }
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Backbone::Identity { input } => input.0 * input.1 * input.2,
            Backbone::Conv(net) => net.out_dim(),
        }
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        match self {
            Backbone::Identity { input } => *input,
            Backbone::Conv(net) => net.input_shape(),
        }
    }

    /// `(N, C, H, W) -> (N, v_dim)`
    pub fn forward_images(&self, images: &Array4<f64>) -> Array2<f64> {
        match self {
            Backbone::Identity { .. } => {
                let n = images.shape()[0];
                let dim = images.len() / n;
                images
                    .to_owned()
                    .into_shape_with_order((n, dim))
                    .expect("contiguous")
            }
            Backbone::Conv(net) => net.forward(images),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Backbone::Identity { .. } => 0,
            Backbone::Conv(net) => net.param_count(),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        match self {
            Backbone::Identity { .. } => Vec::new(),
            Backbone::Conv(net) => net.flat_params(),
        }
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        match self {
            Backbone::Identity { .. } => assert!(flat.is_empty()),
            Backbone::Conv(net) => net.set_flat_params(flat),
        }
    }
}

/// Width bookkeeping carried alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub v_dim: usize,
    pub u_dim: usize,
    pub num_positive: usize,
    pub num_negative: usize,
}

impl ModelDims {
    pub fn total_classes(&self) -> usize {
        self.num_positive + self.num_negative
    }
}

/// `(M, Fs, D, G)` as trained in the procurement stage.
#[derive(Debug, Clone)]
pub struct ProcurementModel {
    pub backbone: Backbone,
    pub feature_extractor: Mlp,
    pub classifier: Mlp,
    pub decoder: Mlp,
    pub dims: ModelDims,
}

impl ProcurementModel {
    pub fn new<R: Rng>(
        arch: &ArchSpec,
        num_positive: usize,
        num_negative: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_positive == 0 {
            return Err(Error::InvalidConfig("no positive classes".into()));
        }
        let act: Activation = arch.activation.into();
        let backbone = Backbone::from_spec(&arch.backbone, act, rng);
        let v_dim = backbone.out_dim();
        let k = num_positive + num_negative;

        let mut fs_dims = vec![v_dim];
        fs_dims.extend(&arch.fs_hidden);
        fs_dims.push(math_checked(arch.u_dim)?);
        let feature_extractor = Mlp::new(&fs_dims, act, act, rng);

        let classifier = Mlp::new(&[arch.u_dim, k], act, Activation::Identity, rng);

        let mut dec_dims = vec![arch.u_dim];
        dec_dims.extend(&arch.dec_hidden);
        dec_dims.push(v_dim);
        let decoder = Mlp::new(&dec_dims, act, Activation::Identity, rng);

        Ok(Self {
            backbone,
            feature_extractor,
            classifier,
            decoder,
            dims: ModelDims {
                v_dim,
                u_dim: arch.u_dim,
                num_positive,
                num_negative,
            },
        })
    }

    /// u = Fs(v)
    pub fn features(&self, v: &Array2<f64>) -> Array2<f64> {
        self.feature_extractor.forward(v)
    }

    /// K-wide logits from v-space.
    pub fn logits_from_v(&self, v: &Array2<f64>) -> Array2<f64> {
        self.classifier.forward(&self.feature_extractor.forward(v))
    }

    /// Softmax class probabilities from v-space.
    pub fn probs_from_v(&self, v: &Array2<f64>) -> Array2<f64> {
        crate::nn::softmax_rows(&self.logits_from_v(v))
    }

    pub fn group_flat(&self, group: ParamGroup) -> Vec<f64> {
        match group {
            ParamGroup::Backbone => self.backbone.flat_params(),
            ParamGroup::FeatureExtractor => self.feature_extractor.flat_params(),
            ParamGroup::Classifier => self.classifier.flat_params(),
            ParamGroup::Decoder => self.decoder.flat_params(),
        }
    }

    pub fn set_group_flat(&mut self, group: ParamGroup, flat: &[f64]) {
        match group {
            ParamGroup::Backbone => self.backbone.set_flat_params(flat),
            ParamGroup::FeatureExtractor => self.feature_extractor.set_flat_params(flat),
            ParamGroup::Classifier => self.classifier.set_flat_params(flat),
            ParamGroup::Decoder => self.decoder.set_flat_params(flat),
        }
    }

    pub fn group_checksum(&self, group: ParamGroup) -> [u8; 32] {
        param_checksum(&self.group_flat(group))
    }

    /// Checksums of all four frozen-in-deployment groups, in a fixed order.
    pub fn frozen_checksums(&self) -> [[u8; 32]; 4] {
        [
            self.group_checksum(ParamGroup::Backbone),
            self.group_checksum(ParamGroup::FeatureExtractor),
            self.group_checksum(ParamGroup::Classifier),
            self.group_checksum(ParamGroup::Decoder),
        ]
    }
}

fn math_checked(u_dim: usize) -> Result<usize> {
    if u_dim == 0 {
        Err(Error::InvalidConfig("u_dim must be positive".into()))
    } else {
        Ok(u_dim)
    }
}

/// Frozen procurement model plus the trainable target feature extractor.
#[derive(Debug, Clone)]
pub struct DeploymentModel {
    pub frozen: ProcurementModel,
    pub priors: Vec<ClassPrior>,
    /// Ft, initialized as an exact copy of Fs.
    pub target_extractor: Mlp,
}

impl DeploymentModel {
    pub fn from_procurement(frozen: ProcurementModel, priors: Vec<ClassPrior>) -> Self {
        let target_extractor = frozen.feature_extractor.clone();
        Self {
            frozen,
            priors,
            target_extractor,
        }
    }

    pub fn num_positive(&self) -> usize {
        self.frozen.dims.num_positive
    }

    /// Deployment-path logits `D(Ft(v))`.
    pub fn logits_from_v(&self, v: &Array2<f64>) -> Array2<f64> {
        self.frozen
            .classifier
            .forward(&self.target_extractor.forward(v))
    }

    pub fn probs_from_v(&self, v: &Array2<f64>) -> Array2<f64> {
        crate::nn::softmax_rows(&self.logits_from_v(v))
    }

    /// u-space embedding through the adapted extractor.
    pub fn target_features(&self, v: &Array2<f64>) -> Array2<f64> {
        self.target_extractor.forward(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            backbone: BackboneSpec::Identity { input: (1, 2, 3) },
            u_dim: 4,
            fs_hidden: vec![5],
            dec_hidden: vec![5],
            activation: ActSpec::Tanh,
        }
    }

    #[test]
    fn classifier_width_matches_label_algebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ProcurementModel::new(&tiny_arch(), 3, 3, &mut rng).unwrap();
        assert_eq!(model.classifier.out_dim(), 6);
        assert_eq!(model.dims.v_dim, 6);
        assert_eq!(model.decoder.out_dim(), model.dims.v_dim);
        assert_eq!(model.decoder.in_dim(), model.feature_extractor.out_dim());
    }

    #[test]
    fn deployment_copy_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ProcurementModel::new(&tiny_arch(), 3, 3, &mut rng).unwrap();
        let fs_sum = model.group_checksum(ParamGroup::FeatureExtractor);
        let deploy = DeploymentModel::from_procurement(model, vec![]);
        assert_eq!(param_checksum(&deploy.target_extractor.flat_params()), fs_sum);
    }

    #[test]
    fn checksum_changes_with_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = ProcurementModel::new(&tiny_arch(), 2, 1, &mut rng).unwrap();
        let before = model.group_checksum(ParamGroup::Classifier);
        let mut flat = model.group_flat(ParamGroup::Classifier);
        flat[0] += 1e-9;
        model.set_group_flat(ParamGroup::Classifier, &flat);
        assert_ne!(before, model.group_checksum(ParamGroup::Classifier));
    }
}
