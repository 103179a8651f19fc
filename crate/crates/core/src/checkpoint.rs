//! Single-file checkpoint container.
//!
//! Layout: an 8-byte magic, a JSON manifest (architecture, label space,
//! configs, prior parameters as plain number arrays), then one binary
//! blob per parameter tensor with a name/shape/element-type header and
//! little-endian f64 payload. Loading and re-saving reproduces the file
//! byte for byte.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::deployment::AdaptationConfig;
use crate::error::{Error, Result};
use crate::label_space::LabelSpaceManifest;
use crate::model::{ArchSpec, Backbone, DeploymentModel, ModelDims, ProcurementModel};
use crate::nn::Mlp;
use crate::priors::ClassPrior;
use crate::procurement::ProcurementConfig;

const MAGIC: &[u8; 8] = b"SFDACKP1";
const DTYPE_F64: u8 = 0;
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Text-encoded prior parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorRecord {
    pub class_id: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl From<&ClassPrior> for PriorRecord {
    fn from(p: &ClassPrior) -> Self {
        Self {
            class_id: p.class_id,
            mean: p.mean.to_vec(),
            var: p.var.to_vec(),
        }
    }
}

impl PriorRecord {
    pub fn to_prior(&self) -> ClassPrior {
        ClassPrior {
            class_id: self.class_id,
            mean: Array1::from(self.mean.clone()),
            var: Array1::from(self.var.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub arch: ArchSpec,
    pub dims: ModelDims,
    pub label_space: LabelSpaceManifest,
    pub procurement: ProcurementConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adaptation: Option<AdaptationConfig>,
    pub priors: Vec<PriorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(MAGIC);
        let manifest = serde_json::to_vec(&self.manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(self.blobs.len() as u64).to_le_bytes());
        for blob in &self.blobs {
            let name = blob.name.as_bytes();
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name);
            out.push(DTYPE_F64);
            out.extend_from_slice(&(blob.dims.len() as u64).to_le_bytes());
            for &d in &blob.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let count: usize = blob.dims.iter().product();
            if count != blob.data.len() {
                return Err(Error::Checkpoint(format!(
                    "blob {}: shape {:?} does not match {} values",
                    blob.name,
                    blob.dims,
                    blob.data.len()
                )));
            }
            out.extend_from_slice(&(blob.data.len() as u64).to_le_bytes());
            for v in &blob.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut cursor = Cursor {
            bytes: &bytes,
            pos: 0,
        };
        let magic = cursor.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let manifest_len = cursor.u64()? as usize;
        let manifest: CheckpointManifest = serde_json::from_slice(cursor.take(manifest_len)?)
            .map_err(|e| Error::Checkpoint(format!("manifest parse failed: {e}")))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        let blob_count = cursor.u64()? as usize;
        let mut blobs = Vec::with_capacity(blob_count);
        for _ in 0..blob_count {
            let name_len = cursor.u64()? as usize;
            let name = String::from_utf8(cursor.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("bad blob name: {e}")))?;
            let dtype = cursor.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!(
                    "blob {name}: unsupported element type {dtype}"
                )));
            }
            let ndim = cursor.u64()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(cursor.u64()? as usize);
            }
            let count = cursor.u64()? as usize;
            if count != dims.iter().product::<usize>() {
                return Err(Error::Checkpoint(format!(
                    "blob {name}: shape {dims:?} does not match {count} values"
                )));
            }
            let raw = cursor.take(count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            blobs.push(Blob { name, dims, data });
        }
        if cursor.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last blob".into()));
        }
        Ok(Self { manifest, blobs })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn mlp_blobs(prefix: &str, mlp: &Mlp, out: &mut Vec<Blob>) {
    for (i, layer) in mlp.layers.iter().enumerate() {
        out.push(Blob {
            name: format!("{prefix}.{i}.w"),
            dims: vec![layer.w.nrows(), layer.w.ncols()],
            data: layer.w.iter().copied().collect(),
        });
        out.push(Blob {
            name: format!("{prefix}.{i}.b"),
            dims: vec![layer.b.len()],
            data: layer.b.to_vec(),
        });
    }
}

fn backbone_blobs(backbone: &Backbone, out: &mut Vec<Blob>) {
    if let Backbone::Conv(net) = backbone {
        for (i, conv) in net.conv_layers().enumerate() {
            out.push(Blob {
                name: format!("m.{i}.w"),
                dims: conv.w.shape().to_vec(),
                data: conv.w.iter().copied().collect(),
            });
            out.push(Blob {
                name: format!("m.{i}.b"),
                dims: vec![conv.b.len()],
                data: conv.b.to_vec(),
            });
        }
    }
}

fn model_blobs(model: &ProcurementModel, target_extractor: Option<&Mlp>) -> Vec<Blob> {
    let mut blobs = Vec::new();
    backbone_blobs(&model.backbone, &mut blobs);
    mlp_blobs("fs", &model.feature_extractor, &mut blobs);
    mlp_blobs("d", &model.classifier, &mut blobs);
    mlp_blobs("g", &model.decoder, &mut blobs);
    if let Some(ft) = target_extractor {
        mlp_blobs("ft", ft, &mut blobs);
    }
    blobs
}

/// Packs a trained procurement stage.
pub fn procurement_checkpoint(
    model: &ProcurementModel,
    priors: &[ClassPrior],
    label_space: LabelSpaceManifest,
    config: ProcurementConfig,
) -> Checkpoint {
    Checkpoint {
        manifest: CheckpointManifest {
            version: CHECKPOINT_VERSION,
            arch: arch_of(model),
            dims: model.dims,
            label_space,
            procurement: config,
            adaptation: None,
            priors: priors.iter().map(PriorRecord::from).collect(),
        },
        blobs: model_blobs(model, None),
    }
}

/// Packs an adapted deployment stage: the frozen components plus the
/// target extractor and the adaptation config.
pub fn deployment_checkpoint(
    deploy: &DeploymentModel,
    label_space: LabelSpaceManifest,
    procurement: ProcurementConfig,
    adaptation: AdaptationConfig,
) -> Checkpoint {
    Checkpoint {
        manifest: CheckpointManifest {
            version: CHECKPOINT_VERSION,
            arch: arch_of(&deploy.frozen),
            dims: deploy.frozen.dims,
            label_space,
            procurement,
            adaptation: Some(adaptation),
            priors: deploy.priors.iter().map(PriorRecord::from).collect(),
        },
        blobs: model_blobs(&deploy.frozen, Some(&deploy.target_extractor)),
    }
}

fn arch_of(model: &ProcurementModel) -> ArchSpec {
    // The manifest arch mirrors the live model; hidden sizes are read
    // back from the layers themselves.
    let fs_hidden: Vec<usize> = model
        .feature_extractor
        .layers
        .iter()
        .take(model.feature_extractor.layers.len() - 1)
        .map(|l| l.out_dim())
        .collect();
    let dec_hidden: Vec<usize> = model
        .decoder
        .layers
        .iter()
        .take(model.decoder.layers.len() - 1)
        .map(|l| l.out_dim())
        .collect();
    let backbone = match &model.backbone {
        Backbone::Identity { input } => crate::model::BackboneSpec::Identity { input: *input },
        Backbone::Conv(net) => crate::model::BackboneSpec::Conv {
            input: net.input_shape(),
            channels: net.conv_layers().map(|c| c.out_channels()).collect(),
        },
    };
    ArchSpec {
        backbone,
        u_dim: model.dims.u_dim,
        fs_hidden,
        dec_hidden,
        activation: first_activation(model),
    }
}

fn first_activation(model: &ProcurementModel) -> crate::model::ActSpec {
    match model.feature_extractor.layers[0].act {
        crate::nn::Activation::Relu => crate::model::ActSpec::Relu,
        _ => crate::model::ActSpec::Tanh,
    }
}

fn group_from_blobs(
    blobs: &[Blob],
    prefix: &str,
    expected: &[(String, Vec<usize>)],
) -> Result<Vec<f64>> {
    let mut flat = Vec::new();
    for (name, dims) in expected {
        let blob = blobs
            .iter()
            .find(|b| &b.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter blob {name}")))?;
        if &blob.dims != dims {
            return Err(Error::Checkpoint(format!(
                "blob {name}: expected shape {dims:?}, found {:?}",
                blob.dims
            )));
        }
        flat.extend_from_slice(&blob.data);
    }
    let _ = prefix;
    Ok(flat)
}

fn expected_mlp_blobs(prefix: &str, mlp: &Mlp) -> Vec<(String, Vec<usize>)> {
    mlp.layers
        .iter()
        .enumerate()
        .flat_map(|(i, l)| {
            [
                (format!("{prefix}.{i}.w"), vec![l.w.nrows(), l.w.ncols()]),
                (format!("{prefix}.{i}.b"), vec![l.b.len()]),
            ]
        })
        .collect()
}

/// Rebuilds the procurement model and priors from a checkpoint.
pub fn procurement_from_checkpoint(ckpt: &Checkpoint) -> Result<(ProcurementModel, Vec<ClassPrior>)> {
    let manifest = &ckpt.manifest;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = ProcurementModel::new(
        &manifest.arch,
        manifest.dims.num_positive,
        manifest.dims.num_negative,
        &mut rng,
    )?;
    if model.dims != manifest.dims {
        return Err(Error::Checkpoint(format!(
            "architecture implies dims {:?} but manifest records {:?}",
            model.dims, manifest.dims
        )));
    }
    if let Backbone::Conv(net) = &model.backbone {
        let expected: Vec<(String, Vec<usize>)> = net
            .conv_layers()
            .enumerate()
            .flat_map(|(i, c)| {
                [
                    (format!("m.{i}.w"), c.w.shape().to_vec()),
                    (format!("m.{i}.b"), vec![c.b.len()]),
                ]
            })
            .collect();
        let flat = group_from_blobs(&ckpt.blobs, "m", &expected)?;
        model.backbone.set_flat_params(&flat);
    }
    let fs_flat = group_from_blobs(
        &ckpt.blobs,
        "fs",
        &expected_mlp_blobs("fs", &model.feature_extractor),
    )?;
    model.feature_extractor.set_flat_params(&fs_flat);
    let d_flat = group_from_blobs(&ckpt.blobs, "d", &expected_mlp_blobs("d", &model.classifier))?;
    model.classifier.set_flat_params(&d_flat);
    let g_flat = group_from_blobs(&ckpt.blobs, "g", &expected_mlp_blobs("g", &model.decoder))?;
    model.decoder.set_flat_params(&g_flat);
    let priors = manifest.priors.iter().map(PriorRecord::to_prior).collect();
    Ok((model, priors))
}

/// Rebuilds a deployment model; `ft` blobs are required when the
/// checkpoint records an adaptation section, otherwise Ft starts as a
/// copy of Fs.
pub fn deployment_from_checkpoint(ckpt: &Checkpoint) -> Result<DeploymentModel> {
    let (frozen, priors) = procurement_from_checkpoint(ckpt)?;
    let mut deploy = DeploymentModel::from_procurement(frozen, priors);
    let has_ft = ckpt.blobs.iter().any(|b| b.name.starts_with("ft."));
    if has_ft {
        let ft_flat = group_from_blobs(
            &ckpt.blobs,
            "ft",
            &expected_mlp_blobs("ft", &deploy.target_extractor),
        )?;
        deploy.target_extractor.set_flat_params(&ft_flat);
    } else if ckpt.manifest.adaptation.is_some() {
        return Err(Error::Checkpoint(
            "manifest records an adaptation but ft blobs are missing".into(),
        ));
    }
    Ok(deploy)
}
