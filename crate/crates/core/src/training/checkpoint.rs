//! Checkpoint directory: `manifest.json` plus one little-endian f64 blob per
//! parameter group.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EnvMode, FitOptions, FitReport, Trainer};
use crate::dataset::Normalizer;
use crate::envpool::{EnvFeaturePool, NodeEmbeddingPool};
use crate::error::{bail_data, Error, Result};
use crate::fsutil::write_dir_atomically;
use crate::models::{Forecaster, ModelKind};
use crate::nn::ParamSet;

const FORMAT_VERSION: u32 = 1;

/// Hex SHA-256 of the value's JSON encoding with object keys sorted.
pub fn config_hash(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    /// `model`, `env` or `nodes`.
    pub set: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelKind,
    pub config_hash: String,
    pub epoch: usize,
    pub best_val_mae: f64,
    pub options: FitOptions,
    pub normalizer: Normalizer,
    pub blobs: Vec<BlobEntry>,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub model: ParamSet,
    pub env: Option<EnvFeaturePool>,
    pub nodes: Option<NodeEmbeddingPool>,
}

fn blob_file(set: &str, name: &str) -> String {
    format!("{set}.{}.f64", name.replace(['/', '\\'], "_"))
}

fn encode(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        bail_data!(
            "{}: blob length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        );
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn capture<F: Forecaster>(
        trainer: &Trainer<F>,
        normalizer: &Normalizer,
        report: &FitReport,
        config: &impl Serialize,
    ) -> Result<Self> {
        let mut blobs = Vec::new();
        let mut add = |set: &str, params: &ParamSet| {
            for g in params.groups() {
                blobs.push(BlobEntry {
                    set: set.to_string(),
                    name: g.name.clone(),
                    shape: g.shape.clone(),
                    file: blob_file(set, &g.name),
                });
            }
        };
        add("model", trainer.model.params());
        if let Some(env) = &trainer.env {
            add("env", env.params());
        }
        if let Some(nodes) = &trainer.nodes {
            add("nodes", nodes.params());
        }
        Ok(Checkpoint {
            manifest: CheckpointManifest {
                format_version: FORMAT_VERSION,
                model: trainer.model.kind(),
                config_hash: config_hash(config)?,
                epoch: report.best_epoch,
                best_val_mae: report.best_val_mae,
                options: *trainer.options(),
                normalizer: normalizer.clone(),
                blobs,
                config: serde_json::to_value(config)?,
            },
            model: trainer.model.params().clone(),
            env: trainer.env.clone(),
            nodes: trainer.nodes.clone(),
        })
    }

    fn set(&self, name: &str) -> Option<&ParamSet> {
        match name {
            "model" => Some(&self.model),
            "env" => self.env.as_ref().map(|e| e.params()),
            "nodes" => self.nodes.as_ref().map(|n| n.params()),
            _ => None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_dir_atomically(dir, |tmp| {
            for entry in &self.manifest.blobs {
                let set = self
                    .set(&entry.set)
                    .ok_or_else(|| Error::Data(format!("missing parameter set {}", entry.set)))?;
                let id = set
                    .find(&entry.name)
                    .ok_or_else(|| Error::Data(format!("missing parameter {}", entry.name)))?;
                let path = tmp.join(&entry.file);
                fs::write(&path, encode(set.data(id))).map_err(|e| Error::io(&path, e))?;
            }
            let path = tmp.join("manifest.json");
            let text = serde_json::to_string_pretty(&self.manifest)?;
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        if manifest.format_version != FORMAT_VERSION {
            bail_data!("unsupported checkpoint format {}", manifest.format_version);
        }
        let (mut model, mut env, mut nodes) = (ParamSet::new(), None, None);
        for entry in &manifest.blobs {
            let path = dir.join(&entry.file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let data = decode(&bytes, &path)?;
            if data.len() != entry.shape.iter().product::<usize>() {
                bail_data!(
                    "{}: {} values for shape {:?}",
                    path.display(),
                    data.len(),
                    entry.shape
                );
            }
            let dims = |s: &[usize]| -> Result<(usize, usize, usize)> {
                match s {
                    [a, b, c] => Ok((*a, *b, *c)),
                    _ => bail_data!("pool blob {} must be 3-D", entry.name),
                }
            };
            match entry.set.as_str() {
                "model" => {
                    model.register(entry.name.clone(), entry.shape.clone(), data);
                }
                "env" => {
                    let (n, m, d) = dims(&entry.shape)?;
                    env = Some(EnvFeaturePool::from_data(n, m, d, data)?);
                }
                "nodes" => {
                    let (m, n, d) = dims(&entry.shape)?;
                    nodes = Some(NodeEmbeddingPool::from_data(n, m, d, data)?);
                }
                other => bail_data!("unknown parameter set {other}"),
            }
        }
        Ok(Checkpoint {
            manifest,
            model,
            env,
            nodes,
        })
    }

    /// Load the stored parameters into `model` (which must have the same
    /// architecture) and rebuild its trainer.
    pub fn restore<F: Forecaster>(
        &self,
        mut model: F,
        geo: ndarray::Array2<f64>,
    ) -> Result<Trainer<F>> {
        if model.kind() != self.manifest.model {
            bail_data!(
                "checkpoint holds {} but a {} was supplied",
                self.manifest.model,
                model.kind()
            );
        }
        model
            .params_mut()
            .load_from(&self.model)
            .map_err(Error::Data)?;
        let env = match self.manifest.options.env {
            EnvMode::Off => None,
            _ => self.env.clone(),
        };
        Ok(Trainer::from_parts(
            model,
            env,
            self.nodes.clone(),
            geo,
            self.manifest.options,
        ))
    }
}
