//! Checkpoint directories: `manifest.json` plus one raw little-endian f64
//! blob per named tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tenslora_core::adapters::{init_adapter, AdapterVariant, RankPlan, TensLoraAdapter};
use tenslora_core::testbed::{BackboneConfig, TransformerBackbone};
use tenslora_core::DenseTensor;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const DTYPE: &str = "f64le";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Backbone (with trained head) plus an unmerged adapter.
    AdapterModel,
    /// Backbone only, e.g. after merging.
    Backbone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub backbone: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapter: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<AdapterVariant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<RankPlan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub seeds: Seeds,
    pub backbone: BackboneConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ExperimentConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub backbone: TransformerBackbone,
    pub adapter: Option<TensLoraAdapter>,
    pub config: Option<ExperimentConfig>,
}

const BACKBONE_PREFIX: &str = "backbone.";

impl Checkpoint {
    pub fn kind(&self) -> CheckpointKind {
        if self.adapter.is_some() {
            CheckpointKind::AdapterModel
        } else {
            CheckpointKind::Backbone
        }
    }

    fn named(&self) -> Vec<(String, &DenseTensor)> {
        let mut out: Vec<(String, &DenseTensor)> = self
            .backbone
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (format!("{BACKBONE_PREFIX}{n}"), t))
            .collect();
        if let Some(a) = &self.adapter {
            out.extend(a.param_names().into_iter().zip(a.params()));
        }
        out
    }

    pub fn manifest(&self) -> Manifest {
        let tensors = self
            .named()
            .into_iter()
            .map(|(name, t)| TensorEntry {
                file: format!("{name}.bin"),
                shape: t.shape().to_vec(),
                dtype: DTYPE.to_string(),
                bytes: 8 * t.len() as u64,
                name,
            })
            .collect();
        let a = self.adapter.as_ref();
        Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind(),
            variant: a.map(|a| a.variant),
            ranks: a.map(|a| a.ranks.clone()),
            alpha: a.map(|a| a.alpha),
            seeds: Seeds {
                backbone: self.backbone.config.seed,
                adapter: a.map(|a| a.seed),
                train: self.config.as_ref().map(|c| c.train.seed),
                task: self.config.as_ref().map(|c| c.task.seed),
            },
            backbone: self.backbone.config.clone(),
            config: self.config.clone(),
            tensors,
        }
    }

    /// Writes the checkpoint into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path) -> CliResult<Manifest> {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        let manifest = self.manifest();
        for ((_, t), entry) in self.named().into_iter().zip(&manifest.tensors) {
            let path = dir.join(&entry.file);
            fs::write(&path, t.to_le_bytes()).map_err(CliError::io(&path))?;
        }
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(CliError::json(&path))?;
        fs::write(&path, text + "\n").map_err(CliError::io(&path))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(CliError::json(&path))?;
        let bad = |reason: String| CliError::Checkpoint {
            path: dir.to_path_buf(),
            reason,
        };
        if manifest.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", manifest.format_version)));
        }
        let mut backbone_tensors = BTreeMap::new();
        let mut adapter_tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            let t = read_tensor(dir, entry).map_err(|e| match e {
                CliError::Checkpoint { reason, .. } => bad(reason),
                other => other,
            })?;
            match entry.name.strip_prefix(BACKBONE_PREFIX) {
                Some(rest) => backbone_tensors.insert(rest.to_string(), t),
                None => adapter_tensors.insert(entry.name.clone(), t),
            };
        }
        let backbone = TransformerBackbone::from_named(manifest.backbone.clone(), backbone_tensors)?;
        let adapter = match manifest.kind {
            CheckpointKind::Backbone => {
                if !adapter_tensors.is_empty() {
                    return Err(bad("backbone checkpoint lists adapter tensors".into()));
                }
                None
            }
            CheckpointKind::AdapterModel => {
                let (Some(variant), Some(ranks), Some(alpha), Some(seed)) =
                    (manifest.variant, manifest.ranks.clone(), manifest.alpha, manifest.seeds.adapter)
                else {
                    return Err(bad("adapter checkpoint lacks variant, ranks, alpha or adapter seed".into()));
                };
                let mut adapter = init_adapter(variant, backbone.config.dims, ranks, alpha, seed)?;
                let names = adapter.param_names();
                for (name, p) in names.iter().zip(adapter.params_mut()) {
                    let t = adapter_tensors
                        .remove(name)
                        .ok_or_else(|| bad(format!("missing adapter tensor '{name}'")))?;
                    if t.shape() != p.shape() {
                        return Err(bad(format!(
                            "'{name}' has shape {:?}, expected {:?}",
                            t.shape(),
                            p.shape()
                        )));
                    }
                    *p = t;
                }
                if let Some(extra) = adapter_tensors.keys().next() {
                    return Err(bad(format!("unexpected tensor '{extra}'")));
                }
                Some(adapter)
            }
        };
        Ok(Self {
            backbone,
            adapter,
            config: manifest.config,
        })
    }
}

fn read_tensor(dir: &Path, entry: &TensorEntry) -> CliResult<DenseTensor> {
    let bad = |reason: String| CliError::Checkpoint {
        path: dir.to_path_buf(),
        reason,
    };
    if entry.dtype != DTYPE {
        return Err(bad(format!("'{}' has dtype {}, expected {DTYPE}", entry.name, entry.dtype)));
    }
    let len: usize = entry.shape.iter().product();
    if entry.bytes != 8 * len as u64 {
        return Err(bad(format!(
            "'{}' declares {} bytes for shape {:?}",
            entry.name, entry.bytes, entry.shape
        )));
    }
    if Path::new(&entry.file).components().count() != 1 {
        return Err(bad(format!("tensor file '{}' must be a plain file name", entry.file)));
    }
    let path: PathBuf = dir.join(&entry.file);
    let raw = fs::read(&path).map_err(CliError::io(&path))?;
    if raw.len() as u64 != entry.bytes {
        return Err(bad(format!("'{}' holds {} bytes, manifest says {}", entry.file, raw.len(), entry.bytes)));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();
    Ok(DenseTensor::new(entry.shape.clone(), data)?)
}
