//! Portable model checkpoints: `config.json` + one little-endian f32 blob per
//! named parameter under `params/` + `meta.json`. Round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::classifier::{build_classifier, ClassifierConfig, ClassifierModel};
use crate::models::denoiser::{build_denoiser, ConditionalDenoiser, DenoiserConfig};
use crate::privacy::LedgerSnapshot;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ArchConfig {
    Denoiser(DenoiserConfig),
    Classifier(ClassifierConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub seed: u64,
    /// Final privacy ledger state when trained with DP.
    pub ledger: Option<LedgerSnapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    training: TrainingMeta,
    params: Vec<ParamMeta>,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub arch: ArchConfig,
    pub params: Vec<(String, Vec<f32>, Vec<usize>)>,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn from_denoiser(model: &ConditionalDenoiser, meta: TrainingMeta) -> Result<Self> {
        Ok(Self {
            arch: ArchConfig::Denoiser(model.config.clone()),
            params: model.store().export_named()?,
            meta,
        })
    }

    pub fn from_classifier(model: &ClassifierModel, meta: TrainingMeta) -> Result<Self> {
        Ok(Self {
            arch: ArchConfig::Classifier(model.config.clone()),
            params: model.store().export_named()?,
            meta,
        })
    }

    pub fn into_denoiser(&self) -> Result<ConditionalDenoiser> {
        let ArchConfig::Denoiser(cfg) = &self.arch else {
            return Err(Error::Validation(
                "checkpoint does not hold a denoiser".into(),
            ));
        };
        let model = build_denoiser(cfg, self.meta.seed)?;
        model.store().load_named(&self.params)?;
        Ok(model)
    }

    pub fn into_classifier(&self) -> Result<ClassifierModel> {
        let ArchConfig::Classifier(cfg) = &self.arch else {
            return Err(Error::Validation(
                "checkpoint does not hold a classifier".into(),
            ));
        };
        let model = build_classifier(cfg, self.meta.seed)?;
        model.store().load_named(&self.params)?;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, data, _)| data.len()).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params_dir = dir.join("params");
        fs::create_dir_all(&params_dir)?;
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(&self.arch)?)?;
        let meta = CheckpointMeta {
            training: self.meta.clone(),
            params: self
                .params
                .iter()
                .map(|(name, _, shape)| ParamMeta {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        for (name, data, _) in &self.params {
            let mut buf = Vec::with_capacity(data.len() * 4);
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(params_dir.join(format!("{}.bin", sanitize(name))), buf)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let arch: ArchConfig = serde_json::from_slice(&fs::read(dir.join("config.json"))?)?;
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        let mut params = Vec::with_capacity(meta.params.len());
        for pm in &meta.params {
            let path = dir.join("params").join(format!("{}.bin", sanitize(&pm.name)));
            let bytes = fs::read(&path).map_err(|e| Error::IngestFile {
                path,
                reason: e.to_string(),
            })?;
            let expected: usize = pm.shape.iter().product::<usize>() * 4;
            if bytes.len() != expected {
                return Err(Error::Validation(format!(
                    "parameter {} has {} bytes, expected {}",
                    pm.name,
                    bytes.len(),
                    expected
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push((pm.name.clone(), data, pm.shape.clone()));
        }
        Ok(Self {
            arch,
            params,
            meta: meta.training,
        })
    }
}

fn sanitize(name: &str) -> String {
    name.replace(['/', '\\'], "_")
}
