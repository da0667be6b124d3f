//! Trainable architectures: the class-conditioned denoiser, the global
//! classifier, and a portable checkpoint representation.

use candle_core::{Device, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod checkpoint;
pub mod classifier;
pub mod denoiser;
mod layers;
pub mod optim;

pub use checkpoint::{ArchConfig, ModelCheckpoint, TrainingMeta};
pub use classifier::{ClassifierConfig, ClassifierModel};
pub use denoiser::{ConditionalDenoiser, DenoiserConfig};

/// Ordered collection of named trainable parameters.
///
/// Insertion order is fixed by construction, which keeps gradient flattening,
/// checkpoints, and parameter averaging aligned across model instances built
/// from the same config.
pub struct ParamStore {
    params: Vec<(String, Var)>,
    rng: ChaCha12Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            rng: ChaCha12Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// New parameter initialized uniformly in [-bound, bound].
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| self.rng.gen_range(-bound..=bound))
            .collect();
        self.from_data(name, shape, data)
    }

    /// New parameter filled with a constant.
    pub fn constant(&mut self, name: &str, shape: &[usize], value: f32) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.from_data(name, shape, vec![value; n])
    }

    fn from_data(&mut self, name: &str, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&t)?;
        self.params.push((name.to_string(), var.clone()));
        Ok(var)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .map(|(_, v)| v.as_tensor().elem_count())
            .sum()
    }

    /// Overwrite parameters by name from flat f32 arrays.
    pub fn load_named(&self, named: &[(String, Vec<f32>, Vec<usize>)]) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, model expects {}",
                named.len(),
                self.params.len()
            )));
        }
        for ((name, var), (ck_name, data, shape)) in self.params.iter().zip(named) {
            if name != ck_name {
                return Err(Error::Validation(format!(
                    "parameter name mismatch: model {name:?} vs checkpoint {ck_name:?}"
                )));
            }
            let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Snapshot parameters as flat f32 arrays with shapes.
    pub fn export_named(&self) -> Result<Vec<(String, Vec<f32>, Vec<usize>)>> {
        self.params
            .iter()
            .map(|(name, var)| {
                let t = var.as_tensor();
                let flat = t.flatten_all()?.to_vec1::<f32>()?;
                Ok((name.clone(), flat, t.dims().to_vec()))
            })
            .collect()
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.params.len())
            .field("elements", &self.param_count())
            .finish()
    }
}

/// MFLOPs for one forward pass on one image, multiply-accumulates counted
/// as 2 ops. Only conv and linear MACs are counted; normalization and
/// activations are excluded from the estimate.
pub fn count_flops(arch: &ArchConfig, input_hw: (usize, usize)) -> f64 {
    match arch {
        ArchConfig::Denoiser(cfg) => denoiser::flops(cfg, input_hw) / 1e6,
        ArchConfig::Classifier(cfg) => classifier::flops(cfg, input_hw) / 1e6,
    }
}

/// Shared conv-arithmetic helpers for the analytic FLOP estimates.
pub(crate) fn conv_flops(cin: usize, cout: usize, k: usize, out_h: usize, out_w: usize) -> f64 {
    2.0 * (k * k * cin * cout * out_h * out_w) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSize {
    Default,
    Small,
}

impl std::str::FromStr for ModelSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(ModelSize::Default),
            "small" => Ok(ModelSize::Small),
            other => Err(Error::Config(format!("unknown model size {other:?}"))),
        }
    }
}
