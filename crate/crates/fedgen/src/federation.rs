//! One-shot federation protocol: client-side training, the single upload
//! payload, server-side synthetic data generation, global training, and the
//! weight-averaging / ensemble baselines.

use std::path::Path;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{from_model_range, largest_remainder_counts, LabeledImageDataset};
use crate::diffusion::{sample, shuffle, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::models::classifier::{build_classifier, ClassifierConfig, ClassifierModel};
use crate::models::denoiser::DenoiserConfig;
use crate::models::optim::{flat_grads, AdamW};
use crate::models::{ArchConfig, ModelCheckpoint, TrainingMeta};
use crate::privacy::{LedgerSnapshot, PrivacySpec};
use crate::quality::{client_profile, load_profiles, save_profiles, MagnitudeProfile};

/// Fraction of a client's privacy budget reserved for the DP magnitude
/// profile when FMF is enabled; the rest goes to DP-SGD.
pub const FMF_BUDGET_FRACTION: f64 = 0.05;

/// Batching used when the server samples from client generators.
const GENERATION_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientMethod {
    /// Train a class-conditioned denoiser (the generative protocol).
    Feddiff,
    /// Train a local classifier (input to the averaging/ensemble baselines).
    ClassifierLocal,
}

impl std::str::FromStr for ClientMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feddiff" => Ok(ClientMethod::Feddiff),
            "classifier-local" => Ok(ClientMethod::ClassifierLocal),
            other => Err(Error::Config(format!("unknown client method {other:?}"))),
        }
    }
}

/// Everything one client uploads, exactly once.
#[derive(Debug, Clone)]
pub struct ClientPayload {
    pub client_id: usize,
    pub checkpoint: ModelCheckpoint,
    /// Per-class sample counts of the shard the model was trained on.
    pub label_counts: Vec<usize>,
    pub magnitude_profile: Option<MagnitudeProfile>,
    pub ledger: Option<LedgerSnapshot>,
}

impl ClientPayload {
    pub fn sample_count(&self) -> usize {
        self.label_counts.iter().sum()
    }

    /// `client_<id>/checkpoint/...` + `label_counts.json` + optional
    /// `magnitude.bin`/`magnitude_meta.json` + optional `ledger.json`.
    pub fn save(&self, parent: &Path) -> Result<std::path::PathBuf> {
        let dir = parent.join(format!("client_{}", self.client_id));
        std::fs::create_dir_all(&dir)?;
        self.checkpoint.save(&dir.join("checkpoint"))?;
        std::fs::write(
            dir.join("label_counts.json"),
            serde_json::to_vec_pretty(&self.label_counts)?,
        )?;
        if let Some(profile) = &self.magnitude_profile {
            save_profiles(&dir, std::slice::from_ref(profile))?;
        }
        if let Some(ledger) = &self.ledger {
            std::fs::write(dir.join("ledger.json"), serde_json::to_vec_pretty(ledger)?)?;
        }
        Ok(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default();
        let client_id: usize = name
            .strip_prefix("client_")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::Validation(format!("payload directory {name:?} is not client_<id>"))
            })?;
        let checkpoint = ModelCheckpoint::load(&dir.join("checkpoint"))?;
        let label_counts: Vec<usize> =
            serde_json::from_slice(&std::fs::read(dir.join("label_counts.json"))?)?;
        let magnitude_profile = if dir.join("magnitude_meta.json").exists() {
            Some(
                load_profiles(dir)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Validation("empty magnitude profile file".into()))?,
            )
        } else {
            None
        };
        let ledger = if dir.join("ledger.json").exists() {
            Some(serde_json::from_slice(&std::fs::read(dir.join("ledger.json"))?)?)
        } else {
            None
        };
        Ok(Self {
            client_id,
            checkpoint,
            label_counts,
            magnitude_profile,
            ledger,
        })
    }
}

/// Origin of one synthetic sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub client_id: usize,
    /// FMF score once the sample has been through the filter.
    pub fmf_score: Option<f64>,
}

/// The server-assembled global training set G.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub data: LabeledImageDataset,
    pub provenance: Vec<Provenance>,
}

impl SyntheticDataset {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.provenance.len() != self.data.count {
            return Err(Error::Validation(format!(
                "{} provenance rows for {} samples",
                self.provenance.len(),
                self.data.count
            )));
        }
        Ok(())
    }

    /// Keep only the given rows (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.subset(indices, self.data.name.clone()),
            provenance: indices.iter().map(|&i| self.provenance[i].clone()).collect(),
        }
    }

    /// Dataset files plus `provenance.csv` (sample_index, client_id, fmf_score).
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        self.data.save(dir)?;
        let mut writer = csv::Writer::from_path(dir.join("provenance.csv"))
            .map_err(|e| Error::Ingest(e.to_string()))?;
        writer
            .write_record(["sample_index", "client_id", "fmf_score"])
            .map_err(|e| Error::Ingest(e.to_string()))?;
        for (i, p) in self.provenance.iter().enumerate() {
            writer
                .write_record([
                    i.to_string(),
                    p.client_id.to_string(),
                    p.fmf_score.map(|s| format!("{s:.6}")).unwrap_or_default(),
                ])
                .map_err(|e| Error::Ingest(e.to_string()))?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let data = LabeledImageDataset::load(dir, "custom")?;
        let mut reader = csv::Reader::from_path(dir.join("provenance.csv"))
            .map_err(|e| Error::Ingest(e.to_string()))?;
        let mut provenance = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Ingest(e.to_string()))?;
            let client_id: usize = record
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Ingest("bad provenance row".into()))?;
            let fmf_score = record.get(2).and_then(|s| s.parse::<f64>().ok());
            provenance.push(Provenance {
                client_id,
                fmf_score,
            });
        }
        let out = Self { data, provenance };
        out.validate()?;
        Ok(out)
    }
}

/// Run one client: train the method's model on the shard, return the single
/// upload. `fmf` enables the magnitude profile; its value is the share of the
/// privacy budget the profile takes (training gets the rest), used only when
/// `privacy` is set.
#[allow(clippy::too_many_arguments)]
pub fn run_client(
    shard: &LabeledImageDataset,
    client_id: usize,
    method: ClientMethod,
    denoiser_config: &DenoiserConfig,
    classifier_config: &ClassifierConfig,
    train_config: &TrainConfig,
    schedule: &NoiseSchedule,
    privacy: Option<&PrivacySpec>,
    fmf: Option<f64>,
) -> Result<(ClientPayload, Vec<crate::diffusion::LossRecord>)> {
    if shard.count == 0 {
        return Err(Error::Argument("client shard is empty".into()));
    }
    if let Some(share) = fmf {
        if !(0.0..1.0).contains(&share) || share <= 0.0 {
            return Err(Error::Config(format!("FMF budget share {share} outside (0, 1)")));
        }
    }
    let mut profile_rng = ChaCha12Rng::seed_from_u64(train_config.seed ^ 0x5f3759df);
    let (profile_eps, train_privacy) = match (fmf, privacy) {
        (Some(share), Some(spec)) => {
            let mut train_spec = spec.clone();
            train_spec.epsilon_target = spec.epsilon_target * (1.0 - share);
            (Some(spec.epsilon_target * share), Some(train_spec))
        }
        (_, spec) => (None, spec.cloned()),
    };
    let magnitude_profile = if fmf.is_some() {
        Some(client_profile(
            &shard.images,
            shard.count,
            shard.height,
            shard.width,
            shard.channels,
            client_id,
            profile_eps,
            &mut profile_rng,
        )?)
    } else {
        None
    };
    let (checkpoint, history) = match method {
        ClientMethod::Feddiff => crate::diffusion::train_local_diffusion(
            shard,
            denoiser_config,
            train_config,
            schedule,
            train_privacy.as_ref(),
        )?,
        ClientMethod::ClassifierLocal => {
            if train_privacy.is_some() {
                return Err(Error::Config(
                    "DP classifier-local training is not wired up".into(),
                ));
            }
            let model = train_classifier(shard, classifier_config, train_config)?;
            (
                ModelCheckpoint::from_classifier(
                    &model,
                    TrainingMeta {
                        epochs: train_config.epochs,
                        seed: train_config.seed,
                        ledger: None,
                    },
                )?,
                Vec::new(),
            )
        }
    };
    let ledger = checkpoint.meta.ledger.clone();
    Ok((
        ClientPayload {
            client_id,
            checkpoint,
            label_counts: shard.label_histogram(),
            magnitude_profile,
            ledger,
        },
        history,
    ))
}

/// Plain (non-DP) classifier training: AdamW on cross entropy.
pub fn train_classifier(
    data: &LabeledImageDataset,
    config: &ClassifierConfig,
    train_config: &TrainConfig,
) -> Result<ClassifierModel> {
    train_config.validate()?;
    if data.count == 0 {
        return Err(Error::Argument("cannot train a classifier on no data".into()));
    }
    let model = build_classifier(config, train_config.seed)?;
    let vars = model.store().vars();
    let mut optimizer = AdamW::new(train_config.lr, train_config.weight_decay);
    let mut rng = ChaCha12Rng::seed_from_u64(train_config.seed.wrapping_add(0x1234_5678));
    let device = Device::Cpu;
    for _epoch in 0..train_config.epochs {
        let mut order: Vec<usize> = (0..data.count).collect();
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(train_config.batch_size) {
            let x = batch_tensor(data, chunk, &device)?;
            let y: Vec<u32> = chunk.iter().map(|&i| data.labels[i]).collect();
            let y = Tensor::from_vec(y, (chunk.len(),), &device)?;
            let logits = model.forward(&x)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let value = loss.to_scalar::<f32>()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite classifier loss {value}")));
            }
            let grads = flat_grads(&loss.backward()?, &vars)?;
            optimizer.step(&vars, &grads)?;
        }
    }
    Ok(model)
}

/// HWC rows -> one NCHW batch tensor.
fn batch_tensor(data: &LabeledImageDataset, indices: &[usize], device: &Device) -> Result<Tensor> {
    let (h, w, c) = (data.height, data.width, data.channels);
    let mut buf = Vec::with_capacity(indices.len() * data.pixels_per_image());
    for &i in indices {
        let img = data.image(i);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    buf.push(img[(y * w + x) * c + ch]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(buf, (indices.len(), c, h, w), device)?)
}

/// Top-1 accuracy of the classifier over a dataset, batched.
pub fn evaluate_accuracy(model: &ClassifierModel, data: &LabeledImageDataset) -> Result<f64> {
    if data.count == 0 {
        return Err(Error::Argument("cannot evaluate on an empty set".into()));
    }
    let device = Device::Cpu;
    let all: Vec<usize> = (0..data.count).collect();
    let mut correct = 0usize;
    for chunk in all.chunks(256) {
        let x = batch_tensor(data, chunk, &device)?;
        let preds = model.predict(&x)?;
        correct += preds
            .iter()
            .zip(chunk.iter().map(|&i| data.labels[i]))
            .filter(|&(p, y)| *p == y)
            .count();
    }
    Ok(correct as f64 / data.count as f64)
}

/// Server-side generation: split `total_count` across clients by shard size
/// (largest remainder), draw labels from each client's empirical label
/// distribution, sample from its denoiser, record provenance.
pub fn server_generate(
    payloads: &[ClientPayload],
    total_count: usize,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if payloads.is_empty() {
        return Err(Error::Protocol("no client payloads".into()));
    }
    let total_samples: usize = payloads.iter().map(|p| p.sample_count()).sum();
    if total_samples == 0 {
        return Err(Error::Protocol("all clients report zero samples".into()));
    }
    for p in payloads {
        if !matches!(p.checkpoint.arch, ArchConfig::Denoiser(_)) {
            return Err(Error::Protocol(format!(
                "client {} did not upload a denoiser",
                p.client_id
            )));
        }
    }
    let proportions: Vec<f64> = payloads
        .iter()
        .map(|p| p.sample_count() as f64 / total_samples as f64)
        .collect();
    let quotas = largest_remainder_counts(&proportions, total_count);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut images = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    let mut provenance = Vec::new();
    let (mut height, mut width, mut channels, mut class_count) = (0, 0, 0, 0);
    for (payload, &quota) in payloads.iter().zip(&quotas) {
        let model = payload.checkpoint.into_denoiser()?;
        let cfg = &model.config;
        (height, width, channels) = (cfg.image_size, cfg.image_size, cfg.image_channels);
        class_count = class_count.max(cfg.class_count);
        let shard_total: usize = payload.label_counts.iter().sum();
        let batch_labels: Vec<u32> = (0..quota)
            .map(|_| draw_label(&payload.label_counts, shard_total, &mut rng))
            .collect();
        for chunk in batch_labels.chunks(GENERATION_BATCH) {
            let raw = sample(&model, chunk, schedule, steps, &mut rng)?;
            images.extend(from_model_range(&raw));
        }
        labels.extend(&batch_labels);
        provenance.extend(batch_labels.iter().map(|_| Provenance {
            client_id: payload.client_id,
            fmf_score: None,
        }));
    }
    let data = LabeledImageDataset::new(
        "custom", images, height, width, channels, labels, class_count,
    )?;
    let out = SyntheticDataset { data, provenance };
    out.validate()?;
    Ok(out)
}

fn draw_label<R: Rng>(counts: &[usize], total: usize, rng: &mut R) -> u32 {
    let mut pick = rng.gen_range(0..total);
    for (label, &c) in counts.iter().enumerate() {
        if pick < c {
            return label as u32;
        }
        pick -= c;
    }
    (counts.len() - 1) as u32
}

/// Train the global classifier on the synthetic set and report test accuracy.
pub fn train_global(
    synthetic: &SyntheticDataset,
    test: &LabeledImageDataset,
    config: &ClassifierConfig,
    train_config: &TrainConfig,
) -> Result<(ClassifierModel, f64)> {
    synthetic.validate()?;
    let hist = synthetic.data.label_histogram();
    for (label, &count) in hist.iter().enumerate() {
        if count == 0 {
            eprintln!("warning: class {label} has no synthetic samples; training proceeds without it");
        }
    }
    let model = train_classifier(&synthetic.data, config, train_config)?;
    let accuracy = evaluate_accuracy(&model, test)?;
    Ok((model, accuracy))
}

/// Parameter-wise weighted mean of the clients' classifiers, weights
/// n_c / sum(n_c).
pub fn fedavg_aggregate(payloads: &[ClientPayload]) -> Result<ClassifierModel> {
    let first = payloads
        .first()
        .ok_or_else(|| Error::Aggregation("no payloads to aggregate".into()))?;
    let ArchConfig::Classifier(_) = &first.checkpoint.arch else {
        return Err(Error::Aggregation("payloads do not hold classifiers".into()));
    };
    let total: usize = payloads.iter().map(|p| p.sample_count()).sum();
    if total == 0 {
        return Err(Error::Aggregation("all clients report zero samples".into()));
    }
    let mut mean: Vec<Vec<f64>> = first
        .checkpoint
        .params
        .iter()
        .map(|(_, data, _)| vec![0.0; data.len()])
        .collect();
    for p in payloads {
        if p.checkpoint.arch != first.checkpoint.arch {
            return Err(Error::Aggregation(format!(
                "client {} has a different architecture",
                p.client_id
            )));
        }
        let weight = p.sample_count() as f64 / total as f64;
        if p.checkpoint.params.len() != mean.len() {
            return Err(Error::Aggregation("parameter list mismatch".into()));
        }
        for (i, (name, data, shape)) in p.checkpoint.params.iter().enumerate() {
            let (ref_name, _, ref_shape) = &first.checkpoint.params[i];
            if name != ref_name || shape != ref_shape || data.len() != mean[i].len() {
                return Err(Error::Aggregation(format!("parameter {name} mismatch")));
            }
            for (a, &v) in mean[i].iter_mut().zip(data) {
                *a += weight * v as f64;
            }
        }
    }
    let averaged = ModelCheckpoint {
        arch: first.checkpoint.arch.clone(),
        params: first
            .checkpoint
            .params
            .iter()
            .zip(mean)
            .map(|((name, _, shape), acc)| {
                (
                    name.clone(),
                    acc.into_iter().map(|v| v as f32).collect(),
                    shape.clone(),
                )
            })
            .collect(),
        meta: TrainingMeta::default(),
    };
    averaged.into_classifier()
}

/// Per-row softmax probabilities of a logits tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let rows = logits.to_vec2::<f32>()?;
    Ok(rows
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let exps: Vec<f64> = row.iter().map(|&v| ((v as f64) - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        })
        .collect())
}

/// Ensemble baseline: average each member's softmax probabilities, predict
/// the argmax. Also returns the averaged probability rows.
pub fn ensemble_predict(
    payloads: &[ClientPayload],
    inputs: &LabeledImageDataset,
) -> Result<(Vec<u32>, Vec<Vec<f64>>)> {
    if payloads.is_empty() {
        return Err(Error::Aggregation("empty ensemble".into()));
    }
    let device = Device::Cpu;
    let all: Vec<usize> = (0..inputs.count).collect();
    let mut mean_probs: Vec<Vec<f64>> = Vec::new();
    for p in payloads {
        let model = p.checkpoint.into_classifier()?;
        let mut member_rows = Vec::with_capacity(inputs.count);
        for chunk in all.chunks(256) {
            let x = batch_tensor(inputs, chunk, &device)?;
            member_rows.extend(softmax_rows(&model.forward(&x)?)?);
        }
        if mean_probs.is_empty() {
            mean_probs = member_rows;
        } else {
            for (acc, row) in mean_probs.iter_mut().zip(member_rows) {
                if acc.len() != row.len() {
                    return Err(Error::Aggregation("ensemble members disagree on classes".into()));
                }
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
    }
    let k = payloads.len() as f64;
    for row in &mut mean_probs {
        for v in row.iter_mut() {
            *v /= k;
        }
    }
    let preds = mean_probs
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as u32)
                .unwrap_or(0)
        })
        .collect();
    Ok((preds, mean_probs))
}

/// Placeholder loaders for baselines with official external implementations;
/// results are consumed from payload-compatible directories, never retrained
/// here.
pub fn load_external_baseline(dir: &Path) -> Result<ClientPayload> {
    ClientPayload::load(dir)
}
