//! Experiment orchestration: configuration, multi-seed runs, artifact
//! persistence, and CSV/plot emission.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{dirichlet_partition, load_dataset, LabeledImageDataset};
use crate::diffusion::{linear_schedule, write_loss_history, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::federation::{
    ensemble_predict, evaluate_accuracy, fedavg_aggregate, run_client, server_generate,
    ClientMethod, ClientPayload, SyntheticDataset,
};
use crate::models::classifier::ClassifierConfig;
use crate::models::denoiser::DenoiserConfig;
use crate::models::{count_flops, ArchConfig, ModelCheckpoint, ModelSize, TrainingMeta};
use crate::privacy::PrivacySpec;
use crate::quality::{fmf_filter, write_fmf_report};

pub const DEFAULT_DENOISER_LR: f64 = 1e-3;
pub const DEFAULT_CLASSIFIER_LR: f64 = 3e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Feddiff,
    Fedavg,
    Ensemble,
    /// Evaluate payload-compatible results produced by an external
    /// implementation; nothing is retrained here.
    ExternalBaselineImport,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feddiff" => Ok(Method::Feddiff),
            "fedavg" => Ok(Method::Fedavg),
            "ensemble" => Ok(Method::Ensemble),
            "external-baseline-import" => Ok(Method::ExternalBaselineImport),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Feddiff => "feddiff",
            Method::Fedavg => "fedavg",
            Method::Ensemble => "ensemble",
            Method::ExternalBaselineImport => "external-baseline-import",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FmfSettings {
    /// Fraction of each client's generated samples removed by the filter.
    pub gamma: f64,
    /// Share of the client privacy budget spent on the magnitude profile.
    pub epsilon_share: f64,
}

impl Default for FmfSettings {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            epsilon_share: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// fashionmnist | pathmnist | cifar10 | custom
    pub dataset: String,
    /// Dataset root; falls back to $FEDGEN_DATA_ROOT, then ./data.
    pub data_root: Option<PathBuf>,
    /// Use only the first N training samples (desk-scale runs).
    pub train_subset: Option<usize>,
    pub client_count: usize,
    /// Dirichlet concentration of the label-skew partition.
    pub alpha: f64,
    pub method: Method,
    pub local_epochs: usize,
    pub global_epochs: usize,
    pub seeds: Vec<u64>,
    pub privacy: Option<PrivacySpec>,
    pub fmf: Option<FmfSettings>,
    /// Forward-process length T the denoiser is trained with.
    pub timesteps: usize,
    /// Reverse-process steps S used at generation time (<= timesteps).
    pub sampling_steps: usize,
    pub model_size: ModelSize,
    pub batch_size: usize,
    pub denoiser_lr: f64,
    pub classifier_lr: f64,
    pub weight_decay: f64,
    pub output_dir: PathBuf,
    /// Payload directories for `external-baseline-import`.
    pub baseline_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "fashionmnist".to_string(),
            data_root: None,
            train_subset: None,
            client_count: 5,
            alpha: 0.01,
            method: Method::Feddiff,
            local_epochs: 200,
            global_epochs: 50,
            seeds: vec![0, 1, 2],
            privacy: None,
            fmf: None,
            timesteps: 1000,
            sampling_steps: 1000,
            model_size: ModelSize::Default,
            batch_size: 128,
            denoiser_lr: DEFAULT_DENOISER_LR,
            classifier_lr: DEFAULT_CLASSIFIER_LR,
            weight_decay: 1e-4,
            output_dir: PathBuf::from("output"),
            baseline_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        if self.client_count == 0 {
            return Err(Error::Config("client_count must be >= 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if let Some(fmf) = &self.fmf {
            if !(0.0..1.0).contains(&fmf.gamma) {
                return Err(Error::Config(format!("gamma {} outside [0, 1)", fmf.gamma)));
            }
            if !(0.0..1.0).contains(&fmf.epsilon_share) || fmf.epsilon_share <= 0.0 {
                return Err(Error::Config("epsilon_share must be in (0, 1)".into()));
            }
        }
        if self.sampling_steps == 0 || self.sampling_steps > self.timesteps {
            return Err(Error::Config(format!(
                "sampling_steps {} outside [1, {}]",
                self.sampling_steps, self.timesteps
            )));
        }
        if let Some(spec) = &self.privacy {
            if spec.epsilon_target <= 0.0 || spec.delta <= 0.0 {
                return Err(Error::Config("invalid privacy budget".into()));
            }
        }
        if self.method == Method::ExternalBaselineImport && self.baseline_dir.is_none() {
            return Err(Error::Config(
                "external-baseline-import needs baseline_dir".into(),
            ));
        }
        Ok(())
    }

    /// Shrunk configuration that finishes on one desk machine: 10k-sample
    /// FashionMNIST subset, 5 clients, 50 local epochs, the small denoiser,
    /// and 250 sampling steps.
    pub fn desk_preset() -> Self {
        Self {
            train_subset: Some(10_000),
            client_count: 5,
            local_epochs: 50,
            model_size: ModelSize::Small,
            sampling_steps: 250,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn resolved_data_root(&self) -> PathBuf {
        resolve_data_root(self.data_root.as_deref())
    }
}

/// Configured root, else $FEDGEN_DATA_ROOT, else ./data.
pub fn resolve_data_root(configured: Option<&Path>) -> PathBuf {
    if let Some(p) = configured {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("FEDGEN_DATA_ROOT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    /// Total client privacy spend (DP-SGD ledger plus profile share), max
    /// over clients.
    pub epsilon_spent: Option<f64>,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResourceStats {
    pub generator_params: Option<usize>,
    pub generator_mflops: Option<f64>,
    pub classifier_params: Option<usize>,
    pub classifier_mflops: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub per_seed: Vec<SeedOutcome>,
    /// Mean/std over the seeds that completed.
    pub mean: f64,
    pub std: f64,
    pub resources: ResourceStats,
}

impl RunResult {
    pub fn from_outcomes(
        method: Method,
        per_seed: Vec<SeedOutcome>,
        resources: ResourceStats,
    ) -> Self {
        let accs: Vec<f64> = per_seed.iter().filter_map(|o| o.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        Self {
            method: method.to_string(),
            per_seed,
            mean,
            std,
            resources,
        }
    }

    /// Recompute mean/std from the per-seed values and compare.
    pub fn check_statistics(&self) -> Result<()> {
        let accs: Vec<f64> = self.per_seed.iter().filter_map(|o| o.accuracy).collect();
        let (mean, std) = mean_std(&accs);
        if (mean - self.mean).abs() > 1e-9 || (std - self.std).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "stored mean/std ({}, {}) disagree with recomputed ({mean}, {std})",
                self.mean, self.std
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        r.check_statistics()?;
        Ok(r)
    }
}

/// Sample mean and standard deviation (n-1 denominator; 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (values.len() - 1) as f64;
    (mean, var.sqrt())
}

/// The denoiser architecture an experiment uses for a given dataset.
pub fn denoiser_config(cfg: &ExperimentConfig, data: &LabeledImageDataset) -> DenoiserConfig {
    let base = match cfg.model_size {
        ModelSize::Default => {
            DenoiserConfig::default_budget(data.channels, data.class_count, cfg.timesteps)
        }
        ModelSize::Small => {
            DenoiserConfig::small_budget(data.channels, data.class_count, cfg.timesteps)
        }
    };
    DenoiserConfig {
        image_size: data.height,
        ..base
    }
}

/// Run every seed of the experiment; per-seed failures are recorded and do
/// not abort the remaining seeds. Writes `run_result.json` in the output dir.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    config.validate()?;
    let (train, test) = load_experiment_data(config)?;
    let schedule = linear_schedule(config.timesteps, 1e-4, 0.02)?;

    let mut per_seed = Vec::new();
    let mut resources = ResourceStats::default();
    for &seed in &config.seeds {
        let start = Instant::now();
        let outcome = match run_seed(config, seed, &train, &test, &schedule, &mut resources) {
            Ok((accuracy, epsilon_spent)) => SeedOutcome {
                seed,
                accuracy: Some(accuracy),
                error: None,
                epsilon_spent,
                duration_secs: start.elapsed().as_secs_f64(),
            },
            Err(e) => SeedOutcome {
                seed,
                accuracy: None,
                error: Some(e.to_string()),
                epsilon_spent: None,
                duration_secs: start.elapsed().as_secs_f64(),
            },
        };
        per_seed.push(outcome);
    }
    let result = RunResult::from_outcomes(config.method, per_seed, resources);
    std::fs::create_dir_all(&config.output_dir)?;
    result.save(&config.output_dir.join("run_result.json"))?;
    Ok(result)
}

fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    train: &LabeledImageDataset,
    test: &LabeledImageDataset,
    schedule: &NoiseSchedule,
    resources: &mut ResourceStats,
) -> Result<(f64, Option<f64>)> {
    let seed_dir = config.output_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&seed_dir)?;

    let dn_cfg = denoiser_config(config, train);
    let cl_cfg = ClassifierConfig::resnet16(train.channels, train.class_count);

    let payloads = if config.method == Method::ExternalBaselineImport {
        load_payload_dirs(config.baseline_dir.as_deref().unwrap())?
    } else {
        train_clients_for_seed(config, seed, train, schedule, &dn_cfg, &cl_cfg, &seed_dir)?
    };
    assert_one_shot(&seed_dir.join("clients"), payloads.len())?;

    let epsilon_spent = spent_budget(config, &payloads);

    let accuracy = match config.method {
        Method::Feddiff => {
            resources.generator_params = Some(payloads[0].checkpoint.param_count());
            resources.generator_mflops = Some(count_flops(
                &payloads[0].checkpoint.arch,
                (train.height, train.width),
            ));
            let mut synthetic =
                server_generate(&payloads, train.count, schedule, config.sampling_steps, seed)?;
            if let Some(fmf) = &config.fmf {
                synthetic = apply_fmf(&payloads, synthetic, fmf.gamma, &seed_dir)?;
            }
            synthetic.save(&seed_dir.join("synthetic"))?;
            let global_cfg = TrainConfig {
                epochs: config.global_epochs,
                batch_size: config.batch_size,
                lr: config.classifier_lr,
                weight_decay: config.weight_decay,
                seed,
            };
            let (model, accuracy) =
                crate::federation::train_global(&synthetic, test, &cl_cfg, &global_cfg)?;
            resources.classifier_params = Some(model.store().param_count());
            resources.classifier_mflops = Some(count_flops(
                &ArchConfig::Classifier(cl_cfg.clone()),
                (train.height, train.width),
            ));
            ModelCheckpoint::from_classifier(
                &model,
                TrainingMeta {
                    epochs: config.global_epochs,
                    seed,
                    ledger: None,
                },
            )?
            .save(&seed_dir.join("global"))?;
            accuracy
        }
        Method::Fedavg => {
            let model = fedavg_aggregate(&payloads)?;
            resources.classifier_params = Some(model.store().param_count());
            resources.classifier_mflops = Some(count_flops(
                &payloads[0].checkpoint.arch,
                (train.height, train.width),
            ));
            evaluate_accuracy(&model, test)?
        }
        Method::Ensemble | Method::ExternalBaselineImport => {
            resources.classifier_params = Some(payloads[0].checkpoint.param_count());
            resources.classifier_mflops = Some(count_flops(
                &payloads[0].checkpoint.arch,
                (train.height, train.width),
            ));
            let (preds, _) = ensemble_predict(&payloads, test)?;
            let correct = preds
                .iter()
                .zip(&test.labels)
                .filter(|&(p, y)| p == y)
                .count();
            correct as f64 / test.count as f64
        }
    };

    #[derive(Serialize)]
    struct SeedSummary<'a> {
        seed: u64,
        method: &'a str,
        accuracy: f64,
        epsilon_spent: Option<f64>,
    }
    std::fs::write(
        seed_dir.join("summary.json"),
        serde_json::to_vec_pretty(&SeedSummary {
            seed,
            method: &config.method.to_string(),
            accuracy,
            epsilon_spent,
        })?,
    )?;
    Ok((accuracy, epsilon_spent))
}

/// Staged entry point for `fedgen train-clients`: load the dataset, partition
/// it for `seed`, train all clients, and persist their payloads. Returns the
/// clients directory.
pub fn stage_train_clients(config: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    config.validate()?;
    let (train, _test) = load_experiment_data(config)?;
    let schedule = linear_schedule(config.timesteps, 1e-4, 0.02)?;
    let dn_cfg = denoiser_config(config, &train);
    let cl_cfg = ClassifierConfig::resnet16(train.channels, train.class_count);
    let seed_dir = config.output_dir.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&seed_dir)?;
    train_clients_for_seed(config, seed, &train, &schedule, &dn_cfg, &cl_cfg, &seed_dir)?;
    Ok(seed_dir.join("clients"))
}

/// Train split (with the configured subset applied) and test split.
pub fn load_experiment_data(
    config: &ExperimentConfig,
) -> Result<(LabeledImageDataset, LabeledImageDataset)> {
    let root = config.resolved_data_root();
    let train_full = load_dataset(&config.dataset, &root, "train")?;
    let test = load_dataset(&config.dataset, &root, "test")?;
    let train = match config.train_subset {
        Some(n) => {
            let keep: Vec<usize> = (0..n.min(train_full.count)).collect();
            train_full.subset(&keep, train_full.name.clone())
        }
        None => train_full,
    };
    Ok((train, test))
}

#[allow(clippy::too_many_arguments)]
fn train_clients_for_seed(
    config: &ExperimentConfig,
    seed: u64,
    train: &LabeledImageDataset,
    schedule: &NoiseSchedule,
    dn_cfg: &DenoiserConfig,
    cl_cfg: &ClassifierConfig,
    seed_dir: &Path,
) -> Result<Vec<ClientPayload>> {
    let shards = dirichlet_partition(train, config.client_count, config.alpha, seed)?;
    std::fs::write(
        seed_dir.join("partition.json"),
        serde_json::to_vec_pretty(&shards)?,
    )?;
    let client_method = match config.method {
        Method::Feddiff => ClientMethod::Feddiff,
        Method::Fedavg | Method::Ensemble => ClientMethod::ClassifierLocal,
        Method::ExternalBaselineImport => unreachable!("handled by the caller"),
    };
    let lr = match client_method {
        ClientMethod::Feddiff => config.denoiser_lr,
        ClientMethod::ClassifierLocal => config.classifier_lr,
    };
    // Clients are independent; fan out over the worker pool.
    let results = crate::exec::map_items(&shards, |shard| {
        let data = train.subset(&shard.indices, train.name.clone());
        let train_cfg = TrainConfig {
            epochs: config.local_epochs,
            batch_size: config.batch_size,
            lr,
            weight_decay: config.weight_decay,
            seed: seed
                .wrapping_mul(1_000_003)
                .wrapping_add(shard.client_id as u64),
        };
        run_client(
            &data,
            shard.client_id,
            client_method,
            dn_cfg,
            cl_cfg,
            &train_cfg,
            schedule,
            config.privacy.as_ref(),
            config.fmf.map(|f| f.epsilon_share),
        )
    });
    let clients_dir = seed_dir.join("clients");
    let mut payloads = Vec::with_capacity(results.len());
    for result in results {
        let (payload, history) = result?;
        let dir = payload.save(&clients_dir)?;
        if !history.is_empty() {
            write_loss_history(&dir.join("loss_history.csv"), &history)?;
        }
        payloads.push(payload);
    }
    Ok(payloads)
}

/// Load every `client_<id>` payload directory under `dir`, sorted by path.
pub fn load_payload_dirs(dir: &Path) -> Result<Vec<ClientPayload>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("client_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Protocol(format!(
            "no client_<id> payload directories under {}",
            dir.display()
        )));
    }
    dirs.iter().map(|d| ClientPayload::load(d)).collect()
}

/// One-shot audit: every client directory holds exactly one checkpoint.
pub fn assert_one_shot(clients_dir: &Path, expected_clients: usize) -> Result<()> {
    if !clients_dir.exists() {
        // externally imported payloads live elsewhere; nothing to audit here
        return Ok(());
    }
    let mut seen = 0usize;
    for entry in std::fs::read_dir(clients_dir)? {
        let path = entry?.path();
        if !path.is_dir() {
            continue;
        }
        seen += 1;
        let checkpoints = std::fs::read_dir(&path)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir() && e.file_name() == "checkpoint")
            .count();
        if checkpoints != 1 {
            return Err(Error::Protocol(format!(
                "{} holds {checkpoints} checkpoints; one-shot requires exactly 1",
                path.display()
            )));
        }
    }
    if seen != expected_clients {
        return Err(Error::Protocol(format!(
            "{seen} payload directories for {expected_clients} clients"
        )));
    }
    Ok(())
}

/// Max over clients of DP-SGD ledger spend plus the profile's share.
fn spent_budget(config: &ExperimentConfig, payloads: &[ClientPayload]) -> Option<f64> {
    config.privacy.as_ref()?;
    let mut max_spent: Option<f64> = None;
    for p in payloads {
        let mut spent = p.ledger.as_ref().map(|l| l.spent_epsilon).unwrap_or(0.0);
        if let Some(profile) = &p.magnitude_profile {
            spent += profile.dp_epsilon_spent.unwrap_or(0.0);
        }
        max_spent = Some(max_spent.map_or(spent, |m: f64| m.max(spent)));
    }
    max_spent
}

/// Score and filter a synthetic dataset against the clients' magnitude
/// profiles; writes `fmf_report.csv` into `seed_dir` and returns the kept
/// subset with scores attached to provenance.
pub fn apply_fmf(
    payloads: &[ClientPayload],
    synthetic: SyntheticDataset,
    gamma: f64,
    seed_dir: &Path,
) -> Result<SyntheticDataset> {
    let profiles: Vec<_> = payloads
        .iter()
        .filter_map(|p| p.magnitude_profile.clone())
        .collect();
    if profiles.len() != payloads.len() {
        return Err(Error::Protocol(
            "FMF enabled but some clients sent no magnitude profile".into(),
        ));
    }
    let clients: Vec<usize> = synthetic.provenance.iter().map(|p| p.client_id).collect();
    let report = fmf_filter(&synthetic.data.images, &clients, &profiles, gamma)?;
    write_fmf_report(&seed_dir.join("fmf_report.csv"), &report)?;
    let mut filtered = synthetic;
    for r in &report.records {
        filtered.provenance[r.sample_index].fmf_score = Some(r.score);
    }
    Ok(filtered.subset(&report.kept_indices()))
}

/// One table cell: a method evaluated at one axis value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableCell {
    pub method: String,
    pub axis_value: String,
    pub mean: f64,
    pub std: f64,
}

/// CSV with rows = methods, columns = axis values, cells "mean±std".
/// Row/column order follows first appearance in `cells`.
pub fn emit_table(axis: &str, cells: &[TableCell], path: &Path) -> Result<()> {
    if cells.is_empty() {
        eprintln!("warning: no results to tabulate; skipping {}", path.display());
        return Ok(());
    }
    let mut methods: Vec<&str> = Vec::new();
    let mut values: Vec<&str> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method.as_str()) {
            methods.push(&c.method);
        }
        if !values.contains(&c.axis_value.as_str()) {
            values.push(&c.axis_value);
        }
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Ingest(e.to_string()))?;
    let mut header = vec![format!("method\\{axis}")];
    header.extend(values.iter().map(|v| v.to_string()));
    writer
        .write_record(&header)
        .map_err(|e| Error::Ingest(e.to_string()))?;
    for m in &methods {
        let mut row = vec![m.to_string()];
        for v in &values {
            let cell = cells
                .iter()
                .find(|c| c.method == *m && c.axis_value == *v)
                .map(|c| format!("{:.2}±{:.2}", 100.0 * c.mean, 100.0 * c.std))
                .unwrap_or_default();
            row.push(cell);
        }
        writer
            .write_record(&row)
            .map_err(|e| Error::Ingest(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

mod plots {
    use super::*;
    use plotters::prelude::*;
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::Once;

    static FONT_INIT: Once = Once::new();
    static FONT_OK: AtomicBool = AtomicBool::new(false);

    /// Register a system TTF with plotters once; plots are skipped when no
    /// font can be found (headless minimal images).
    fn ensure_font() -> bool {
        FONT_INIT.call_once(|| {
            let candidates = [
                "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/dejavu/DejaVuSans.ttf",
                "/usr/share/fonts/TTF/DejaVuSans.ttf",
            ];
            for path in candidates {
                if let Ok(bytes) = std::fs::read(path) {
                    let leaked: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                    if plotters::style::register_font(
                        "sans-serif",
                        plotters::style::FontStyle::Normal,
                        leaked,
                    )
                    .is_ok()
                    {
                        FONT_OK.store(true, Ordering::Release);
                        return;
                    }
                }
            }
        });
        FONT_OK.load(Ordering::Acquire)
    }

    /// Accuracy (fraction) against the privacy budget for several series
    /// (e.g. with and without FMF).
    pub fn plot_accuracy_vs_epsilon(
        series: &[(String, Vec<(f64, f64)>)],
        path: &Path,
    ) -> Result<()> {
        if !ensure_font() {
            eprintln!("warning: no usable font found; skipping {}", path.display());
            return Ok(());
        }
        let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
        if points.is_empty() {
            eprintln!("warning: empty series; skipping {}", path.display());
            return Ok(());
        }
        let x_max = points.iter().map(|p| p.0).fold(0.0, f64::max) * 1.1;
        let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
            let backend = BitMapBackend::new(path, (800, 600)).into_drawing_area();
            backend.fill(&WHITE)?;
            let mut chart = ChartBuilder::on(&backend)
                .margin(20)
                .x_label_area_size(40)
                .y_label_area_size(50)
                .caption("accuracy vs privacy budget", ("sans-serif", 24))
                .build_cartesian_2d(0.0..x_max.max(1.0), 0.0..1.0)?;
            chart
                .configure_mesh()
                .x_desc("epsilon")
                .y_desc("accuracy")
                .draw()?;
            for (i, (label, pts)) in series.iter().enumerate() {
                let color = Palette99::pick(i).to_rgba();
                let mut sorted = pts.clone();
                sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                chart
                    .draw_series(LineSeries::new(sorted.iter().cloned(), color.clone()))?
                    .label(label.clone())
                    .legend(move |(x, y)| {
                        PathElement::new(vec![(x, y), (x + 16, y)], color.clone())
                    });
                chart.draw_series(
                    sorted
                        .iter()
                        .map(|&(x, y)| Circle::new((x, y), 4, Palette99::pick(i).filled())),
                )?;
            }
            chart
                .configure_series_labels()
                .border_style(BLACK)
                .background_style(WHITE.mix(0.8))
                .draw()?;
            backend.present()?;
            Ok(())
        };
        draw().map_err(|e| Error::Ingest(format!("plotting {}: {e}", path.display())))
    }

    /// Log-scale histogram of audit scores, (bin lower edge, count) pairs.
    pub fn plot_score_histogram(hist: &[(f64, usize)], path: &Path) -> Result<()> {
        if !ensure_font() {
            eprintln!("warning: no usable font found; skipping {}", path.display());
            return Ok(());
        }
        if hist.is_empty() {
            eprintln!("warning: empty histogram; skipping {}", path.display());
            return Ok(());
        }
        let width = if hist.len() > 1 {
            hist[1].0 - hist[0].0
        } else {
            1.0
        };
        let x_max = hist.last().unwrap().0 + width;
        let y_max = hist.iter().map(|&(_, c)| c).max().unwrap_or(1).max(1) as f64;
        let draw = || -> std::result::Result<(), Box<dyn std::error::Error>> {
            let backend = BitMapBackend::new(path, (800, 600)).into_drawing_area();
            backend.fill(&WHITE)?;
            let mut chart = ChartBuilder::on(&backend)
                .margin(20)
                .x_label_area_size(40)
                .y_label_area_size(60)
                .caption("memorization score histogram", ("sans-serif", 24))
                .build_cartesian_2d(0.0..x_max, (0.5..y_max * 2.0).log_scale())?;
            chart
                .configure_mesh()
                .x_desc("score")
                .y_desc("count (log)")
                .draw()?;
            chart.draw_series(hist.iter().filter(|&&(_, c)| c > 0).map(|&(lo, c)| {
                Rectangle::new(
                    [(lo, 0.5), (lo + width, c as f64)],
                    BLUE.mix(0.5).filled(),
                )
            }))?;
            backend.present()?;
            Ok(())
        };
        draw().map_err(|e| Error::Ingest(format!("plotting {}: {e}", path.display())))
    }
}

pub use plots::{plot_accuracy_vs_epsilon, plot_score_histogram};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_with_three_seeds() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds.len(), 3);
        assert_eq!(cfg.local_epochs, 200);
        assert_eq!(cfg.global_epochs, 50);
        assert_eq!(cfg.sampling_steps, 1000);
    }

    #[test]
    fn desk_preset_shrinks_the_run() {
        let cfg = ExperimentConfig::desk_preset();
        cfg.validate().unwrap();
        assert_eq!(cfg.train_subset, Some(10_000));
        assert_eq!(cfg.client_count, 5);
        assert_eq!(cfg.local_epochs, 50);
        assert_eq!(cfg.model_size, ModelSize::Small);
        assert_eq!(cfg.sampling_steps, 250);
    }

    #[test]
    fn toml_round_trip_with_overrides() {
        let text = r#"
            dataset = "fashionmnist"
            client_count = 3
            alpha = 0.5
            method = "fedavg"
            seeds = [7]
            sampling_steps = 100
            timesteps = 200

            [fmf]
            gamma = 0.1
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.method, Method::Fedavg);
        assert_eq!(cfg.client_count, 3);
        assert_eq!(cfg.fmf.unwrap().gamma, 0.1);
        // unset fields keep defaults
        assert_eq!(cfg.fmf.unwrap().epsilon_share, 0.05);
        assert_eq!(cfg.global_epochs, 50);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.client_count = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.fmf = Some(FmfSettings {
            gamma: 1.0,
            epsilon_share: 0.05,
        });
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.sampling_steps = cfg.timesteps + 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn mean_std_hand_example() {
        let (m, s) = mean_std(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-12);
        assert!((s - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn run_result_statistics_invariant() {
        let outcomes = vec![
            SeedOutcome {
                seed: 0,
                accuracy: Some(0.7),
                error: None,
                epsilon_spent: None,
                duration_secs: 1.0,
            },
            SeedOutcome {
                seed: 1,
                accuracy: None,
                error: Some("boom".into()),
                epsilon_spent: None,
                duration_secs: 0.5,
            },
            SeedOutcome {
                seed: 2,
                accuracy: Some(0.9),
                error: None,
                epsilon_spent: None,
                duration_secs: 1.2,
            },
        ];
        let r = RunResult::from_outcomes(Method::Feddiff, outcomes, ResourceStats::default());
        r.check_statistics().unwrap();
        assert!((r.mean - 0.8).abs() < 1e-12);
        let mut broken = r.clone();
        broken.mean += 0.01;
        assert!(broken.check_statistics().is_err());
    }

    #[test]
    fn table_assembly_matches_hand_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cells = vec![
            TableCell {
                method: "feddiff".into(),
                axis_value: "0.01".into(),
                mean: 0.8689,
                std: 0.0034,
            },
            TableCell {
                method: "fedavg".into(),
                axis_value: "0.01".into(),
                mean: 0.4373,
                std: 0.0237,
            },
            TableCell {
                method: "feddiff".into(),
                axis_value: "1.0".into(),
                mean: 0.9,
                std: 0.0,
            },
        ];
        let path = dir.path().join("table.csv");
        emit_table("alpha", &cells, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "method\\alpha,0.01,1.0");
        assert_eq!(lines[1], "feddiff,86.89±0.34,90.00±0.00");
        assert_eq!(lines[2], "fedavg,43.73±2.37,");
    }

    #[test]
    fn data_root_resolution_order() {
        let explicit = resolve_data_root(Some(Path::new("/tmp/explicit")));
        assert_eq!(explicit, PathBuf::from("/tmp/explicit"));
        std::env::set_var("FEDGEN_DATA_ROOT", "/tmp/from_env");
        assert_eq!(resolve_data_root(None), PathBuf::from("/tmp/from_env"));
        std::env::remove_var("FEDGEN_DATA_ROOT");
        assert_eq!(resolve_data_root(None), PathBuf::from("data"));
    }
}
