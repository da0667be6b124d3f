//! Command-line front end for the one-shot generative federation pipeline.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use fedgen::audit::{audit_generator, MemorizationConfig};
use fedgen::datasets::ingest::ingest;
use fedgen::datasets::{dirichlet_partition, load_dataset};
use fedgen::diffusion::{linear_schedule, TrainConfig};
use fedgen::federation::{server_generate, train_global, ClientPayload, SyntheticDataset};
use fedgen::harness::{
    apply_fmf, emit_table, load_payload_dirs, plot_accuracy_vs_epsilon, plot_score_histogram,
    resolve_data_root, run_experiment, stage_train_clients, ExperimentConfig, RunResult,
    TableCell, DEFAULT_CLASSIFIER_LR,
};
use fedgen::models::classifier::ClassifierConfig;
use fedgen::models::{ModelCheckpoint, TrainingMeta};
use fedgen::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedgen",
    about = "One-shot federated learning with client-side diffusion generators",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset name: fashionmnist | pathmnist | cifar10 | custom
    #[arg(long)]
    dataset: String,
    /// Dataset root directory [default: $FEDGEN_DATA_ROOT, then ./data]
    #[arg(long)]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw dataset download into the on-disk training format
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        /// Directory holding the raw files (IDX, CIFAR batches, npz, or an
        /// already-converted custom dataset)
        #[arg(long)]
        source: PathBuf,
    },
    /// Split the training set across clients with Dirichlet label skew
    Partition {
        #[command(flatten)]
        data: DataArgs,
        /// Number of clients [default: 5]
        #[arg(long, default_value_t = 5)]
        clients: usize,
        /// Dirichlet concentration; smaller is more skewed [default: 0.01]
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        /// Partition seed [default: 0]
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write partition.json
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every client for one seed and persist the upload payloads
    TrainClients {
        /// Experiment configuration (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Seed to run [default: first seed in the config]
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Server-side generation of the global synthetic dataset
    Generate {
        /// Directory holding the client_<id> payload directories
        #[arg(long)]
        clients: PathBuf,
        /// Number of samples to generate [default: sum of client counts]
        #[arg(long)]
        total: Option<usize>,
        /// Reverse-process steps S [default: 1000]
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// Forward-process length T the models were trained with [default: 1000]
        #[arg(long, default_value_t = 1000)]
        timesteps: usize,
        /// Generation seed [default: 0]
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for the synthetic dataset
        #[arg(long)]
        out: PathBuf,
    },
    /// Fourier magnitude filtering of a generated dataset
    Filter {
        /// Synthetic dataset directory (from `generate`)
        #[arg(long)]
        synthetic: PathBuf,
        /// Directory holding the client_<id> payload directories
        #[arg(long)]
        clients: PathBuf,
        /// Fraction removed per client [default: 0.05]
        #[arg(long, default_value_t = 0.05)]
        gamma: f64,
        /// Output directory for the filtered dataset + fmf_report.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the global classifier on a synthetic dataset
    TrainGlobal {
        #[command(flatten)]
        data: DataArgs,
        /// Synthetic dataset directory
        #[arg(long)]
        synthetic: PathBuf,
        /// Training epochs [default: 50]
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        /// Learning rate [default: 3e-4]
        #[arg(long, default_value_t = DEFAULT_CLASSIFIER_LR)]
        lr: f64,
        /// Batch size [default: 128]
        #[arg(long, default_value_t = 128)]
        batch_size: usize,
        /// Training seed [default: 0]
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the trained checkpoint
        #[arg(long)]
        out: PathBuf,
    },
    /// Memorization audit of one client's generator
    Audit {
        #[command(flatten)]
        data: DataArgs,
        /// The client_<id> payload directory
        #[arg(long)]
        client: PathBuf,
        /// Audit this many samples (oversampled 5x internally) [default: 200]
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Reverse-process steps S [default: 250]
        #[arg(long, default_value_t = 250)]
        steps: usize,
        /// Use only the first N training samples as the reference set
        #[arg(long)]
        subset: Option<usize>,
        /// Audit seed [default: 0]
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory for audit_report.json and plots
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end multi-seed experiment
    Run {
        /// Experiment configuration (TOML); omit with --preset
        #[arg(long)]
        config: Option<PathBuf>,
        /// Named preset: desk (10k FashionMNIST subset, 5 clients, small
        /// denoiser, 50 local epochs, S=250)
        #[arg(long)]
        preset: Option<String>,
        /// Override the output directory
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Assemble run results into a CSV table (and optional plots)
    Report {
        /// Result cells as <axis_value>=<run_result.json>, repeatable
        #[arg(long = "result", required = true)]
        results: Vec<String>,
        /// Axis the columns vary over (e.g. alpha, clients, epsilon, gamma)
        #[arg(long, default_value = "alpha")]
        axis: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
        /// Also draw accuracy-vs-epsilon lines (axis values must be numeric)
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Draw a log-scale histogram from an audit_report.json
        #[arg(long)]
        audit_histogram: Option<PathBuf>,
        /// Output path for the audit histogram plot
        #[arg(long)]
        histogram_out: Option<PathBuf>,
    },
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data, source } => {
            let root = resolve_data_root(data.data_root.as_deref());
            ingest(&data.dataset, &source, &root)?;
            println!("ingested {} under {}", data.dataset, root.display());
        }
        Command::Partition {
            data,
            clients,
            alpha,
            seed,
            out,
        } => {
            let root = resolve_data_root(data.data_root.as_deref());
            let train = load_dataset(&data.dataset, &root, "train")?;
            let shards = dirichlet_partition(&train, clients, alpha, seed)?;
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&out, serde_json::to_vec_pretty(&shards)?)?;
            for s in &shards {
                println!("client {}: {} samples {:?}", s.client_id, s.indices.len(), s.label_counts);
            }
            println!("wrote {}", out.display());
        }
        Command::TrainClients { config, seed } => {
            let cfg = ExperimentConfig::from_toml_file(&config)?;
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let dir = stage_train_clients(&cfg, seed)?;
            println!("client payloads under {}", dir.display());
        }
        Command::Generate {
            clients,
            total,
            steps,
            timesteps,
            seed,
            out,
        } => {
            let payloads = load_payload_dirs(&clients)?;
            let total =
                total.unwrap_or_else(|| payloads.iter().map(|p| p.sample_count()).sum());
            let schedule = linear_schedule(timesteps, 1e-4, 0.02)?;
            let synthetic = server_generate(&payloads, total, &schedule, steps, seed)?;
            synthetic.save(&out)?;
            println!("generated {} samples into {}", synthetic.data.count, out.display());
        }
        Command::Filter {
            synthetic,
            clients,
            gamma,
            out,
        } => {
            let data = SyntheticDataset::load(&synthetic)?;
            let payloads = load_payload_dirs(&clients)?;
            std::fs::create_dir_all(&out)?;
            let before = data.data.count;
            let filtered = apply_fmf(&payloads, data, gamma, &out)?;
            filtered.save(&out)?;
            println!(
                "kept {} of {} samples (gamma {gamma}); report at {}",
                filtered.data.count,
                before,
                out.join("fmf_report.csv").display()
            );
        }
        Command::TrainGlobal {
            data,
            synthetic,
            epochs,
            lr,
            batch_size,
            seed,
            out,
        } => {
            let root = resolve_data_root(data.data_root.as_deref());
            let test = load_dataset(&data.dataset, &root, "test")?;
            let g = SyntheticDataset::load(&synthetic)?;
            let cl_cfg = ClassifierConfig::resnet16(g.data.channels, g.data.class_count);
            let train_cfg = TrainConfig {
                epochs,
                batch_size,
                lr,
                weight_decay: 1e-4,
                seed,
            };
            let (model, accuracy) = train_global(&g, &test, &cl_cfg, &train_cfg)?;
            ModelCheckpoint::from_classifier(
                &model,
                TrainingMeta {
                    epochs,
                    seed,
                    ledger: None,
                },
            )?
            .save(&out)?;
            println!("test accuracy {accuracy:.4}; checkpoint at {}", out.display());
        }
        Command::Audit {
            data,
            client,
            count,
            steps,
            subset,
            seed,
            out,
        } => {
            let root = resolve_data_root(data.data_root.as_deref());
            let train_full = load_dataset(&data.dataset, &root, "train")?;
            let train = match subset {
                Some(n) => {
                    let keep: Vec<usize> = (0..n.min(train_full.count)).collect();
                    train_full.subset(&keep, train_full.name.clone())
                }
                None => train_full,
            };
            let payload = ClientPayload::load(&client)?;
            let model = payload.checkpoint.into_denoiser()?;
            let timesteps = model.config.timestep_count;
            let schedule = linear_schedule(timesteps, 1e-4, 0.02)?;
            let report = audit_generator(
                &model,
                &train,
                &schedule,
                steps.min(timesteps),
                count,
                &MemorizationConfig::default(),
                seed,
                Some(&out),
            )?;
            plot_score_histogram(&report.histogram, &out.join("score_histogram.png"))?;
            println!(
                "{} of {} samples flagged (tau {}), min score {:.4}; report at {}",
                report.flagged_count,
                report.scores.len(),
                report.config.tau,
                report.min_score,
                out.display()
            );
        }
        Command::Run {
            config,
            preset,
            output,
        } => {
            let mut cfg = match (&config, preset.as_deref()) {
                (Some(path), None) => ExperimentConfig::from_toml_file(path)?,
                (None, Some("desk")) => ExperimentConfig::desk_preset(),
                (Some(path), Some("desk")) => {
                    // preset first, file overrides on top
                    let mut base = toml::to_string(&ExperimentConfig::desk_preset())
                        .map_err(|e| Error::Config(e.to_string()))?;
                    base.push('\n');
                    base.push_str(&std::fs::read_to_string(path)?);
                    ExperimentConfig::from_toml_str(&base)?
                }
                (_, Some(other)) => {
                    return Err(Error::Config(format!("unknown preset {other:?}")))
                }
                (None, None) => {
                    return Err(Error::Config("pass --config and/or --preset desk".into()))
                }
            };
            if let Some(out) = output {
                cfg.output_dir = out;
            }
            let result = run_experiment(&cfg)?;
            for o in &result.per_seed {
                match (&o.accuracy, &o.error) {
                    (Some(a), _) => println!("seed {}: accuracy {a:.4} ({:.0}s)", o.seed, o.duration_secs),
                    (None, Some(e)) => println!("seed {}: failed: {e}", o.seed),
                    _ => {}
                }
            }
            println!("{}: {:.4} ± {:.4}", result.method, result.mean, result.std);
            println!("result at {}", cfg.output_dir.join("run_result.json").display());
        }
        Command::Report {
            results,
            axis,
            out,
            plot,
            audit_histogram,
            histogram_out,
        } => {
            let mut cells = Vec::new();
            for spec in &results {
                let (value, path) = spec.split_once('=').ok_or_else(|| {
                    Error::Argument(format!("--result wants <axis_value>=<path>, got {spec:?}"))
                })?;
                let r = RunResult::load(std::path::Path::new(path))?;
                cells.push(TableCell {
                    method: r.method.clone(),
                    axis_value: value.to_string(),
                    mean: r.mean,
                    std: r.std,
                });
            }
            emit_table(&axis, &cells, &out)?;
            println!("wrote {}", out.display());
            if let Some(plot_path) = plot {
                let mut by_method: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
                for c in &cells {
                    let x: f64 = c.axis_value.parse().map_err(|_| {
                        Error::Argument(format!("axis value {:?} is not numeric", c.axis_value))
                    })?;
                    match by_method.iter_mut().find(|(m, _)| *m == c.method) {
                        Some((_, pts)) => pts.push((x, c.mean)),
                        None => by_method.push((c.method.clone(), vec![(x, c.mean)])),
                    }
                }
                plot_accuracy_vs_epsilon(&by_method, &plot_path)?;
                println!("wrote {}", plot_path.display());
            }
            if let Some(report_path) = audit_histogram {
                let report: fedgen::audit::MemorizationReport =
                    serde_json::from_slice(&std::fs::read(&report_path)?)?;
                let out_png = histogram_out.unwrap_or_else(|| report_path.with_extension("png"));
                plot_score_histogram(&report.histogram, &out_png)?;
                println!("wrote {}", out_png.display());
            }
        }
    }
    Ok(())
}
