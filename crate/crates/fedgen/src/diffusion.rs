//! DDPM core: noise schedule, forward corruption, training loss, local client
//! training loop, and ancestral sampling.

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{to_model_range, LabeledImageDataset};
use crate::error::{Error, Result};
use crate::models::denoiser::{build_denoiser, ConditionalDenoiser, DenoiserConfig};
use crate::models::optim::{flat_grads, AdamW};
use crate::models::{ModelCheckpoint, TrainingMeta};
use crate::privacy::accountant::{calibrate_noise, default_rdp_orders, rdp_epsilon};
use crate::privacy::dpsgd::dpsgd_step;
use crate::privacy::{poisson_batch, MechanismEvent, PrivacyLedger, PrivacySpec};

/// Learning-rate grid searched by local training.
pub const LR_GRID: [f64; 4] = [3e-3, 1e-3, 3e-4, 1e-4];

/// Beta/alpha/alpha-bar sequences governing the forward and reverse processes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    /// beta[t-1] is the variance added at step t, strictly increasing.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// 1-based accessors matching the process index t in [1, T].
    pub fn beta_t(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
    pub fn alpha_t(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }
    pub fn alpha_bar_t(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::Argument(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps
            )));
        }
        Ok(())
    }
}

/// Linearly interpolated beta schedule with derived alpha products.
pub fn linear_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Config("schedule needs at least one timestep".into()));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start < beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let beta: Vec<f64> = if timesteps == 1 {
        vec![beta_start]
    } else {
        (0..timesteps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (timesteps - 1) as f64)
            .collect()
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(timesteps);
    let mut prod = 1.0;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule {
        timesteps,
        beta,
        alpha,
        alpha_bar,
    })
}

/// Default schedule: T=1000 linear 1e-4 -> 0.02.
pub fn default_schedule() -> NoiseSchedule {
    linear_schedule(1000, 1e-4, 0.02).expect("valid default parameters")
}

/// Closed form of iterating the one-step kernel:
/// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_diffuse(
    x0: &[f32],
    t: usize,
    epsilon: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>> {
    schedule.check_t(t)?;
    if x0.len() != epsilon.len() {
        return Err(Error::Argument(format!(
            "x0 has {} elements, epsilon {}",
            x0.len(),
            epsilon.len()
        )));
    }
    let ab = schedule.alpha_bar_t(t);
    let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(x0
        .iter()
        .zip(epsilon)
        .map(|(&x, &e)| sa * x + sb * e)
        .collect())
}

/// Anything that predicts the noise component of a corrupted image.
pub trait NoisePredictor {
    /// (B, C, H, W) noisy input -> (B, C, H, W) predicted noise.
    fn predict(&self, x: &Tensor, labels: &[u32], timesteps: &[usize]) -> Result<Tensor>;
    /// (channels, height, width) of one image.
    fn image_shape(&self) -> (usize, usize, usize);
}

impl NoisePredictor for ConditionalDenoiser {
    fn predict(&self, x: &Tensor, labels: &[u32], timesteps: &[usize]) -> Result<Tensor> {
        self.forward(x, labels, timesteps)
    }
    fn image_shape(&self) -> (usize, usize, usize) {
        (
            self.config.image_channels,
            self.config.image_size,
            self.config.image_size,
        )
    }
}

/// Per-sample noise-prediction losses for a batch with the draws fixed by the
/// caller. `x0` is flat (B, C, H, W) data in [-1, 1]; `epsilon` matches.
pub fn per_sample_losses_with(
    model: &dyn NoisePredictor,
    x0: &[f32],
    labels: &[u32],
    timesteps: &[usize],
    epsilon: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Vec<Tensor>> {
    let (c, h, w) = model.image_shape();
    let pixel = c * h * w;
    let batch = labels.len();
    if x0.len() != batch * pixel || epsilon.len() != batch * pixel || timesteps.len() != batch {
        return Err(Error::Argument("batch shape mismatch".into()));
    }
    let mut xt = Vec::with_capacity(x0.len());
    for i in 0..batch {
        xt.extend(forward_diffuse(
            &x0[i * pixel..(i + 1) * pixel],
            timesteps[i],
            &epsilon[i * pixel..(i + 1) * pixel],
            schedule,
        )?);
    }
    let device = Device::Cpu;
    let xt = Tensor::from_vec(xt, (batch, c, h, w), &device)?;
    let eps = Tensor::from_vec(epsilon.to_vec(), (batch, c, h, w), &device)?;
    let predicted = model.predict(&xt, labels, timesteps)?;
    let sq = (eps - predicted)?.sqr()?;
    (0..batch)
        .map(|i| Ok(sq.narrow(0, i, 1)?.mean_all()?))
        .collect()
}

/// Mean loss over the batch with the draws fixed by the caller.
pub fn diffusion_loss_with(
    model: &dyn NoisePredictor,
    x0: &[f32],
    labels: &[u32],
    timesteps: &[usize],
    epsilon: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let losses = per_sample_losses_with(model, x0, labels, timesteps, epsilon, schedule)?;
    let stacked = Tensor::stack(&losses, 0)?;
    Ok(stacked.mean_all()?)
}

/// Training loss: per sample draw t ~ U{1..T} and eps ~ N(0, I), return the
/// mean over batch and pixels of (eps - predicted)^2.
pub fn diffusion_loss<R: Rng>(
    model: &dyn NoisePredictor,
    x0: &[f32],
    labels: &[u32],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let (t, eps) = draw_loss_noise(model, labels.len(), schedule, rng);
    diffusion_loss_with(model, x0, labels, &t, &eps, schedule)
}

/// The random draws behind [`diffusion_loss`], exposed so DP training can
/// share them across per-sample losses.
pub fn draw_loss_noise<R: Rng>(
    model: &dyn NoisePredictor,
    batch: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> (Vec<usize>, Vec<f32>) {
    let (c, h, w) = model.image_shape();
    let pixel = c * h * w;
    let t: Vec<usize> = (0..batch)
        .map(|_| rng.gen_range(1..=schedule.timesteps))
        .collect();
    let eps: Vec<f32> = (0..batch * pixel)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    (t, eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !LR_GRID.iter().any(|&g| (self.lr - g).abs() < 1e-12) {
            return Err(Error::Config(format!(
                "learning rate {} not in the searched grid {:?}",
                self.lr, LR_GRID
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the per-client loss history CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub epsilon_spent: Option<f64>,
}

/// Train a denoiser on a shard dataset (pixels in [0,1], converted to model
/// range internally). With a privacy spec every step routes through DP-SGD
/// and the checkpoint embeds the final ledger.
pub fn train_local_diffusion(
    shard: &LabeledImageDataset,
    denoiser_config: &DenoiserConfig,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    privacy: Option<&PrivacySpec>,
) -> Result<(ModelCheckpoint, Vec<LossRecord>)> {
    config.validate()?;
    if shard.count == 0 {
        return Err(Error::Argument("cannot train on an empty shard".into()));
    }
    let model = build_denoiser(denoiser_config, config.seed)?;
    let vars = model.store().vars();
    let mut optimizer = AdamW::new(config.lr, config.weight_decay);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    let x_all = to_model_range(&shard.images);
    let pixel = shard.pixels_per_image();
    let n = shard.count;
    let mut history = Vec::new();

    let mut ledger = PrivacyLedger::new(privacy.map(|p| p.delta).unwrap_or(1e-5));
    let dp_spec = match privacy {
        Some(spec) => Some(prepare_dp_spec(spec, n, config)?),
        None => None,
    };

    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut step = 0usize;
    for _epoch in 0..config.epochs {
        match &dp_spec {
            None => {
                let mut order: Vec<usize> = (0..n).collect();
                shuffle(&mut order, &mut rng);
                for chunk in order.chunks(config.batch_size) {
                    let (x0, labels) = gather(&x_all, &shard.labels, chunk, pixel);
                    let loss = diffusion_loss(&model, &x0, &labels, schedule, &mut rng)?;
                    let loss_value = loss.to_scalar::<f32>()? as f64;
                    if !loss_value.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite loss {loss_value} at step {step}"
                        )));
                    }
                    let grads = flat_grads(&loss.backward()?, &vars)?;
                    optimizer.step(&vars, &grads)?;
                    step += 1;
                    history.push(LossRecord {
                        step,
                        loss: loss_value,
                        epsilon_spent: None,
                    });
                }
            }
            Some(spec) => {
                for _ in 0..steps_per_epoch {
                    let all: Vec<usize> = (0..n).collect();
                    let batch = poisson_batch(&all, spec.sample_rate, &mut rng);
                    let (x0, labels) = gather(&x_all, &shard.labels, &batch, pixel);
                    let mut loss_value = f64::NAN;
                    if batch.is_empty() {
                        ledger.record(spec.sample_rate, spec.noise_multiplier, 1);
                    } else {
                        let (t, eps) =
                            draw_loss_noise(&model, batch.len(), schedule, &mut rng);
                        let losses =
                            per_sample_losses_with(&model, &x0, &labels, &t, &eps, schedule)?;
                        let mean: f32 = losses
                            .iter()
                            .map(|l| l.to_scalar::<f32>())
                            .collect::<std::result::Result<Vec<_>, _>>()?
                            .iter()
                            .sum::<f32>()
                            / losses.len() as f32;
                        loss_value = mean as f64;
                        dpsgd_step(
                            &vars,
                            &losses,
                            spec,
                            n,
                            &mut optimizer,
                            &mut ledger,
                            &mut rng,
                        )?;
                    }
                    step += 1;
                    history.push(LossRecord {
                        step,
                        loss: loss_value,
                        epsilon_spent: Some(ledger.spent_epsilon(spec.delta)?),
                    });
                }
            }
        }
    }

    let meta = TrainingMeta {
        epochs: config.epochs,
        seed: config.seed,
        ledger: if dp_spec.is_some() {
            Some(ledger.snapshot()?)
        } else {
            None
        },
    };
    Ok((ModelCheckpoint::from_denoiser(&model, meta)?, history))
}

/// Resolve sample rate and noise multiplier; calibrate sigma when it is not
/// given, and fail early when a given sigma cannot afford the requested steps.
fn prepare_dp_spec(spec: &PrivacySpec, n: usize, config: &TrainConfig) -> Result<PrivacySpec> {
    let mut spec = spec.clone();
    spec.sample_rate = (config.batch_size as f64 / n as f64).min(1.0);
    let total_steps = config.epochs * n.div_ceil(config.batch_size);
    if total_steps == 0 {
        return Ok(spec);
    }
    if spec.noise_multiplier <= 0.0 {
        spec.noise_multiplier =
            calibrate_noise(spec.epsilon_target, spec.delta, spec.sample_rate, total_steps)?;
    } else {
        let orders = default_rdp_orders();
        let eps_for = |steps: usize| {
            rdp_epsilon(
                &[MechanismEvent {
                    q: spec.sample_rate,
                    sigma: spec.noise_multiplier,
                    steps,
                }],
                spec.delta,
                &orders,
            )
        };
        if eps_for(total_steps)? > spec.epsilon_target {
            let (mut lo, mut hi) = (0usize, total_steps);
            while lo < hi {
                let mid = (lo + hi + 1) / 2;
                if eps_for(mid)? <= spec.epsilon_target {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            return Err(Error::BudgetExhausted {
                spendable_steps: lo,
                requested_steps: total_steps,
            });
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn gather(
    x_all: &[f32],
    labels: &[u32],
    indices: &[usize],
    pixel: usize,
) -> (Vec<f32>, Vec<u32>) {
    let mut x = Vec::with_capacity(indices.len() * pixel);
    let mut y = Vec::with_capacity(indices.len());
    for &i in indices {
        x.extend_from_slice(&x_all[i * pixel..(i + 1) * pixel]);
        y.push(labels[i]);
    }
    (x, y)
}

/// Fisher-Yates off the caller's stream.
pub fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Ancestral sampling from pure noise, conditioned per sample on `labels`.
/// `steps` <= T selects an evenly strided subsequence of the schedule with
/// recomputed alpha-bar ratios; outputs are clamped to [-1, 1].
pub fn sample<R: Rng>(
    model: &dyn NoisePredictor,
    labels: &[u32],
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let (c, h, w) = model.image_shape();
    let start: Vec<f32> = (0..labels.len() * c * h * w)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    sample_from(model, &start, labels, schedule, steps, rng, true)
}

/// Reverse process from a caller-provided starting state. `add_noise = false`
/// disables the per-step variance (test hook).
pub fn sample_from<R: Rng>(
    model: &dyn NoisePredictor,
    x_start: &[f32],
    labels: &[u32],
    schedule: &NoiseSchedule,
    steps: usize,
    rng: &mut R,
    add_noise: bool,
) -> Result<Vec<f32>> {
    if steps == 0 {
        return Err(Error::Argument("steps must be >= 1".into()));
    }
    if steps > schedule.timesteps {
        return Err(Error::Argument(format!(
            "steps {steps} exceeds schedule length {}",
            schedule.timesteps
        )));
    }
    let (c, h, w) = model.image_shape();
    let batch = labels.len();
    let pixel = c * h * w;
    if x_start.len() != batch * pixel {
        return Err(Error::Argument("start state shape mismatch".into()));
    }
    // Evenly strided subsequence tau_1..tau_S of {1..T} ending at T.
    let taus: Vec<usize> = (1..=steps)
        .map(|s| ((s * schedule.timesteps) as f64 / steps as f64).round() as usize)
        .map(|t| t.max(1))
        .collect();
    let device = Device::Cpu;
    let mut x = x_start.to_vec();
    for s in (0..steps).rev() {
        let t = taus[s];
        let ab_t = schedule.alpha_bar_t(t);
        let ab_prev = if s == 0 {
            1.0
        } else {
            schedule.alpha_bar_t(taus[s - 1])
        };
        let alpha_eff = ab_t / ab_prev;
        let beta_eff = 1.0 - alpha_eff;
        let xt = Tensor::from_vec(x.clone(), (batch, c, h, w), &device)?;
        let predicted = model
            .predict(&xt, labels, &vec![t; batch])?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let inv_sqrt_alpha = (1.0 / alpha_eff.sqrt()) as f32;
        let noise_coef = (beta_eff / (1.0 - ab_t).sqrt()) as f32;
        let sigma = if s > 0 && add_noise {
            beta_eff.sqrt() as f32
        } else {
            0.0
        };
        for i in 0..x.len() {
            let mean = inv_sqrt_alpha * (x[i] - noise_coef * predicted[i]);
            let z: f32 = if sigma > 0.0 {
                rng.sample(StandardNormal)
            } else {
                0.0
            };
            x[i] = mean + sigma * z;
        }
    }
    for v in &mut x {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(x)
}

/// Write the per-client loss history CSV: columns step, loss, epsilon_spent.
pub fn write_loss_history(path: &std::path::Path, history: &[LossRecord]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Ingest(e.to_string()))?;
    writer
        .write_record(["step", "loss", "epsilon_spent"])
        .map_err(|e| Error::Ingest(e.to_string()))?;
    for r in history {
        writer
            .write_record([
                r.step.to_string(),
                format!("{:.6}", r.loss),
                r.epsilon_spent.map(|e| format!("{e:.6}")).unwrap_or_default(),
            ])
            .map_err(|e| Error::Ingest(e.to_string()))?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Predictor returning a constant value everywhere.
    pub(crate) struct ConstantPredictor {
        pub value: f32,
        pub shape: (usize, usize, usize),
    }

    impl NoisePredictor for ConstantPredictor {
        fn predict(&self, x: &Tensor, _labels: &[u32], _t: &[usize]) -> Result<Tensor> {
            Ok((x.zeros_like()? + self.value as f64)?)
        }
        fn image_shape(&self) -> (usize, usize, usize) {
            self.shape
        }
    }

    /// Predictor that replays a fixed noise tensor (a perfect denoiser for
    /// batches corrupted with exactly that noise).
    struct OraclePredictor {
        eps: Vec<f32>,
        shape: (usize, usize, usize),
    }

    impl NoisePredictor for OraclePredictor {
        fn predict(&self, x: &Tensor, _labels: &[u32], _t: &[usize]) -> Result<Tensor> {
            Tensor::from_vec(self.eps.clone(), x.dims().to_vec(), x.device())
                .map_err(Error::from)
        }
        fn image_shape(&self) -> (usize, usize, usize) {
            self.shape
        }
    }

    #[test]
    fn schedule_invariants() {
        let s = default_schedule();
        assert_eq!(s.timesteps, 1000);
        for t in 1..s.timesteps {
            assert!(s.beta[t] > s.beta[t - 1]);
            assert!(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        }
        assert!(s.alpha_bar_t(1000) < 1e-3);
        assert!((s.alpha_bar_t(1) - (1.0 - s.beta_t(1))).abs() < 1e-15);
    }

    #[test]
    fn schedule_alpha_bar_matches_product_oracle() {
        let s = default_schedule();
        let mut prod = 1.0f64;
        for t in 1..=1000 {
            prod *= 1.0 - s.beta_t(t);
        }
        assert!((s.alpha_bar_t(1000) - prod).abs() <= 1e-18 * prod.abs().max(1.0));
        assert!(s.alpha_bar_t(1000) < 1e-4, "default terminal alpha-bar ~1e-5");
    }

    #[test]
    fn single_step_schedule() {
        let s = linear_schedule(1, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta, vec![1e-4]);
        assert!((s.alpha_bar[0] - (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn bad_schedule_params_rejected() {
        assert!(linear_schedule(10, 0.02, 1e-4).is_err());
        assert!(linear_schedule(10, 0.0, 0.02).is_err());
        assert!(linear_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn forward_diffuse_zero_noise() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let x0 = [0.5f32, -0.25, 1.0];
        let xt = forward_diffuse(&x0, 5, &[0.0; 3], &s).unwrap();
        let sa = s.alpha_bar_t(5).sqrt() as f32;
        for (a, b) in xt.iter().zip(&x0) {
            assert_eq!(*a, sa * b);
        }
    }

    #[test]
    fn forward_diffuse_zero_signal() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let eps = [1.0f32, -2.0];
        let xt = forward_diffuse(&[0.0; 2], 7, &eps, &s).unwrap();
        let sb = (1.0 - s.alpha_bar_t(7)).sqrt() as f32;
        for (a, b) in xt.iter().zip(&eps) {
            assert_eq!(*a, sb * b);
        }
    }

    #[test]
    fn forward_diffuse_bad_t() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        assert!(forward_diffuse(&[0.0], 0, &[0.0], &s).is_err());
        assert!(forward_diffuse(&[0.0], 11, &[0.0], &s).is_err());
    }

    #[test]
    fn perfect_denoiser_gets_zero_loss() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let (_, eps) = {
            let eps: Vec<f32> = (0..2 * 4)
                .map(|_| rng.sample::<f32, _>(StandardNormal))
                .collect();
            ((), eps)
        };
        let model = OraclePredictor {
            eps: eps.clone(),
            shape: (1, 2, 2),
        };
        let x0 = vec![0.3f32; 8];
        let loss = diffusion_loss_with(&model, &x0, &[0, 1], &[3, 7], &eps, &s).unwrap();
        assert!(loss.to_scalar::<f32>().unwrap().abs() < 1e-10);
    }

    #[test]
    fn zero_model_loss_is_mean_eps_squared() {
        // Hand-computed MSE on a fixed 2x2 example.
        let s = linear_schedule(4, 1e-4, 0.02).unwrap();
        let model = ConstantPredictor {
            value: 0.0,
            shape: (1, 2, 2),
        };
        let eps = vec![1.0f32, -1.0, 2.0, 0.0];
        let expected = (1.0 + 1.0 + 4.0 + 0.0) / 4.0;
        let loss =
            diffusion_loss_with(&model, &[0.1, 0.2, 0.3, 0.4], &[0], &[2], &eps, &s).unwrap();
        assert!((loss.to_scalar::<f32>().unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn loss_nonnegative_and_finite() {
        let s = linear_schedule(8, 1e-4, 0.02).unwrap();
        let model = ConstantPredictor {
            value: 0.7,
            shape: (1, 2, 2),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..5 {
            let x0: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let loss = diffusion_loss(&model, &x0, &[0, 1], &s, &mut rng).unwrap();
            let v = loss.to_scalar::<f32>().unwrap();
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    #[test]
    fn deterministic_zero_model_sampling_closed_form() {
        // With predicted noise identically zero and variance disabled the
        // trajectory is x_{s-1} = x_s / sqrt(alpha_eff), so the final state is
        // x_start / sqrt(alpha_bar_T), then clamped.
        let s = linear_schedule(50, 1e-4, 0.02).unwrap();
        let model = ConstantPredictor {
            value: 0.0,
            shape: (1, 2, 2),
        };
        let x_start = vec![0.01f32, -0.02, 0.005, 0.0];
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let out = sample_from(&model, &x_start, &[0], &s, 50, &mut rng, false).unwrap();
        let scale = (1.0 / s.alpha_bar_t(50).sqrt()) as f32;
        for (o, x) in out.iter().zip(&x_start) {
            let expected = (x * scale).clamp(-1.0, 1.0);
            assert!((o - expected).abs() < 1e-4, "{o} vs {expected}");
        }
    }

    #[test]
    fn strided_sampling_shape_and_range() {
        let s = linear_schedule(100, 1e-4, 0.02).unwrap();
        let model = ConstantPredictor {
            value: 0.0,
            shape: (1, 4, 4),
        };
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for steps in [1usize, 10, 100] {
            let out = sample(&model, &[0, 1, 2], &s, steps, &mut rng).unwrap();
            assert_eq!(out.len(), 3 * 16);
            assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(sample(&model, &[0], &s, 101, &mut rng).is_err());
        assert!(sample(&model, &[0], &s, 0, &mut rng).is_err());
    }

    fn toy_shard(count: usize, classes: u32) -> LabeledImageDataset {
        // Class c is a flat image at intensity (c+1)/(classes+1).
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..count {
            let c = (i as u32) % classes;
            images.extend(std::iter::repeat((c + 1) as f32 / (classes + 1) as f32).take(64));
            labels.push(c);
        }
        LabeledImageDataset::new("custom", images, 8, 8, 1, labels, classes as usize).unwrap()
    }

    #[test]
    fn training_reduces_loss_on_toy_data() {
        let shard = toy_shard(16, 2);
        let dcfg = DenoiserConfig::tiny(1, 2, 8);
        let schedule = linear_schedule(8, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 7,
        };
        let (ckpt, history) = train_local_diffusion(&shard, &dcfg, &cfg, &schedule, None).unwrap();
        assert!(ckpt.meta.ledger.is_none());
        assert_eq!(history.len(), 30 * 2);
        let head: f64 = history[..10].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        let tail: f64 = history[history.len() - 10..].iter().map(|r| r.loss).sum::<f64>() / 10.0;
        assert!(
            tail < 0.5 * head,
            "smoothed loss did not halve: {head} -> {tail}"
        );
    }

    #[test]
    fn dp_training_records_budget() {
        let shard = toy_shard(12, 2);
        let dcfg = DenoiserConfig::tiny(1, 2, 4);
        let schedule = linear_schedule(4, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 6,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 3,
        };
        let spec = PrivacySpec::new(8.0, 1e-5, 1.0, 0.5);
        let (ckpt, history) =
            train_local_diffusion(&shard, &dcfg, &cfg, &schedule, Some(&spec)).unwrap();
        let ledger = ckpt.meta.ledger.expect("DP run embeds a ledger");
        assert_eq!(ledger.events.iter().map(|e| e.steps).sum::<usize>(), 4);
        assert!(ledger.spent_epsilon > 0.0 && ledger.spent_epsilon <= 8.0);
        // epsilon_spent is monotone over the run
        let eps: Vec<f64> = history.iter().filter_map(|r| r.epsilon_spent).collect();
        assert_eq!(eps.len(), 4);
        assert!(eps.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn infeasible_sigma_reports_spendable_steps() {
        let shard = toy_shard(12, 2);
        let dcfg = DenoiserConfig::tiny(1, 2, 4);
        let schedule = linear_schedule(4, 1e-4, 0.02).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 6,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 3,
        };
        let mut spec = PrivacySpec::new(0.5, 1e-5, 1.0, 0.5);
        spec.noise_multiplier = 1.0; // far too little noise for eps=0.5 over 100 steps
        let err = train_local_diffusion(&shard, &dcfg, &cfg, &schedule, Some(&spec)).unwrap_err();
        match err {
            Error::BudgetExhausted {
                spendable_steps,
                requested_steps,
            } => {
                assert_eq!(requested_steps, 100);
                assert!(spendable_steps < 100);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn lr_outside_grid_rejected() {
        let cfg = TrainConfig {
            lr: 2e-3,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
