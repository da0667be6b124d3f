//! Differentially private training primitives: Poisson subsampling, per-sample
//! clipping with noisy aggregation, an RDP accountant with noise calibration,
//! and the DP bounded mean used by magnitude filtering.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod accountant;
pub mod dpsgd;

pub use accountant::{calibrate_noise, default_rdp_orders, rdp_epsilon};
pub use dpsgd::{aggregate_clipped_gradients, per_sample_flat_grads};

/// Target budget and mechanism parameters for one client's DP training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon_target: f64,
    pub delta: f64,
    pub clip_norm: f64,
    /// Poisson inclusion probability per example per step.
    pub sample_rate: f64,
    pub noise_multiplier: f64,
}

impl PrivacySpec {
    pub fn new(epsilon_target: f64, delta: f64, clip_norm: f64, sample_rate: f64) -> Self {
        Self {
            epsilon_target,
            delta,
            clip_norm,
            sample_rate,
            noise_multiplier: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon_target <= 0.0
            || !(0.0..1.0).contains(&self.delta)
            || self.delta <= 0.0
            || self.clip_norm <= 0.0
            || !(0.0..=1.0).contains(&self.sample_rate)
            || self.sample_rate <= 0.0
        {
            return Err(Error::Config(format!("invalid privacy spec: {self:?}")));
        }
        Ok(())
    }
}

impl Default for PrivacySpec {
    fn default() -> Self {
        Self {
            epsilon_target: 10.0,
            delta: 1e-5,
            clip_norm: 1.0,
            sample_rate: 0.01,
            noise_multiplier: 0.0,
        }
    }
}

/// One batch of identically-parameterized subsampled-Gaussian steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismEvent {
    pub q: f64,
    pub sigma: f64,
    pub steps: usize,
}

/// Running record of mechanism events with derived spent budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub events: Vec<MechanismEvent>,
    pub rdp_orders: Vec<f64>,
    pub delta: f64,
}

impl PrivacyLedger {
    pub fn new(delta: f64) -> Self {
        Self {
            events: Vec::new(),
            rdp_orders: default_rdp_orders(),
            delta,
        }
    }

    /// Record `steps` steps of the subsampled Gaussian with parameters (q, sigma).
    pub fn record(&mut self, q: f64, sigma: f64, steps: usize) {
        if steps == 0 {
            return;
        }
        if let Some(last) = self.events.last_mut() {
            if last.q == q && last.sigma == sigma {
                last.steps += steps;
                return;
            }
        }
        self.events.push(MechanismEvent { q, sigma, steps });
    }

    pub fn total_steps(&self) -> usize {
        self.events.iter().map(|e| e.steps).sum()
    }

    pub fn spent_epsilon(&self, delta: f64) -> Result<f64> {
        if self.events.is_empty() {
            return Ok(0.0);
        }
        rdp_epsilon(&self.events, delta, &self.rdp_orders)
    }

    pub fn snapshot(&self) -> Result<LedgerSnapshot> {
        Ok(LedgerSnapshot {
            events: self.events.clone(),
            orders: self.rdp_orders.clone(),
            delta: self.delta,
            spent_epsilon: self.spent_epsilon(self.delta)?,
        })
    }
}

/// Serialized ledger state embedded in checkpoints and written to `ledger.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub events: Vec<MechanismEvent>,
    pub orders: Vec<f64>,
    pub delta: f64,
    pub spent_epsilon: f64,
}

impl LedgerSnapshot {
    pub fn to_ledger(&self) -> PrivacyLedger {
        PrivacyLedger {
            events: self.events.clone(),
            rdp_orders: self.orders.clone(),
            delta: self.delta,
        }
    }
}

/// Poisson batch: each index included independently with probability `q`.
/// Empty batches are allowed.
pub fn poisson_batch<R: Rng>(indices: &[usize], q: f64, rng: &mut R) -> Vec<usize> {
    assert!(q > 0.0 && q <= 1.0, "sample rate must be in (0, 1]");
    if q >= 1.0 {
        return indices.to_vec();
    }
    indices
        .iter()
        .copied()
        .filter(|_| rng.gen::<f64>() < q)
        .collect()
}

/// Laplace(0, scale) sample via inverse CDF.
pub fn laplace<R: Rng>(rng: &mut R, scale: f64) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// DP bounded mean: clamp values to [lower, upper], release
/// (sum + Lap((U-L)/eps_s)) / max(1, n + Lap(1/eps_c)) with the budget split
/// evenly between the sum and count queries (replace-one sensitivity).
pub fn dp_bounded_mean<R: Rng>(
    values: &[f64],
    lower: f64,
    upper: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<f64> {
    if lower >= upper {
        return Err(Error::Argument(format!(
            "bounded mean requires lower < upper, got [{lower}, {upper}]"
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::Argument("bounded mean epsilon must be positive".into()));
    }
    let eps_half = epsilon / 2.0;
    let sum: f64 = values.iter().map(|v| v.clamp(lower, upper)).sum();
    let noisy_sum = sum + laplace(rng, (upper - lower) / eps_half);
    let noisy_count = values.len() as f64 + laplace(rng, 1.0 / eps_half);
    Ok(noisy_sum / noisy_count.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn poisson_q1_returns_everything() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let idx: Vec<usize> = (0..17).collect();
        assert_eq!(poisson_batch(&idx, 1.0, &mut rng), idx);
    }

    #[test]
    fn poisson_inclusion_frequency() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let idx: Vec<usize> = (0..10).collect();
        let trials = 100_000;
        let mut counts = vec![0usize; 10];
        for _ in 0..trials {
            for i in poisson_batch(&idx, 0.5, &mut rng) {
                counts[i] += 1;
            }
        }
        for &c in &counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.5).abs() < 0.01, "inclusion frequency {freq}");
        }
    }

    #[test]
    fn poisson_pair_inclusion_independent() {
        // Chi-square test on the 2x2 co-inclusion table of indices (0, 1).
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let idx: Vec<usize> = (0..10).collect();
        let trials = 100_000usize;
        let mut table = [[0f64; 2]; 2];
        for _ in 0..trials {
            let batch = poisson_batch(&idx, 0.5, &mut rng);
            let a = batch.contains(&0) as usize;
            let b = batch.contains(&1) as usize;
            table[a][b] += 1.0;
        }
        let row: Vec<f64> = (0..2).map(|a| table[a][0] + table[a][1]).collect();
        let col: Vec<f64> = (0..2).map(|b| table[0][b] + table[1][b]).collect();
        let mut chi2 = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let expected = row[a] * col[b] / trials as f64;
                chi2 += (table[a][b] - expected).powi(2) / expected;
            }
        }
        // 1 dof: chi2 < 6.63 corresponds to p > 0.01.
        assert!(chi2 < 6.63, "chi2 = {chi2}");
    }

    #[test]
    fn bounded_mean_vanishing_noise() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let values = [1.0, 2.0, 3.0, 4.0];
        let m = dp_bounded_mean(&values, 0.0, 10.0, 1e9, &mut rng).unwrap();
        assert!((m - 2.5).abs() < 1e-3, "mean {m}");
    }

    #[test]
    fn bounded_mean_clamps() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let m = dp_bounded_mean(&[-5.0, 15.0], 0.0, 10.0, 1e9, &mut rng).unwrap();
        assert!((m - 5.0).abs() < 1e-3, "clamped mean {m}");
    }

    #[test]
    fn bounded_mean_rejects_bad_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        assert!(dp_bounded_mean(&[1.0], 2.0, 1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn laplace_noise_scale_matches() {
        // Empirical mean absolute deviation of Laplace(b) is b.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let scale = 10.0 / 0.5; // (U-L)/eps_s shape used by the bounded mean
        let trials = 10_000;
        let mad: f64 = (0..trials).map(|_| laplace(&mut rng, scale).abs()).sum::<f64>()
            / trials as f64;
        assert!(
            (mad / scale - 1.0).abs() < 0.1,
            "mean |noise| {mad} vs scale {scale}"
        );
    }

    #[test]
    fn ledger_snapshot_round_trip() {
        let mut ledger = PrivacyLedger::new(1e-5);
        ledger.record(0.1, 1.5, 10);
        ledger.record(0.1, 1.5, 5);
        ledger.record(0.2, 2.0, 3);
        assert_eq!(ledger.events.len(), 2);
        let snap = ledger.snapshot().unwrap();
        let json = serde_json::to_string(&snap).unwrap();
        let back: LedgerSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(back, snap);
        let re = back.to_ledger();
        assert_eq!(
            re.spent_epsilon(1e-5).unwrap(),
            ledger.spent_epsilon(1e-5).unwrap()
        );
    }
}
