//! DP-SGD mechanics: per-sample gradients, clipping, noisy aggregation.

use candle_core::{Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::models::optim::{flat_grads, AdamW};
use crate::privacy::{PrivacyLedger, PrivacySpec};

/// One backward pass per sample loss; each entry is the flat gradient of
/// every var for that sample.
pub fn per_sample_flat_grads(vars: &[Var], sample_losses: &[Tensor]) -> Result<Vec<Vec<Vec<f32>>>> {
    sample_losses
        .iter()
        .map(|loss| {
            let store = loss.backward()?;
            flat_grads(&store, vars)
        })
        .collect()
}

/// Clip each sample's global l2 norm to `clip_norm`, sum, add
/// N(0, sigma^2 clip_norm^2) per coordinate, divide by `expected_batch`.
pub fn aggregate_clipped_gradients<R: Rng>(
    per_sample: &[Vec<Vec<f32>>],
    clip_norm: f64,
    sigma: f64,
    expected_batch: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f32>>> {
    let first = per_sample
        .first()
        .ok_or_else(|| Error::Argument("empty per-sample gradient set".into()))?;
    let mut sum: Vec<Vec<f64>> = first.iter().map(|g| vec![0.0; g.len()]).collect();
    for sample in per_sample {
        let sq: f64 = sample
            .iter()
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum();
        if !sq.is_finite() {
            return Err(Error::Numeric(
                "non-finite per-sample gradient; step aborted".into(),
            ));
        }
        let norm = sq.sqrt();
        let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        debug_assert!(norm * scale <= clip_norm * (1.0 + 1e-9));
        for (acc, grad) in sum.iter_mut().zip(sample) {
            for (a, &g) in acc.iter_mut().zip(grad) {
                *a += g as f64 * scale;
            }
        }
    }
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma * clip_norm)
            .map_err(|e| Error::Numeric(e.to_string()))?;
        for acc in &mut sum {
            for a in acc.iter_mut() {
                *a += normal.sample(rng);
            }
        }
    }
    Ok(sum
        .into_iter()
        .map(|g| g.into_iter().map(|v| (v / expected_batch) as f32).collect())
        .collect())
}

/// One DP-SGD step over a Poisson batch's per-sample losses.
///
/// Computes per-sample gradients, clips, aggregates with noise, normalizes by
/// the expected batch size q*n, applies the update through the optimizer, and
/// records one mechanism event. Empty batches skip the update but still count
/// against the budget. Returns the applied gradient for inspection.
#[allow(clippy::too_many_arguments)]
pub fn dpsgd_step<R: Rng>(
    vars: &[Var],
    sample_losses: &[Tensor],
    spec: &PrivacySpec,
    dataset_size: usize,
    optimizer: &mut AdamW,
    ledger: &mut PrivacyLedger,
    rng: &mut R,
) -> Result<Option<Vec<Vec<f32>>>> {
    spec.validate()?;
    ledger.record(spec.sample_rate, spec.noise_multiplier, 1);
    if sample_losses.is_empty() {
        return Ok(None);
    }
    let per_sample = per_sample_flat_grads(vars, sample_losses)?;
    let expected_batch = (spec.sample_rate * dataset_size as f64).max(1e-12);
    let grad = aggregate_clipped_gradients(
        &per_sample,
        spec.clip_norm,
        spec.noise_multiplier,
        expected_batch,
        rng,
    )?;
    optimizer.step(vars, &grad)?;
    Ok(Some(grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng() -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(0)
    }

    #[test]
    fn single_sample_exact_rescale() {
        // gradient (3,4) has norm 5; clip 1 -> (0.6, 0.8)
        let per_sample = vec![vec![vec![3.0f32, 4.0]]];
        let g = aggregate_clipped_gradients(&per_sample, 1.0, 0.0, 1.0, &mut rng()).unwrap();
        assert!((g[0][0] - 0.6).abs() < 1e-7);
        assert!((g[0][1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn two_sample_clip_sum_average() {
        // (3,4) clips to (0.6,0.8); (0,1) has norm 1, untouched.
        // sum = (0.6, 1.8), expected batch 2 -> (0.3, 0.9).
        let per_sample = vec![vec![vec![3.0f32, 4.0]], vec![vec![0.0f32, 1.0]]];
        let g = aggregate_clipped_gradients(&per_sample, 1.0, 0.0, 2.0, &mut rng()).unwrap();
        assert!((g[0][0] - 0.3).abs() < 1e-7);
        assert!((g[0][1] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn sigma_zero_small_norms_is_plain_mean() {
        let per_sample = vec![
            vec![vec![0.1f32, -0.2], vec![0.05f32]],
            vec![vec![-0.3f32, 0.1], vec![0.15f32]],
        ];
        let g = aggregate_clipped_gradients(&per_sample, 10.0, 0.0, 2.0, &mut rng()).unwrap();
        assert!((g[0][0] - (-0.1)).abs() < 1e-6);
        assert!((g[0][1] - (-0.05)).abs() < 1e-6);
        assert!((g[1][0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let per_sample = vec![vec![vec![f32::NAN, 1.0]]];
        assert!(matches!(
            aggregate_clipped_gradients(&per_sample, 1.0, 0.0, 1.0, &mut rng()),
            Err(Error::Numeric(_))
        ));
    }
}
