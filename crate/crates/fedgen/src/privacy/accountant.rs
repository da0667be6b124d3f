//! RDP accountant for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step Renyi divergences accumulate additively over steps and convert to
//! (epsilon, delta) via epsilon = min over orders of RDP(order) +
//! ln(1/delta)/(order - 1). Orders are an integer grid, which keeps the
//! subsampled bound in closed binomial form.

use crate::error::{Error, Result};
use crate::privacy::MechanismEvent;

/// Default order grid: 2..=64 plus a sparse tail for very tight budgets.
pub fn default_rdp_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (2..=64).map(|a| a as f64).collect();
    orders.extend([80.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0, 1024.0]);
    orders
}

/// Per-step RDP of the subsampled Gaussian at integer order `alpha`.
///
/// For q = 1 this is the plain Gaussian value alpha / (2 sigma^2); for q < 1
/// the binomial expansion
/// RDP(alpha) = ln( sum_i C(alpha,i) q^i (1-q)^(alpha-i) exp((i^2-i)/(2 sigma^2)) ) / (alpha-1).
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: f64) -> f64 {
    debug_assert!(alpha >= 2.0 && alpha.fract() == 0.0, "integer orders only");
    if q >= 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    if q <= 0.0 {
        return 0.0;
    }
    let a = alpha as usize;
    let log_q = q.ln();
    let log_1q = (1.0 - q).ln();
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut log_terms = Vec::with_capacity(a + 1);
    let mut log_binom = 0.0; // ln C(alpha, 0)
    for i in 0..=a {
        let log_term =
            log_binom + i as f64 * log_q + (a - i) as f64 * log_1q + (i * i - i) as f64 * inv2s2;
        log_terms.push(log_term);
        if i < a {
            log_binom += ((a - i) as f64 / (i + 1) as f64).ln();
        }
    }
    let log_a = log_sum_exp(&log_terms);
    log_a / (alpha - 1.0)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Spent (epsilon, delta)-DP of the composed events at the given delta.
pub fn rdp_epsilon(events: &[MechanismEvent], delta: f64, orders: &[f64]) -> Result<f64> {
    if orders.is_empty() {
        return Err(Error::Config("empty RDP order grid".into()));
    }
    if !(0.0..1.0).contains(&delta) || delta <= 0.0 {
        return Err(Error::Argument(format!("delta {delta} outside (0, 1)")));
    }
    for e in events {
        if e.sigma <= 0.0 {
            return Err(Error::Argument(format!(
                "accountant requires sigma > 0, got {}",
                e.sigma
            )));
        }
    }
    if events.iter().all(|e| e.steps == 0) {
        return Ok(0.0);
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = f64::INFINITY;
    for &alpha in orders {
        let total_rdp: f64 = events
            .iter()
            .map(|e| e.steps as f64 * rdp_subsampled_gaussian(e.q, e.sigma, alpha))
            .sum();
        let eps = total_rdp + log_inv_delta / (alpha - 1.0);
        if eps < best {
            best = eps;
        }
    }
    Ok(best)
}

/// Binary-search the noise multiplier so that the budget spent after
/// `total_steps` steps lands within 1% below `epsilon_target`.
pub fn calibrate_noise(
    epsilon_target: f64,
    delta: f64,
    q: f64,
    total_steps: usize,
) -> Result<f64> {
    const SIGMA_LO: f64 = 1e-2;
    const SIGMA_HI: f64 = 1e2;
    if epsilon_target <= 0.0 || total_steps == 0 {
        return Err(Error::Calibration(format!(
            "need positive target and steps, got eps {epsilon_target}, steps {total_steps}"
        )));
    }
    let orders = default_rdp_orders();
    let eps_at = |sigma: f64| -> Result<f64> {
        rdp_epsilon(
            &[MechanismEvent {
                q,
                sigma,
                steps: total_steps,
            }],
            delta,
            &orders,
        )
    };
    if eps_at(SIGMA_HI)? > epsilon_target {
        return Err(Error::Calibration(format!(
            "even sigma = {SIGMA_HI} exceeds the target epsilon {epsilon_target}"
        )));
    }
    if eps_at(SIGMA_LO)? < epsilon_target {
        return Err(Error::Calibration(format!(
            "target epsilon {epsilon_target} is looser than sigma = {SIGMA_LO} provides"
        )));
    }
    let (mut lo, mut hi) = (SIGMA_LO, SIGMA_HI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let eps = eps_at(mid)?;
        if eps > epsilon_target {
            lo = mid;
        } else {
            hi = mid;
            if eps >= 0.99 * epsilon_target {
                return Ok(mid);
            }
        }
    }
    Err(Error::Calibration(
        "binary search failed to land within 1% below the target".into(),
    ))
}
