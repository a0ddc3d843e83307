//! Rényi-DP accounting for DP-SGD with Poisson-subsampled Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default RDP orders: the integers 2 through 64.
pub fn default_orders() -> Vec<u32> {
    (2..=64).collect()
}

/// Smallest δ for which the Gaussian mechanism with noise multiplier `sigma`
/// is (ε, δ)-DP under the classical tail bound: `0.8 · exp(−(σε)²/2)`.
pub fn gaussian_delta_bound(sigma: f64, epsilon: f64) -> f64 {
    0.8 * (-(sigma * epsilon).powi(2) / 2.0).exp()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Rényi divergence bound at integer order `alpha` for one step of the
/// sampled Gaussian mechanism with sampling rate `q` and noise multiplier
/// `sigma`:
///
/// `1/(α−1) · log Σ_{k=0}^{α} C(α,k) (1−q)^{α−k} q^k exp(k(k−1)/(2σ²))`
///
/// The sum is evaluated in log space.
pub fn sgm_rdp(q: f64, sigma: f64, alpha: u32) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("sampling rate {q} outside [0, 1]")));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid(format!("noise multiplier {sigma} must be positive")));
    }
    if alpha < 2 {
        return Err(Error::invalid(format!("RDP order {alpha} must be at least 2")));
    }
    if q == 0.0 {
        return Ok(0.0);
    }
    let a = alpha as f64;
    let (log_q, log_1mq) = (q.ln(), (-q).ln_1p());
    let mut log_binom = 0.0f64;
    let mut acc = f64::NEG_INFINITY;
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        let mut term = log_binom + kf * (kf - 1.0) / (2.0 * sigma * sigma);
        // 0 · log 0 is taken as 0 at the q = 1 boundary.
        if k > 0 {
            term += kf * log_q;
        }
        if k < alpha {
            term += (a - kf) * log_1mq;
        }
        acc = log_add_exp(acc, term);
    }
    let rdp = acc / (a - 1.0);
    if !rdp.is_finite() {
        return Err(Error::Overflow(format!(
            "RDP of the sampled Gaussian is not finite (q = {q}, σ = {sigma}, α = {alpha})"
        )));
    }
    // Rounding can leave a tiny negative value when q is near 0.
    Ok(rdp.max(0.0))
}

/// An (ε, δ) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpBudget {
    pub epsilon: f64,
    pub delta: f64,
}

/// Result of an RDP-to-(ε, δ) conversion with the minimising order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conversion {
    pub budget: DpBudget,
    pub order: u32,
}

/// Accumulated RDP over the order grid for a fixed (q, σ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpLedger {
    pub orders: Vec<u32>,
    pub epsilons: Vec<f64>,
    pub steps: u64,
    pub sampling_rate: f64,
    pub noise_multiplier: f64,
}

impl RdpLedger {
    pub fn new(sampling_rate: f64, noise_multiplier: f64) -> Result<Self> {
        Self::with_orders(sampling_rate, noise_multiplier, default_orders())
    }

    pub fn with_orders(sampling_rate: f64, noise_multiplier: f64, orders: Vec<u32>) -> Result<Self> {
        if orders.is_empty() || orders.iter().any(|a| *a < 2) {
            return Err(Error::invalid("RDP orders must be a nonempty list of integers >= 2"));
        }
        // Validates q and σ.
        sgm_rdp(sampling_rate, noise_multiplier, orders[0])?;
        Ok(RdpLedger {
            epsilons: vec![0.0; orders.len()],
            orders,
            steps: 0,
            sampling_rate,
            noise_multiplier,
        })
    }

    /// Adds `steps` more mechanism invocations (RDP composes additively).
    pub fn compose(mut self, steps: u64) -> Result<Self> {
        for (eps, alpha) in self.epsilons.iter_mut().zip(&self.orders) {
            *eps += steps as f64 * sgm_rdp(self.sampling_rate, self.noise_multiplier, *alpha)?;
        }
        self.steps += steps;
        Ok(self)
    }

    /// `ε = min_α [ε_RDP(α) + log(1/δ)/(α − 1)]`.
    pub fn to_dp(&self, delta: f64) -> Result<Conversion> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::invalid(format!("δ = {delta} must lie in (0, 1)")));
        }
        let log_inv_delta = -delta.ln();
        let mut best = Conversion {
            budget: DpBudget {
                epsilon: f64::INFINITY,
                delta,
            },
            order: self.orders[0],
        };
        for (eps, alpha) in self.epsilons.iter().zip(&self.orders) {
            let candidate = eps + log_inv_delta / (*alpha as f64 - 1.0);
            if candidate < best.budget.epsilon {
                best.budget.epsilon = candidate;
                best.order = *alpha;
            }
        }
        Ok(best)
    }
}

/// ε after `steps` steps at rate `q` and multiplier `sigma`, converted at `delta`.
pub fn epsilon_for(q: f64, sigma: f64, steps: u64, delta: f64) -> Result<f64> {
    Ok(RdpLedger::new(q, sigma)?.compose(steps)?.to_dp(delta)?.budget.epsilon)
}

pub const SIGMA_BRACKET: (f64, f64) = (0.3, 100.0);
pub const SIGMA_TOLERANCE: f64 = 1e-3;

/// Smallest noise multiplier in [`SIGMA_BRACKET`] (to within
/// [`SIGMA_TOLERANCE`]) whose composed guarantee meets `target_epsilon`.
pub fn calibrate_noise(target_epsilon: f64, delta: f64, q: f64, steps: u64) -> Result<f64> {
    if target_epsilon.is_nan() || target_epsilon <= 0.0 {
        return Err(Error::invalid("target ε must be positive"));
    }
    let (mut lo, mut hi) = SIGMA_BRACKET;
    if epsilon_for(q, lo, steps, delta)? <= target_epsilon {
        return Ok(lo);
    }
    let eps_hi = epsilon_for(q, hi, steps, delta)?;
    if eps_hi > target_epsilon {
        return Err(Error::Unattainable {
            lo,
            hi,
            epsilon_at_hi: eps_hi,
        });
    }
    // Invariant: lo violates the target, hi meets it.
    while hi - lo > SIGMA_TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if epsilon_for(q, mid, steps, delta)? <= target_epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_bound_values() {
        assert!((gaussian_delta_bound(1.0, 2.0) - 0.8 * (-2f64).exp()).abs() < 1e-15);
        assert!((gaussian_delta_bound(1.0, 2.0) - 0.108_268).abs() < 1e-6);
        assert_eq!(gaussian_delta_bound(1.0, 0.0), 0.8);
        assert_eq!(gaussian_delta_bound(1.0, 1e3), 0.0);
    }

    #[test]
    fn sgm_boundaries() {
        assert_eq!(sgm_rdp(0.0, 1.0, 5).unwrap(), 0.0);
        assert!((sgm_rdp(1.0, 1.0, 2).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sgm_hand_value() {
        let expected = (0.99f64 * 0.99 + 2.0 * 0.99 * 0.01 + 0.01 * 0.01 * std::f64::consts::E).ln();
        let got = sgm_rdp(0.01, 1.0, 2).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 1.718e-4).abs() < 1e-7);
    }

    #[test]
    fn sgm_rejects_bad_input_and_overflow() {
        assert!(sgm_rdp(1.5, 1.0, 2).is_err());
        assert!(sgm_rdp(0.5, 0.0, 2).is_err());
        assert!(sgm_rdp(0.5, 1.0, 1).is_err());
        assert!(matches!(sgm_rdp(0.5, 1e-160, 4), Err(Error::Overflow(_))));
    }

    #[test]
    fn conversion_hand_value() {
        let ledger = RdpLedger {
            orders: vec![2],
            epsilons: vec![1.0],
            steps: 1,
            sampling_rate: 1.0,
            noise_multiplier: 1.0,
        };
        let c = ledger.to_dp((-1f64).exp()).unwrap();
        assert_eq!(c.budget.epsilon, 2.0);
        assert_eq!(c.order, 2);
        assert!(ledger.to_dp(1.0).is_err());
    }

    #[test]
    fn composition_is_linear() {
        let zero = RdpLedger::new(0.1, 2.0).unwrap().compose(0).unwrap();
        assert!(zero.epsilons.iter().all(|e| *e == 0.0));
        let one = RdpLedger::new(0.1, 2.0).unwrap().compose(37).unwrap();
        let two = RdpLedger::new(0.1, 2.0).unwrap().compose(74).unwrap();
        for (a, b) in one.epsilons.iter().zip(&two.epsilons) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn calibration_without_sampling_returns_bracket_minimum() {
        assert_eq!(calibrate_noise(1.0, 1e-5, 0.0, 1000).unwrap(), SIGMA_BRACKET.0);
    }

    #[test]
    fn unattainable_target_reports_bracket() {
        let err = calibrate_noise(1e-4, 1e-10, 1.0, 100_000).unwrap_err();
        assert!(matches!(err, Error::Unattainable { lo, hi, .. } if lo == 0.3 && hi == 100.0));
    }
}
