//! Rényi-DP accountant for the sampled Gaussian mechanism.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

/// Default order grid: 1.25, 1.5 and every integer from 2 to 512.
pub fn default_orders() -> Vec<f64> {
    let mut v = vec![1.25, 1.5];
    v.extend((2..=512).map(f64::from));
    v
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        // Cancellation below representable precision.
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

/// `ln erfc(x)`, with an asymptotic tail where `erfc` underflows.
fn log_erfc(x: f64) -> f64 {
    let e = erfc(x);
    if e > 1e-300 {
        return e.ln();
    }
    let x2 = x * x;
    -x2 - (x * std::f64::consts::PI.sqrt()).ln() + (1.0 - 0.5 / x2 + 0.75 / (x2 * x2)).ln()
}

fn ln_binomial(n: u64, k: u64) -> f64 {
    statrs::function::factorial::ln_binomial(n, k)
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let mut acc = f64::NEG_INFINITY;
    let (lq, l1q) = (q.ln(), (1.0 - q).ln());
    for k in 0..=alpha {
        let kf = k as f64;
        let term = ln_binomial(alpha, k)
            + kf * lq
            + (alpha - k) as f64 * l1q
            + (kf * kf - kf) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    acc
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut a0, mut a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let mut coef = 1.0f64;
    let mut i = 0u32;
    loop {
        if i > 0 {
            coef *= (alpha - f64::from(i) + 1.0) / f64::from(i);
        }
        let fi = f64::from(i);
        let j = alpha - fi;
        let log_coef = coef.abs().ln();
        let log_t0 = log_coef + fi * q.ln() + j * (1.0 - q).ln();
        let log_t1 = log_coef + j * q.ln() + fi * (1.0 - q).ln();
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / (std::f64::consts::SQRT_2 * sigma));
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / (std::f64::consts::SQRT_2 * sigma));
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if coef > 0.0 {
            a0 = log_add(a0, log_s0);
            a1 = log_add(a1, log_s1);
        } else {
            a0 = log_sub(a0, log_s0);
            a1 = log_sub(a1, log_s1);
        }
        i += 1;
        if log_s0.max(log_s1) < -30.0 || i > 10_000 {
            break;
        }
    }
    log_add(a0, a1)
}

/// RDP of one application of the Gaussian mechanism with noise multiplier
/// `z`, on a batch subsampled at rate `q`, at order `alpha > 1`.
pub fn rdp_subsampled_gaussian(q: f64, z: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if q == 1.0 {
        return alpha / (2.0 * z * z);
    }
    if !z.is_finite() {
        return 0.0;
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, z, alpha as u64)
    } else {
        log_a_frac(q, z, alpha)
    };
    (log_a / (alpha - 1.0)).max(0.0)
}

/// Accumulated RDP of one client's training, composed linearly over steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub orders: Vec<f64>,
    /// Accumulated ε(α) per order.
    pub rdp: Vec<f64>,
    pub steps: u64,
    pub sample_rate: f64,
    pub noise_multiplier: f64,
    #[serde(skip)]
    per_step: Vec<f64>,
}

impl PrivacyLedger {
    pub fn new(orders: &[f64], sample_rate: f64, noise_multiplier: f64) -> Result<Self> {
        if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0 && a.is_finite())) {
            return Err(Error::Privacy("RDP orders must be finite and > 1".into()));
        }
        if !(sample_rate > 0.0 && sample_rate <= 1.0) {
            return Err(Error::Privacy(format!("sample rate {sample_rate} outside (0, 1]")));
        }
        if !(noise_multiplier > 0.0) {
            return Err(Error::Privacy("noise multiplier must be > 0".into()));
        }
        let per_step = orders
            .iter()
            .map(|&a| rdp_subsampled_gaussian(sample_rate, noise_multiplier, a))
            .collect();
        Ok(PrivacyLedger {
            orders: orders.to_vec(),
            rdp: vec![0.0; orders.len()],
            steps: 0,
            sample_rate,
            noise_multiplier,
            per_step,
        })
    }

    /// Records `k` further mechanism applications.
    pub fn advance(&mut self, k: u64) {
        if self.per_step.len() != self.orders.len() {
            self.per_step = self
                .orders
                .iter()
                .map(|&a| rdp_subsampled_gaussian(self.sample_rate, self.noise_multiplier, a))
                .collect();
        }
        self.steps += k;
        for (r, p) in self.rdp.iter_mut().zip(&self.per_step) {
            *r = p * self.steps as f64;
        }
    }

    pub fn step(&mut self) {
        self.advance(1);
    }

    pub fn epsilon(&self, delta: f64) -> Result<(f64, f64)> {
        rdp_epsilon(self, delta)
    }
}

/// Converts accumulated RDP to `(ε, α*)` for the given δ, minimizing over
/// the ledger's orders with the tightened RDP-to-DP conversion
/// `ε = r − (ln δ + ln α)/(α − 1) + ln((α − 1)/α)`.
pub fn rdp_epsilon(ledger: &PrivacyLedger, delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Privacy(format!("delta {delta} outside (0, 1)")));
    }
    if ledger.steps == 0 {
        return Ok((0.0, ledger.orders[0]));
    }
    let mut best = (f64::INFINITY, ledger.orders[0]);
    for (&a, &r) in ledger.orders.iter().zip(&ledger.rdp) {
        let eps = r - (delta.ln() + a.ln()) / (a - 1.0) + ((a - 1.0) / a).ln();
        if eps < best.0 {
            best = (eps, a);
        }
    }
    Ok((best.0.max(0.0), best.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_full_batch_is_plain_gaussian() {
        for a in [1.5, 2.0, 7.0] {
            assert_eq!(rdp_subsampled_gaussian(1.0, 2.0, a), a / 8.0);
        }
    }

    #[test]
    fn test_fractional_order_between_neighbors() {
        let (q, z) = (0.01, 1.1);
        let r2 = rdp_subsampled_gaussian(q, z, 2.0);
        let r25 = rdp_subsampled_gaussian(q, z, 2.5);
        let r3 = rdp_subsampled_gaussian(q, z, 3.0);
        assert!(r2 < r25 && r25 < r3, "{r2} {r25} {r3}");
        // The fractional series evaluated at an integer order agrees with
        // the binomial expansion.
        let frac = log_a_frac(q, z, 3.0) / 2.0;
        assert!((frac - r3).abs() / r3 < 1e-9, "{frac} vs {r3}");
    }

    #[test]
    fn test_zero_steps_and_bad_delta() {
        let l = PrivacyLedger::new(&default_orders(), 0.1, 1.0).unwrap();
        assert_eq!(l.epsilon(1e-5).unwrap().0, 0.0);
        assert!(l.epsilon(0.0).is_err());
        assert!(l.epsilon(1.0).is_err());
        assert!(PrivacyLedger::new(&[1.0], 0.1, 1.0).is_err());
        assert!(PrivacyLedger::new(&[2.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn test_log_erfc_tail_continuous() {
        let x = 26.5;
        let direct = erfc(x).ln();
        assert!((log_erfc(x) - direct).abs() < 1e-3 || direct == f64::NEG_INFINITY);
        assert!(log_erfc(40.0) < -1500.0 && log_erfc(40.0).is_finite());
    }
}
