//! Rényi-DP accounting for compositions of Poisson-subsampled Gaussian
//! mechanisms, with conversion to `(epsilon, delta)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Integer orders 2..=64 followed by the fractional orders below 2.
pub fn default_orders() -> Vec<f64> {
    let mut orders = vec![1.25, 1.5, 1.75];
    orders.extend((2..=64).map(|a| a as f64));
    orders
}

/// RDP of the Poisson-subsampled Gaussian mechanism with sensitivity one.
///
/// Integer orders use the binomial expansion in log space. A fractional order
/// is bounded by the next integer order, which is valid because RDP is
/// nondecreasing in the order.
pub fn rdp_sampled_gaussian(q: f64, sigma: f64, order: f64) -> f64 {
    assert!(q > 0.0 && q <= 1.0, "sampling rate must lie in (0, 1]");
    assert!(order > 1.0, "Rényi order must exceed 1");
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    let alpha = order.ceil();
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let a = alpha as u64;
    let ln_q = q.ln();
    let ln_1mq = (-q).ln_1p();
    let mut terms = Vec::with_capacity(a as usize + 1);
    let mut ln_binom = 0.0f64;
    for k in 0..=a {
        if k > 0 {
            ln_binom += ((a - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        terms.push(
            ln_binom + kf * ln_q + (alpha - kf) * ln_1mq + (kf * kf - kf) / (2.0 * sigma * sigma),
        );
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_a = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    (log_a / (alpha - 1.0)).max(0.0)
}

/// How accumulated RDP is turned into an `(epsilon, delta)` guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conversion {
    /// `rdp + log(1/delta) / (alpha - 1)`.
    Classic,
    /// `rdp - (log(delta) + log(alpha)) / (alpha - 1) + log((alpha - 1) / alpha)`,
    /// the tighter bound used by common DP-SGD libraries.
    Improved,
}

/// One homogeneous run of sampled Gaussian releases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyEvent {
    pub q: f64,
    pub sigma: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    orders: Vec<f64>,
    rdp: Vec<f64>,
    events: Vec<PrivacyEvent>,
}

impl Default for AccountantState {
    fn default() -> Self {
        AccountantState::new()
    }
}

impl AccountantState {
    pub fn new() -> Self {
        AccountantState::with_orders(default_orders()).expect("default orders are valid")
    }

    pub fn with_orders(mut orders: Vec<f64>) -> Result<Self> {
        if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0 && a.is_finite())) {
            return Err(Error::config("Rényi orders must be finite and exceed 1"));
        }
        orders.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        orders.dedup();
        let rdp = vec![0.0; orders.len()];
        Ok(AccountantState {
            orders,
            rdp,
            events: Vec::new(),
        })
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    pub fn events(&self) -> &[PrivacyEvent] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Add `steps` releases of the sampled Gaussian with rate `q` and noise
    /// multiplier `sigma`.
    pub fn compose(&mut self, q: f64, sigma: f64, steps: usize) {
        if steps == 0 {
            return;
        }
        for (r, &a) in self.rdp.iter_mut().zip(&self.orders) {
            *r += steps as f64 * rdp_sampled_gaussian(q, sigma, a);
        }
        match self
            .events
            .iter_mut()
            .find(|e| e.q.to_bits() == q.to_bits() && e.sigma.to_bits() == sigma.to_bits())
        {
            Some(e) => e.steps += steps,
            None => self.events.push(PrivacyEvent { q, sigma, steps }),
        }
    }

    pub fn composed(mut self, q: f64, sigma: f64, steps: usize) -> Self {
        self.compose(q, sigma, steps);
        self
    }

    /// Smallest epsilon over the order grid with the improved conversion,
    /// together with the minimizing order.
    pub fn to_epsilon(&self, delta: f64) -> Result<(f64, f64)> {
        self.to_epsilon_with(delta, Conversion::Improved)
    }

    pub fn to_epsilon_with(&self, delta: f64, conversion: Conversion) -> Result<(f64, f64)> {
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::config(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        if self.events.is_empty() {
            return Err(Error::EmptyAccountant);
        }
        let mut best = (f64::INFINITY, self.orders[0]);
        for (&r, &a) in self.rdp.iter().zip(&self.orders) {
            let eps = match conversion {
                Conversion::Classic => r + (1.0 / delta).ln() / (a - 1.0),
                Conversion::Improved => {
                    r - (delta.ln() + a.ln()) / (a - 1.0) + ((a - 1.0) / a).ln()
                }
            };
            if eps < best.0 {
                best = (eps, a);
            }
        }
        Ok((best.0.max(0.0), best.1))
    }
}
