//! Conservative Rényi accounting for the Gaussian mechanism.
//!
//! Each entry contributes `steps · α / (2σ²)` at order α (sensitivity 1, no
//! subsampling amplification), and the (ε, δ) conversion is
//! `min_α [RDP(α) + ln(1/δ) / (α − 1)]`. The result is an upper bound.

use super::DpError;

/// Evaluation orders: 1.5, 2, 3, …, 64, 128, 256.
pub static DEFAULT_ORDERS: std::sync::LazyLock<Vec<f64>> = std::sync::LazyLock::new(|| {
    let mut orders = vec![1.5];
    orders.extend((2..=64).map(|a| a as f64));
    orders.extend([128.0, 256.0]);
    orders
});

pub fn rdp_of_gaussian(noise_multiplier: f64, order: f64) -> Result<f64, DpError> {
    if !(noise_multiplier > 0.0) || !noise_multiplier.is_finite() {
        return Err(DpError::Domain {
            name: "noise_multiplier",
            value: noise_multiplier,
            domain: "0 < σ < ∞",
        });
    }
    if !(order > 1.0) || !order.is_finite() {
        return Err(DpError::Domain {
            name: "order",
            value: order,
            domain: "1 < α < ∞",
        });
    }
    Ok(order / (2.0 * noise_multiplier * noise_multiplier))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LedgerEntry {
    /// Noise standard deviation divided by the sensitivity.
    pub noise_multiplier: f64,
    pub steps: u64,
}

/// Append-only record of Gaussian-mechanism invocations.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountantLedger {
    entries: Vec<LedgerEntry>,
    orders: Vec<f64>,
    /// Running RDP total at each of `orders`, in append order.
    totals: Vec<f64>,
}

impl Default for AccountantLedger {
    fn default() -> Self {
        Self::new()
    }
}

impl AccountantLedger {
    pub fn new() -> Self {
        Self::with_orders(DEFAULT_ORDERS.clone()).expect("default orders are valid")
    }

    pub fn with_orders(orders: Vec<f64>) -> Result<Self, DpError> {
        if orders.is_empty() {
            return Err(DpError::Domain {
                name: "orders",
                value: 0.0,
                domain: "at least one order",
            });
        }
        if let Some(&bad) = orders.iter().find(|&&a| !(a > 1.0) || !a.is_finite()) {
            return Err(DpError::Domain {
                name: "order",
                value: bad,
                domain: "1 < α < ∞",
            });
        }
        Ok(Self {
            entries: Vec::new(),
            totals: vec![0.0; orders.len()],
            orders,
        })
    }

    pub fn append(&mut self, noise_multiplier: f64, steps: u64) -> Result<(), DpError> {
        rdp_of_gaussian(noise_multiplier, 2.0)?;
        if steps == 0 {
            return Err(DpError::Domain {
                name: "steps",
                value: 0.0,
                domain: "steps ≥ 1",
            });
        }
        for (t, &a) in self.totals.iter_mut().zip(&self.orders) {
            *t += steps as f64 * rdp_of_gaussian(noise_multiplier, a)?;
        }
        self.entries.push(LedgerEntry {
            noise_multiplier,
            steps,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_steps(&self) -> u64 {
        self.entries.iter().map(|e| e.steps).sum()
    }

    /// Composed RDP at `order`.
    pub fn rdp_at(&self, order: f64) -> Result<f64, DpError> {
        let mut total = 0.0;
        for e in &self.entries {
            total += e.steps as f64 * rdp_of_gaussian(e.noise_multiplier, order)?;
        }
        Ok(total)
    }

    /// Spent ε at `delta`, or `None` for an empty ledger.
    pub fn epsilon_spent(&self, delta: f64) -> Result<Option<f64>, DpError> {
        if self.entries.is_empty() {
            return Ok(None);
        }
        ledger_epsilon(self, delta).map(Some)
    }
}

pub fn ledger_epsilon(ledger: &AccountantLedger, delta: f64) -> Result<f64, DpError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DpError::Domain {
            name: "delta",
            value: delta,
            domain: "0 < δ < 1",
        });
    }
    if ledger.entries.is_empty() {
        return Err(DpError::EmptyLedger);
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = f64::INFINITY;
    for (&order, &rdp) in ledger.orders.iter().zip(&ledger.totals) {
        let eps = rdp + log_inv_delta / (order - 1.0);
        best = best.min(eps);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        assert_eq!(rdp_of_gaussian(1.0, 2.0).unwrap(), 1.0);
        assert_eq!(rdp_of_gaussian(2.0, 8.0).unwrap(), 1.0);
        assert!(rdp_of_gaussian(0.0, 2.0).is_err());
        assert!(rdp_of_gaussian(1.0, 1.0).is_err());
    }

    #[test]
    fn default_grid() {
        let o = &*DEFAULT_ORDERS;
        assert_eq!(o.len(), 1 + 63 + 2);
        assert_eq!(o[0], 1.5);
        assert_eq!(o[1], 2.0);
        assert_eq!(o[63], 64.0);
        assert_eq!(&o[64..], &[128.0, 256.0]);
    }

    #[test]
    fn composition_is_linear_in_steps() {
        let mut one = AccountantLedger::new();
        one.append(1.3, 1).unwrap();
        let mut many = AccountantLedger::new();
        many.append(1.3, 17).unwrap();
        for &a in one.orders() {
            assert_eq!(many.rdp_at(a).unwrap(), 17.0 * one.rdp_at(a).unwrap());
        }
    }

    #[test]
    fn empty_ledger() {
        let l = AccountantLedger::new();
        assert_eq!(ledger_epsilon(&l, 1e-5), Err(DpError::EmptyLedger));
        assert_eq!(l.epsilon_spent(1e-5).unwrap(), None);
    }

    #[test]
    fn larger_noise_spends_less() {
        let mut a = AccountantLedger::new();
        let mut b = AccountantLedger::new();
        for _ in 0..10 {
            a.append(1.0, 1).unwrap();
            b.append(2.0, 1).unwrap();
        }
        assert!(ledger_epsilon(&b, 1e-5).unwrap() <= ledger_epsilon(&a, 1e-5).unwrap());
    }
}
