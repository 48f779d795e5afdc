//! Mergeable streaming accumulator for count, mean and central sums up to order four.
//!
//! Updates use the Welford recurrences extended to third and fourth central
//! sums; merges use the pairwise combination rules, so shards can be reduced
//! in any order.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroupAccumulator {
    pub n: u64,
    pub mean: f64,
    /// Sum of squared deviations from the mean.
    pub m2: f64,
    pub m3: f64,
    /// Single-pass fourth central sum. The estimator uses the second-pass value instead.
    pub m4: f64,
}

impl GroupAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Self {
        let mut acc = Self::new();
        for y in values {
            acc.push(y);
        }
        acc
    }

    /// Adds one value; the caller guarantees it is finite.
    #[inline]
    pub fn push(&mut self, y: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = y - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let term1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += term1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += term1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += term1;
    }

    pub fn try_push(&mut self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::NonFiniteValue(y));
        }
        self.push(y);
        Ok(())
    }

    pub fn merge(&self, other: &GroupAccumulator) -> GroupAccumulator {
        if other.n == 0 {
            return *self;
        }
        if self.n == 0 {
            return *other;
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        // Weighted mean is more accurate than mean_a + delta * nb / n when the sizes differ a lot.
        let mean = if na >= nb { self.mean + delta * (nb / n) } else { other.mean - delta * (na / n) };
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 =
            self.m3 + other.m3 + d3 * na * nb * (na - nb) / (n * n) + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;
        GroupAccumulator { n: self.n + other.n, mean, m2, m3, m4 }
    }

    /// Sum of the values seen.
    #[inline]
    pub fn total(&self) -> f64 {
        self.mean * self.n as f64
    }
}
