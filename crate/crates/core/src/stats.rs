//! Weighted Monte Carlo estimators.

use serde::{Deserialize, Serialize};

/// Histogram entry for one collapse outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBin {
    pub outcome: String,
    pub count: usize,
    pub frequency: f64,
    pub stderr: f64,
}

/// Self-normalized weighted mean with weights supplied in log form.
///
/// Sums are kept relative to a running reference log-weight and rescaled when
/// a larger weight arrives, so very uneven weights neither overflow nor lose
/// the small ones entirely.
#[derive(Debug, Clone, Copy)]
pub struct WeightedMean {
    log_ref: f64,
    sw: f64,
    sw2: f64,
    swx: f64,
    sw2x: f64,
    sw2x2: f64,
    n: usize,
    nonzero: usize,
}

impl Default for WeightedMean {
    fn default() -> Self {
        WeightedMean {
            log_ref: f64::NEG_INFINITY,
            sw: 0.0,
            sw2: 0.0,
            swx: 0.0,
            sw2x: 0.0,
            sw2x2: 0.0,
            n: 0,
            nonzero: 0,
        }
    }
}

impl WeightedMean {
    pub fn push(&mut self, log_w: f64, x: f64) {
        if log_w > self.log_ref {
            if self.log_ref.is_finite() {
                let s = (self.log_ref - log_w).exp();
                let s2 = s * s;
                self.sw *= s;
                self.swx *= s;
                self.sw2 *= s2;
                self.sw2x *= s2;
                self.sw2x2 *= s2;
            }
            self.log_ref = log_w;
        }
        let w = (log_w - self.log_ref).exp();
        self.sw += w;
        self.swx += w * x;
        self.sw2 += w * w;
        self.sw2x += w * w * x;
        self.sw2x2 += w * w * x * x;
        self.n += 1;
        if x != 0.0 {
            self.nonzero += 1;
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn count_nonzero(&self) -> usize {
        self.nonzero
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        self.swx / self.sw
    }

    /// Delta-method standard error of the self-normalized mean.
    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        let m = self.mean();
        let num = self.sw2x2 - 2.0 * m * self.sw2x + m * m * self.sw2;
        let n = self.n as f64;
        // n/(n-1) turns the plug-in variance into the unbiased one for equal weights
        (num.max(0.0) * n / (n - 1.0)).sqrt() / self.sw
    }

    /// Kish effective sample size `(sum w)^2 / sum w^2`.
    pub fn effective_sample_size(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.sw * self.sw / self.sw2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_weights_reduce_to_sample_mean() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let mut acc = WeightedMean::default();
        for x in xs {
            acc.push(3.0, x);
        }
        let m = 3.5;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 3.0;
        assert!((acc.mean() - m).abs() < 1e-14);
        assert!((acc.stderr() - (var / 4.0).sqrt()).abs() < 1e-14);
        assert!((acc.effective_sample_size() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rescaling_is_order_independent() {
        let mut a = WeightedMean::default();
        let mut b = WeightedMean::default();
        let data = [(0.0, 1.0), (800.0, 2.0), (799.0, 5.0)];
        for (lw, x) in data {
            a.push(lw, x);
        }
        for (lw, x) in data.iter().rev() {
            b.push(*lw, *x);
        }
        assert!((a.mean() - b.mean()).abs() < 1e-12);
        let e = 1f64.exp();
        assert!((a.mean() - (2.0 * e + 5.0) / (e + 1.0)).abs() < 1e-12);
    }
}
