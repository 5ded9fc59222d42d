use serde::{Deserialize, Serialize};

/// Streaming mean and sum of squared deviations (Welford), mergeable with
/// Chan's pairwise update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanVarEstimate {
    pub mean: f64,
    pub m2: f64,
    pub n: u64,
}

impl MeanVarEstimate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_samples<I: IntoIterator<Item = f64>>(samples: I) -> Self {
        let mut est = Self::new();
        est.extend(samples);
        est
    }

    pub fn push(&mut self, value: f64) {
        self.n += 1;
        let delta = value - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (value - self.mean);
    }

    pub fn extend<I: IntoIterator<Item = f64>>(&mut self, samples: I) {
        for v in samples {
            self.push(v);
        }
    }

    pub fn merge(&self, other: &Self) -> Self {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        let mean = self.mean + delta * nb / n as f64;
        let m2 = self.m2 + other.m2 + delta * delta * na * nb / n as f64;
        Self { mean, m2, n }
    }

    /// Sample variance of the individual draws; `None` below two draws.
    pub fn variance(&self) -> Option<f64> {
        (self.n >= 2).then(|| (self.m2 / (self.n - 1) as f64).max(0.0))
    }

    /// Variance of the mean, `variance / n`.
    pub fn variance_of_mean(&self) -> Option<f64> {
        self.variance().map(|v| v / self.n as f64)
    }

    pub fn std_error(&self) -> Option<f64> {
        self.variance_of_mean().map(f64::sqrt)
    }
}
