use serde::{Deserialize, Serialize};

/// Global scalar standardization of log-power features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: f64,
    pub std: f64,
}

impl FeatureNormalizer {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    #[inline]
    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    #[inline]
    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }
}

/// Streaming mean/variance (Chan et al. parallel merge of Welford states).
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn push_slice(&mut self, xs: impl IntoIterator<Item = f64>) {
        let mut other = RunningMoments::default();
        for x in xs {
            other.n += 1;
            let d = x - other.mean;
            other.mean += d / other.n as f64;
            other.m2 += d * (x - other.mean);
        }
        self.merge(&other);
    }

    pub fn merge(&mut self, o: &RunningMoments) {
        if o.n == 0 {
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * self.n as f64 * o.n as f64 / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    /// Population statistics; a degenerate spread falls back to unit std.
    pub fn normalizer(&self) -> FeatureNormalizer {
        let var = if self.n > 0 { self.m2 / self.n as f64 } else { 0.0 };
        let std = var.sqrt();
        FeatureNormalizer {
            mean: self.mean,
            std: if std > 1e-12 { std } else { 1.0 },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_match_two_pass() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.3 - 12.0).collect();
        let mut m = RunningMoments::default();
        m.push_slice(xs[..300].iter().copied());
        m.push_slice(xs[300..].iter().copied());
        let mean = xs.iter().sum::<f64>() / 1000.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1000.0;
        let n = m.normalizer();
        assert!((n.mean - mean).abs() < 1e-12);
        assert!((n.std - var.sqrt()).abs() < 1e-12);
        for &x in &xs {
            assert!((n.denormalize(n.normalize(x)) - x).abs() < 1e-9);
        }
    }
}
