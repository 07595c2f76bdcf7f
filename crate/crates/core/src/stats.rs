//! Small streaming estimators shared by the ensemble and Monte Carlo code.

/// Running mean and variance (Welford).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero below two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

impl FromIterator<f64> for MeanAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::new();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

/// Sample means and full covariance of a vector-valued estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceAccumulator {
    n: u64,
    mean: Vec<f64>,
    // upper triangle of the co-moment matrix, row major
    comoment: Vec<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            comoment: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push(&mut self, x: &[f64]) {
        assert_eq!(x.len(), self.dim(), "sample length");
        self.n += 1;
        let n = self.n as f64;
        let d = self.dim();
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / n;
        }
        for i in 0..d {
            let after = x[i] - self.mean[i];
            for j in 0..d {
                self.comoment[i * d + j] += delta[j] * after;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.dim(), other.dim(), "dimension");
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = other.clone();
            return;
        }
        let d = self.dim();
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..d {
            for j in 0..d {
                self.comoment[i * d + j] += other.comoment[i * d + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * nb / n;
        }
        self.n += other.n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self, i: usize, j: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        self.comoment[i * self.dim() + j] / (self.n - 1) as f64
    }

    pub fn stderr(&self, i: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.covariance(i, i) / self.n as f64).sqrt()
    }

    /// Standard error of `mean[i] - mean[j]`, using the sample covariance.
    pub fn difference_stderr(&self, i: usize, j: usize) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let var = self.covariance(i, i) + self.covariance(j, j) - 2.0 * self.covariance(i, j);
        (var.max(0.0) / self.n as f64).sqrt()
    }
}

/// Ordinary least-squares slope of `ys` against `xs`; NaN with fewer than two points.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mean_and_stderr() {
        let acc: MeanAccumulator = [1.0, 2.0, 3.0, 4.0].into_iter().collect();
        assert_eq!(acc.mean(), 2.5);
        assert!((acc.variance() - 5.0 / 3.0).abs() < 1e-12);
        assert!((acc.stderr() - (5.0f64 / 12.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanAccumulator::new().stderr(), 0.0);
    }

    #[test]
    fn slope_of_a_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();
        assert!((least_squares_slope(&xs, &ys) - 3.0).abs() < 1e-12);
        assert!(least_squares_slope(&[1.0], &[1.0]).is_nan());
    }

    #[test]
    fn paired_difference_error_cancels_common_noise() {
        let mut acc = CovarianceAccumulator::new(2);
        for i in 0..100 {
            let noise = (i as f64 * 0.7).sin();
            acc.push(&[noise, noise + 1.0]);
        }
        assert!(acc.stderr(0) > 0.01);
        assert!(acc.difference_stderr(0, 1) < 1e-9);
        assert!((acc.mean()[1] - acc.mean()[0] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn merging_equals_sequential(
            a in proptest::collection::vec(-10.0f64..10.0, 0..20),
            b in proptest::collection::vec(-10.0f64..10.0, 0..20),
        ) {
            let mut left: MeanAccumulator = a.iter().copied().collect();
            left.merge(&b.iter().copied().collect());
            let all: MeanAccumulator = a.iter().chain(&b).copied().collect();
            prop_assert_eq!(left.count(), all.count());
            prop_assert!((left.mean() - all.mean()).abs() < 1e-9);
            prop_assert!((left.variance() - all.variance()).abs() < 1e-8);

            let mut ca = CovarianceAccumulator::new(2);
            let mut cb = CovarianceAccumulator::new(2);
            let mut call = CovarianceAccumulator::new(2);
            for x in &a { ca.push(&[*x, x * x]); call.push(&[*x, x * x]); }
            for x in &b { cb.push(&[*x, -x]); call.push(&[*x, -x]); }
            ca.merge(&cb);
            for i in 0..2 {
                for j in 0..2 {
                    prop_assert!((ca.covariance(i, j) - call.covariance(i, j)).abs() < 1e-6);
                }
            }
        }
    }
}
