//! Compensated sums and the goodness-of-fit tests used by the experiments.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::geometry::Vector3;

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = KahanSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

/// Componentwise compensated sum of vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorSum([KahanSum; 3]);

impl VectorSum {
    pub fn add(&mut self, v: Vector3) {
        self.0[0].add(v.x);
        self.0[1].add(v.y);
        self.0[2].add(v.z);
    }

    pub fn merge(&mut self, other: &VectorSum) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.merge(b);
        }
    }

    pub fn value(&self) -> Vector3 {
        Vector3::new(self.0[0].value(), self.0[1].value(), self.0[2].value())
    }
}

/// Upper quantile of χ²(dof) at the given confidence level.
pub fn chi_square_critical(dof: usize, level: f64) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(level)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub critical: f64,
    pub level: f64,
}

impl ChiSquareTest {
    pub fn passes(&self) -> bool {
        self.statistic <= self.critical
    }

    pub fn p_value(&self) -> f64 {
        1.0 - ChiSquared::new(self.dof as f64)
            .expect("positive degrees of freedom")
            .cdf(self.statistic)
    }
}

/// Pearson test of observed counts against given cell probabilities.
pub fn chi_square_goodness_of_fit(counts: &[u64], probabilities: &[f64], level: f64) -> ChiSquareTest {
    assert_eq!(counts.len(), probabilities.len());
    assert!(counts.len() >= 2);
    let n: u64 = counts.iter().sum();
    let statistic = counts
        .iter()
        .zip(probabilities)
        .map(|(&c, &p)| {
            let e = n as f64 * p;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dof = counts.len() - 1;
    ChiSquareTest {
        statistic,
        dof,
        critical: chi_square_critical(dof, level),
        level,
    }
}

pub fn chi_square_uniform(counts: &[u64], level: f64) -> ChiSquareTest {
    let p = 1.0 / counts.len() as f64;
    chi_square_goodness_of_fit(counts, &vec![p; counts.len()], level)
}

/// Two-sample homogeneity test on a shared binning. Bins empty in both
/// samples are dropped.
pub fn chi_square_two_sample(a: &[u64], b: &[u64], level: f64) -> ChiSquareTest {
    assert_eq!(a.len(), b.len());
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let (ka, kb) = ((nb / na).sqrt(), (na / nb).sqrt());
    let mut statistic = 0.0;
    let mut used = 0;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        used += 1;
        statistic += (ka * x as f64 - kb * y as f64).powi(2) / (x + y) as f64;
    }
    let dof = used.max(2) - 1;
    ChiSquareTest {
        statistic,
        dof,
        critical: chi_square_critical(dof, level),
        level,
    }
}

/// Bins angles in [0, 2π) into `bins` equal sectors.
pub fn angle_histogram(angles: impl IntoIterator<Item = f64>, bins: usize) -> Vec<u64> {
    let mut h = vec![0u64; bins];
    let width = std::f64::consts::TAU / bins as f64;
    for a in angles {
        let a = a.rem_euclid(std::f64::consts::TAU);
        h[((a / width) as usize).min(bins - 1)] += 1;
    }
    h
}

/// Standard deviation of a multinomial cell count.
pub fn multinomial_sigma(n: u64, p: f64) -> f64 {
    (n as f64 * p * (1.0 - p)).sqrt()
}

/// Whether every count lies within `k_sigma` standard deviations of n·p.
pub fn within_multinomial_envelope(counts: &[u64], probabilities: &[f64], k_sigma: f64) -> bool {
    let n: u64 = counts.iter().sum();
    counts
        .iter()
        .zip(probabilities)
        .all(|(&c, &p)| (c as f64 - n as f64 * p).abs() <= k_sigma * multinomial_sigma(n, p))
}

/// 4/√N envelope for first moments.
pub fn clt_envelope(n: u64) -> f64 {
    4.0 / (n as f64).sqrt()
}

/// 5/√N envelope for means that also carry a discretization bias.
pub fn bias_envelope(n: u64) -> f64 {
    5.0 / (n as f64).sqrt()
}
