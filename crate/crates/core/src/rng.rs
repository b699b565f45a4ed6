//! Reproducible per-path random streams.
//!
//! Path `p` of a run with seed `s` draws from a ChaCha8 stream whose 256-bit
//! key is `s (LE u64) ‖ p (LE u64) ‖ "sphere-sde/path"`. ChaCha is a
//! pseudorandom function of its key, so distinct `(seed, path)` pairs give
//! independent streams and a path's increments never depend on which worker
//! runs it.
//!
//! Stream 0 carries Wiener increments. Each step consumes exactly two `u64`
//! words (one Box–Muller pair, cosine branch), so the increment of step `n`
//! sits at a fixed word position and can be reproduced with
//! [`PathRng::increment_at`]. Stream 1 is reserved for everything else
//! (initial-state sampling, orbit angles).

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const KEY_TAG: &[u8; 16] = b"sphere-sde/path\0";
const INCREMENT_STREAM: u64 = 0;
const AUX_STREAM: u64 = 1;
/// u32 words consumed per increment (two u64 draws).
const WORDS_PER_STEP: u128 = 4;

/// Law of the discrete Wiener increments ΔW ~ 𝒩(0, k).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncrementLaw {
    /// Exact Gaussian increments.
    #[default]
    Gaussian,
    /// ±√k with probability ½ each; matches the first three moments.
    TwoPoint,
}

pub fn path_key(seed: u64, path: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path.to_le_bytes());
    key[16..].copy_from_slice(KEY_TAG);
    key
}

#[derive(Clone, Debug)]
pub struct PathRng {
    increments: ChaCha8Rng,
    aux: ChaCha8Rng,
    law: IncrementLaw,
}

/// Uniform on (0, 1], 53 bits.
#[inline]
fn open_unit(word: u64) -> f64 {
    ((word >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

impl PathRng {
    pub fn new(seed: u64, path: u64, law: IncrementLaw) -> Self {
        let key = path_key(seed, path);
        let mut increments = ChaCha8Rng::from_seed(key);
        increments.set_stream(INCREMENT_STREAM);
        let mut aux = ChaCha8Rng::from_seed(key);
        aux.set_stream(AUX_STREAM);
        Self {
            increments,
            aux,
            law,
        }
    }

    pub fn law(&self) -> IncrementLaw {
        self.law
    }

    /// Standard normal (or ±1 under the two-point law) from the next two words.
    fn next_unit_increment(&mut self) -> f64 {
        let (w1, w2) = (self.increments.next_u64(), self.increments.next_u64());
        match self.law {
            IncrementLaw::Gaussian => {
                let r = (-2.0 * open_unit(w1).ln()).sqrt();
                r * (std::f64::consts::TAU * open_unit(w2)).cos()
            }
            IncrementLaw::TwoPoint => {
                if w1 >> 63 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    /// Next increment ΔW with variance `k`.
    pub fn increment(&mut self, k: f64) -> f64 {
        k.sqrt() * self.next_unit_increment()
    }

    /// The increment of step `step` (zero-based), independent of the current
    /// stream position. Leaves the sequential position right after that step.
    pub fn increment_at(&mut self, step: u64, k: f64) -> f64 {
        self.increments.set_word_pos(step as u128 * WORDS_PER_STEP);
        self.increment(k)
    }

    /// Auxiliary stream for initial states and orbit angles.
    pub fn aux(&mut self) -> &mut ChaCha8Rng {
        &mut self.aux
    }

    /// Uniform angle in [0, 2π) from the auxiliary stream.
    pub fn angle(&mut self) -> f64 {
        self.aux.random::<f64>() * std::f64::consts::TAU
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_seekable() {
        let mut a = PathRng::new(7, 3, IncrementLaw::Gaussian);
        let seq: Vec<f64> = (0..50).map(|_| a.increment(0.01)).collect();
        let mut b = PathRng::new(7, 3, IncrementLaw::Gaussian);
        for step in [17u64, 0, 49, 3] {
            assert_eq!(b.increment_at(step, 0.01), seq[step as usize]);
        }
        let mut c = PathRng::new(7, 4, IncrementLaw::Gaussian);
        assert_ne!(c.increment(0.01), seq[0]);
    }

    #[test]
    fn aux_stream_does_not_shift_increments() {
        let mut a = PathRng::new(1, 0, IncrementLaw::Gaussian);
        let mut b = PathRng::new(1, 0, IncrementLaw::Gaussian);
        let _ = b.angle();
        let _ = b.aux().next_u64();
        assert_eq!(a.increment(1.0), b.increment(1.0));
    }

    #[test]
    fn gaussian_moments() {
        let mut r = PathRng::new(42, 0, IncrementLaw::Gaussian);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.increment(1.0)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / n as f64 - mean * mean;
        let kurt = xs.iter().map(|x| x.powi(4)).sum::<f64>() / n as f64;
        // 4σ envelopes: sd(mean) = 1/√n, sd(x²) = √2, sd(x⁴) = √96.
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 4.0 * 2f64.sqrt() / (n as f64).sqrt());
        assert!((kurt - 3.0).abs() < 4.0 * 96f64.sqrt() / (n as f64).sqrt());
    }

    #[test]
    fn two_point_law() {
        let mut r = PathRng::new(5, 9, IncrementLaw::TwoPoint);
        let k: f64 = 0.04;
        let xs: Vec<f64> = (0..10_000).map(|_| r.increment(k)).collect();
        assert!(xs.iter().all(|&x| (x.abs() - k.sqrt()).abs() < 1e-15));
        let plus = xs.iter().filter(|&&x| x > 0.0).count() as f64;
        assert!((plus / 10_000.0 - 0.5).abs() < 4.0 * 0.5 / 100.0);
    }
}
