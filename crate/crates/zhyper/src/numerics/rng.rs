//! Counter-based splittable random generator.
//!
//! State is a hash key plus a draw counter; every output is a pure integer
//! function of `(key, counter)`, so sequences replay identically across runs
//! and platforms. `split` derives an independent child stream without
//! touching the parent's counter, which lets a run hand disjoint streams to
//! data sampling, initialization, and noise without coordination.

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLIT_SALT: u64 = 0xD6E8_FEB8_6659_FD93;

#[inline]
fn mix(key: u64, counter: u64) -> u64 {
    let mut z = key ^ counter.wrapping_mul(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: mix(GOLDEN, seed),
            counter: 0,
        }
    }

    /// Derive an independent child stream. Pure in `(self.key, stream)`:
    /// the parent's counter is neither read nor advanced.
    pub fn split(&self, stream: u64) -> Rng {
        Rng {
            key: mix(self.key ^ SPLIT_SALT, stream),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let c = self.counter;
        self.counter += 1;
        mix(self.key, c)
    }

    /// Uniform draw in [0, 1) with 53 bits of mantissa.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [-1, 1).
    #[inline]
    pub fn uniform_sym(&mut self) -> f64 {
        2.0 * self.uniform() - 1.0
    }

    /// Uniform integer in [0, n). Lemire multiply-shift; deterministic.
    #[inline]
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// One standard-normal draw (Marsaglia polar; the pair's second value
    /// is discarded so call counts stay position-independent).
    pub fn standard_normal(&mut self) -> f64 {
        loop {
            let u = self.uniform_sym();
            let v = self.uniform_sym();
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> Result<f64> {
        if std < 0.0 {
            return Err(Error::contract(format!("normal: std must be >= 0, got {std}")));
        }
        Ok(mean + std * self.standard_normal())
    }
}
