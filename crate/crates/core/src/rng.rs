//! Counter-based deterministic RNG.
//!
//! A SplitMix64-style generator: the state is a single 64-bit word advanced
//! by a fixed odd increment, and each output is a bijective mix of the state.
//! Identical seed and call sequence give an identical stream on every
//! platform. Substreams derived with [`Rng::stream`] are independent of how
//! much the parent has been consumed, so one subsystem's draws cannot shift
//! another's.

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Finalizer from SplitMix64.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, state: seed }
    }

    /// Derive an independent substream. Depends only on the original seed
    /// and the stream id, never on consumption of `self`.
    pub fn stream(&self, id: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(id.wrapping_mul(GOLDEN) ^ 0xA5A5_A5A5_5A5A_5A5A)))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Current counter word; together with the seed this is the full state.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn restore(seed: u64, state: u64) -> Self {
        Self { seed, state }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_f32(&mut self) -> f32 {
        self.next_f64() as f32
    }

    /// Uniform integer in [0, n) via 128-bit multiply-shift.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal draw, Box-Muller. Consumes exactly two uniforms.
    pub fn normal(&mut self) -> f64 {
        let mut u1 = self.next_f64();
        if u1 <= 0.0 {
            u1 = f64::MIN_POSITIVE;
        }
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Gamma(shape, 1) via Marsaglia-Tsang, with the standard boost for
    /// shape < 1.
    fn sample_gamma(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape < 1.0 {
            let g = self.sample_gamma(shape + 1.0);
            let mut u = self.next_f64();
            if u <= 0.0 {
                u = f64::MIN_POSITIVE;
            }
            return g * u.powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = (1.0 + c * x).powi(3);
            if v <= 0.0 {
                continue;
            }
            let u = self.next_f64();
            if u < 1.0 - 0.0331 * x.powi(4) {
                return d * v;
            }
            if u > 0.0 && u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Symmetric Beta(alpha, alpha) draw in (0, 1).
    pub fn sample_beta(&mut self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta alpha must be positive, got {alpha}"
            )));
        }
        let x = self.sample_gamma(alpha);
        let y = self.sample_gamma(alpha);
        let b = x / (x + y);
        Ok(b.clamp(1e-12, 1.0 - 1e-12))
    }

    /// Fisher-Yates permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_seed_identical_stream() {
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_consumption_independent() {
        let mut a = Rng::new(9);
        let _ = a.next_u64();
        let _ = a.next_u64();
        let b = Rng::new(9);
        assert_eq!(
            a.stream(4).next_u64(),
            b.stream(4).next_u64(),
            "stream derivation must ignore parent consumption"
        );
        assert_ne!(b.stream(4).next_u64(), b.stream(5).next_u64());
    }

    #[test]
    fn restore_resumes_stream() {
        let mut a = Rng::new(77);
        for _ in 0..10 {
            a.next_u64();
        }
        let (seed, state) = (a.seed(), a.state());
        let rest: Vec<u64> = (0..5).map(|_| a.next_u64()).collect();
        let mut b = Rng::restore(seed, state);
        let resumed: Vec<u64> = (0..5).map(|_| b.next_u64()).collect();
        assert_eq!(rest, resumed);
    }

    #[test]
    fn beta_alpha_one_is_uniform() {
        // Beta(1,1) = U(0,1): KS statistic over 1e5 draws below 0.02.
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| rng.sample_beta(1.0).unwrap()).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, &x) in draws.iter().enumerate() {
            let ecdf_hi = (i + 1) as f64 / n as f64;
            let ecdf_lo = i as f64 / n as f64;
            ks = ks.max((ecdf_hi - x).abs()).max((x - ecdf_lo).abs());
        }
        assert!(ks < 0.02, "KS statistic {ks}");
    }

    #[test]
    fn beta_symmetric_mean_half() {
        let mut rng = Rng::new(5);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| rng.sample_beta(0.2).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn beta_same_seed_same_draw() {
        let a = Rng::new(31).sample_beta(0.7).unwrap();
        let b = Rng::new(31).sample_beta(0.7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beta_rejects_nonpositive_alpha() {
        assert!(Rng::new(1).sample_beta(0.0).is_err());
        assert!(Rng::new(1).sample_beta(-1.0).is_err());
    }

    #[test]
    fn permutation_is_bijection() {
        let mut rng = Rng::new(11);
        let p = rng.permutation(50);
        let mut seen = vec![false; 50];
        for &i in &p {
            assert!(!seen[i]);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }
}
