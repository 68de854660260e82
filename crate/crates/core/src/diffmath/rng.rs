use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded, splittable generator. Every stochastic operation takes one of
/// these explicitly; there is no ambient randomness anywhere in the crate.
#[derive(Clone, Debug)]
pub struct SeedRng(ChaCha8Rng);

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent child stream; advances `self` by one draw.
    pub fn split(&mut self) -> SeedRng {
        SeedRng::new(self.0.next_u64())
    }

    /// Child stream keyed by a label, without advancing `self`.
    pub fn fork(&self, label: &str) -> SeedRng {
        let mut h = super::params::Fnv64::new();
        h.write(&self.0.get_seed());
        h.write(&self.0.get_word_pos().to_le_bytes());
        h.write(label.as_bytes());
        SeedRng::new(h.finish())
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

impl RngCore for SeedRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = SeedRng::new(42);
        let mut b = SeedRng::new(42);
        assert_eq!(a.normal_vec(5), b.normal_vec(5));
        let (mut ca, mut cb) = (a.split(), b.split());
        assert_eq!(ca.uniform(), cb.uniform());
        assert_eq!(a.fork("x").uniform(), b.fork("x").uniform());
        assert_ne!(a.fork("x").uniform(), a.fork("y").uniform());
    }
}
