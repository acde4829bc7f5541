use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counter-based random stream used for dropout masks.
///
/// The stream position is exposed so a checkpoint can resume it exactly.
#[derive(Debug, Clone)]
pub struct DropoutRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl DropoutRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn at_position(seed: u64, position: u128) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_word_pos(position);
        rng
    }

    /// Uniform draw in [0, 1).
    pub fn next_unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }
}

/// Deterministic child seed, so independent consumers never share a stream.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_round_trips() {
        let mut a = DropoutRng::new(9);
        for _ in 0..17 {
            a.next_unit();
        }
        let mut b = DropoutRng::at_position(9, a.position());
        for _ in 0..5 {
            assert_eq!(a.next_unit().to_bits(), b.next_unit().to_bits());
        }
    }
}
