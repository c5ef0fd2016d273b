//! Counter-based pseudo-randomness.
//!
//! Every random draw in the engines is produced by hashing plain counters
//! (run seed, stream id, step index) through a 64-bit finalizer. No
//! generator state is shared between workers, so any draw can be replayed
//! bit-exactly from its counters alone.

/// Golden-ratio increment used to decorrelate consecutive counters.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// 64-bit avalanche finalizer (the splitmix64 mixing function).
///
/// Bijective on `u64`; flipping any input bit flips each output bit with
/// probability close to 1/2.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a 64-bit word to the unit interval `[0, 1)` using its top 53 bits.
#[inline]
pub fn unit_f64(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Minimal sequential generator (splitmix64) for the simulation code paths
/// that want a stream rather than counters.
#[derive(Clone, Copy, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Next draw in `[0, 1)`.
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    /// Exponential draw with the given rate via inverse transform.
    #[inline]
    pub fn next_exp(&mut self, rate: f64) -> f64 {
        -(1.0 - self.next_unit()).ln() / rate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix64_is_pure() {
        assert_eq!(mix64(0x1234_5678), mix64(0x1234_5678));
        assert_ne!(mix64(1), mix64(2));
    }

    #[test]
    fn unit_range() {
        for w in [0u64, 1, u64::MAX, 0x8000_0000_0000_0000] {
            let u = unit_f64(w);
            assert!((0.0..1.0).contains(&u), "u = {u} for word {w:#x}");
        }
        assert_eq!(unit_f64(0), 0.0);
    }

    #[test]
    fn stream_mean_is_centered() {
        let mut rng = SplitMix64::new(42);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| rng.next_unit()).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean = {mean}");
    }

    #[test]
    fn exp_draws_match_rate() {
        let mut rng = SplitMix64::new(7);
        let rate = 2.0;
        let n = 200_000;
        let mean: f64 = (0..n).map(|_| rng.next_exp(rate)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean = {mean}");
    }
}
