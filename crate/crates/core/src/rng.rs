use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream-id offsets so that independent consumers of one seed never share draws.
pub mod domain {
    pub const MASKS: u64 = 0;
    pub const NOISE: u64 = 1 << 32;
    pub const PHANTOM: u64 = 2 << 32;
    pub const TRAINING: u64 = 3 << 32;
    pub const SEQUENCE: u64 = 4 << 32;
    pub const SOLVER: u64 = 5 << 32;
}

/// Counter-based random streams keyed by `(seed, stream id)`.
///
/// Every consumer asks for its own stream (e.g. one per frame), so parallel
/// work is reproducible bit-for-bit regardless of scheduling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeededRng {
    pub seed: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed }
    }

    pub fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(id);
        r
    }
}
