//! Counter-based substreams.
//!
//! One master seed drives every simulation. The stream for replication
//! `rep` and purpose `k` is ChaCha20 keyed by `seed_from_u64(seed)` with
//! stream id `rep · 8 + k`, so any replication can be regenerated on its own
//! and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Regressors = 0,
    ControlCoefficients = 1,
    InstrumentCoefficients = 2,
    Errors = 3,
    Split = 4,
}

pub fn substream(seed: u64, rep: u64, purpose: Purpose) -> ChaCha20Rng {
    assert!(rep < (1 << 61), "replication index {rep} out of range");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream((rep << 3) | purpose as u64);
    rng
}
