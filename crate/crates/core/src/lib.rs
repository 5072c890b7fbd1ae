//! Meta continual learning for graph few-shot class-incremental node
//! classification.
//!
//! The crate is `no_std` (with `alloc`): every routine here is pure
//! computation over in-memory data. File formats, reports and the command
//! line live in the companion `gfscil` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod sparse;
pub mod tensor;
pub mod graph;
pub mod model;
pub mod episodes;
pub mod losses;
pub mod trainer;
pub mod eval;
pub mod oracle;

/// Random generator used throughout; seeded runs are reproducible bit for bit.
pub type RunRng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> RunRng {
    <RunRng as rand::SeedableRng>::seed_from_u64(seed)
}
