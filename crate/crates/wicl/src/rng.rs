//! Counter-based random streams.
//!
//! Every stochastic quantity in the crate is drawn from a stream addressed by
//! `(seed, path...)`, where `path` encodes what the stream is for (sample
//! index, user index, epoch, step, ...). Streams are pure functions of their
//! address, so generation order and worker count never affect results:
//! sample `i` of a dataset is identical whether it is produced first, last,
//! serially or from a thread pool.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags keep streams for unrelated purposes disjoint even when their
/// numeric paths collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    PathSet,
    Dataset,
    Sampler,
    ModelInit,
    Eval,
    Solver,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::PathSet => 0x7061_7468,
            Domain::Dataset => 0x6461_7461,
            Domain::Sampler => 0x7361_6d70,
            Domain::ModelInit => 0x696e_6974,
            Domain::Eval => 0x6576_616c,
            Domain::Solver => 0x736f_6c76,
        }
    }
}

/// SplitMix64 step; used only to expand an address into key material.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the ChaCha stream addressed by `(domain, seed, path)`.
pub fn stream(domain: Domain, seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ domain.tag().rotate_left(32);
    let mut key = [0u8; 32];
    // Mix the path into the running state, then squeeze 4 words.
    for &p in path {
        state ^= splitmix64(&mut state) ^ p.wrapping_mul(0xa24b_aed4_963e_e407);
    }
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
