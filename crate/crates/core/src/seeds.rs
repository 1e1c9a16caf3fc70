//! Named, stateless random substreams.
//!
//! Every stochastic draw in the engine and simulator comes from a stream
//! keyed by (run seed, purpose, user, instant), so a draw never depends on
//! how many draws happened before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::event::UserId;

/// Stable 64-bit key for a user id.
pub fn user_key(user: &UserId) -> u64 {
    let digest = Sha256::digest(user.as_str().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered list of parts into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Purpose tags for substreams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    ControlDraw = 1,
    Challenge = 2,
    Smote = 3,
    Forest = 4,
    Background = 5,
    Agent = 6,
    Reaction = 7,
    Feedback = 8,
    Label = 9,
    Latent = 10,
}

pub fn stream_seed(seed: u64, stream: Stream, user: &UserId, key: i64) -> u64 {
    derive_seed(&[seed, stream as u64, user_key(user), key as u64])
}

pub fn stream(seed: u64, stream: Stream, user: &UserId, key: i64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream, user, key))
}
