//! Named, seeded random streams.
//!
//! Every stochastic decision in training is drawn from a stream that is a pure
//! function of `(seed, purpose, index)`, so a step can be replayed without
//! carrying generator state around.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags keep streams with equal seeds decorrelated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    BatchKind,
    Labelled,
    Unlabelled,
    Mask,
    Distractor,
    Init,
    Dropout,
    Corpus,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::BatchKind => 0x6b69_6e64,
            Stream::Labelled => 0x6c61_6265,
            Stream::Unlabelled => 0x756e_6c61,
            Stream::Mask => 0x6d61_736b,
            Stream::Distractor => 0x6469_7374,
            Stream::Init => 0x696e_6974,
            Stream::Dropout => 0x6472_6f70,
            Stream::Corpus => 0x636f_7270,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the `index`-th draw of a named stream.
pub fn stream(seed: u64, purpose: Stream, index: u64) -> Rng {
    let mut key = [0u8; 32];
    let words = [
        splitmix(seed),
        splitmix(purpose.tag() ^ 0x5eed),
        splitmix(index.wrapping_mul(0x2545_f491_4f6c_dd1d)),
        splitmix(seed ^ purpose.tag() ^ index.rotate_left(17)),
    ];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Stream derived from a parent seed and an arbitrary sub-key.
pub fn substream(seed: u64, purpose: Stream, index: u64, sub: u64) -> Rng {
    stream(splitmix(seed ^ splitmix(sub)), purpose, index)
}
