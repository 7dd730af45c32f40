//! Labelled, reproducible random streams.
//!
//! Every randomised step draws from a stream derived from the master seed
//! and a purpose label, so any phase can be replayed on its own. Streams can
//! be further split by index (epoch, flush number, ...) without consuming
//! draws from the parent.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamLabel {
    DataGen,
    ExampleShuffle,
    GroupingStart,
    BatchShuffle,
    Masking,
    NegativeSampling,
    WeightInit,
}

impl StreamLabel {
    pub const ALL: [StreamLabel; 7] = [
        StreamLabel::DataGen,
        StreamLabel::ExampleShuffle,
        StreamLabel::GroupingStart,
        StreamLabel::BatchShuffle,
        StreamLabel::Masking,
        StreamLabel::NegativeSampling,
        StreamLabel::WeightInit,
    ];

    fn tag(self) -> u64 {
        match self {
            StreamLabel::DataGen => 0x6461_7461_2d67_656e,
            StreamLabel::ExampleShuffle => 0x6578_2d73_6875_6666,
            StreamLabel::GroupingStart => 0x6772_702d_7374_6172,
            StreamLabel::BatchShuffle => 0x6261_7463_682d_7368,
            StreamLabel::Masking => 0x6d61_736b_696e_6721,
            StreamLabel::NegativeSampling => 0x6e65_672d_7361_6d70,
            StreamLabel::WeightInit => 0x7769_6e69_742d_3030,
        }
    }
}

/// SplitMix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive mix of two seeds.
pub fn combine(a: u64, b: u64) -> u64 {
    mix64(mix64(a) ^ b.rotate_left(17) ^ 0x5851_f42d_4c95_7f2d)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    label: StreamLabel,
    seed: u64,
    rng: ChaCha8Rng,
}

pub fn derive_stream(master_seed: u64, label: StreamLabel) -> RngStream {
    RngStream::from_seed(label, combine(master_seed, label.tag()))
}

impl RngStream {
    fn from_seed(label: StreamLabel, seed: u64) -> Self {
        Self {
            label,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn label(&self) -> StreamLabel {
        self.label
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `index`. Depends only on this stream's seed,
    /// never on how many draws have been taken from it.
    pub fn substream(&self, index: u64) -> RngStream {
        RngStream::from_seed(self.label, combine(self.seed, index.wrapping_add(0x7375_6273)))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
