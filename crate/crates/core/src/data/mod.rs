//! Deterministic synthetic audio-visual corpus.
//!
//! Visual frames carry 16 channels: `0..8` lip articulation (seven class
//! occupancies and mouth opening), `8..12` upper-face cues, `12..16` the
//! speaker's identity vector.

mod corpus;
mod synth;
mod view;

pub use corpus::{
    build_corpus, gen_item, read_features, write_features, Corpus, CorpusConfig, CorpusItem,
    GeneratedItem, Manifest, ManifestItem, Split, MANIFEST_VERSION,
};
pub use synth::{
    gen_utterance, gen_utterance_at, lip_audio_correlation, SpeakerProfile, Utterance,
    DEFAULT_FPS, MEAN_DWELL_MS, MIN_DURATION_S, VISEME_CLASSES,
};
pub use view::{corrupt_view, pose_invariant_view, ViewLevel};

use std::ops::Range;

pub const VISUAL_FEATURES: usize = 16;
pub const LIP: Range<usize> = 0..8;
pub const UPPER: Range<usize> = 8..16;
pub const IDENTITY: Range<usize> = 12..16;

/// Derives an independent child seed (splitmix64 finalizer over both words).
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
