//! Toolkit for low-resource multilingual neural machine translation.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! * [`corpus`]: tagging, concatenation, oversampling, backtranslation mixing
//!   and the two grapheme-to-phoneme multi-task layouts.
//! * [`g2p`]: an ordered, context-sensitive rewrite engine producing phonemic
//!   strings.
//! * [`subword`]: BPE and character segmentation with a shared vocabulary
//!   layout, plus vocabulary transfer from subword to character models.
//! * [`model`]: a small transformer encoder-decoder with hand-written
//!   backpropagation, staged training and teacher-forced scoring.
//! * [`decode`]: length-normalised beam search, grid search and n-best
//!   rescoring.
//! * [`eval`]: corpus BLEU and chrF.
//! * [`pipeline`]: JSON-configured experiments with content-hashed manifests.

pub mod corpus;
pub mod decode;
pub mod eval;
pub mod g2p;
pub mod model;
pub mod pipeline;
pub mod subword;

pub(crate) mod rng {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Portable seeded generator used everywhere randomness is needed.
    pub fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Derives an independent stream for a sub-task from a base seed.
    pub fn derive(seed: u64, salt: u64) -> u64 {
        // splitmix64 finaliser
        let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}
