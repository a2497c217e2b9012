//! Synthetic speech-like corpora, feature files, manifests, augmentation and batching.

mod augment;
mod batch;
mod corpus;
mod features;
mod manifest;

pub use augment::{spec_augment, AugmentPolicy};
pub use batch::{batchify, shuffled_batches, Batch};
pub use corpus::{
    generate_corpus, token_frequencies, write_corpus, zipf_unigram, Corpus, CorpusSpec,
    DomainSpec, Split, SplitSizes,
};
pub use features::{read_features, write_features};
pub use manifest::{load_utterances, Manifest, ManifestRecord};

use crate::numerics::Tensor;

/// One utterance: a `frames × dim` feature matrix with its reference tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub features: Tensor,
    pub tokens: Vec<usize>,
    pub domain: String,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.rows()
    }
}

/// Stable 64-bit seed derivation from a master seed and a path of labels.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix(master ^ 0x5EED_5EED_5EED_5EED);
    for p in parts {
        h = splitmix(h ^ splitmix(*p));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
