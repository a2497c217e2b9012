use super::Utterance;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Zero-padded group of utterances.
///
/// `features` has shape `[batch, max_frames, dim]`; token rows are padded with
/// the blank id and `token_mask` marks real positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub domains: Vec<String>,
    pub features: Tensor,
    pub frame_lengths: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub token_mask: Vec<Vec<bool>>,
    pub token_lengths: Vec<usize>,
}

pub const PAD_ID: usize = 0;

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.features.shape()[1]
    }

    /// Features of item `i` cut to its true length.
    pub fn features_of(&self, i: usize) -> Tensor {
        let (t, d) = (self.max_frames(), self.features.shape()[2]);
        let start = i * t * d;
        let n = self.frame_lengths[i];
        Tensor::matrix(n, d, self.features.data()[start..start + n * d].to_vec()).unwrap()
    }

    pub fn tokens_of(&self, i: usize) -> &[usize] {
        &self.tokens[i][..self.token_lengths[i]]
    }
}

/// Splits utterances into padded batches, optionally ordered by frame count
/// (stable, so equal lengths keep input order).
pub fn batchify(utts: &[Utterance], batch_size: usize, sort_by_length: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..utts.len()).collect();
    if sort_by_length {
        order.sort_by_key(|&i| utts[i].frames());
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let items: Vec<&Utterance> = chunk.iter().map(|&i| &utts[i]).collect();
            Ok(pad(&items))
        })
        .collect()
}

fn pad(items: &[&Utterance]) -> Batch {
    let dim = items[0].features.cols();
    let max_t = items.iter().map(|u| u.frames()).max().unwrap_or(0);
    let max_l = items.iter().map(|u| u.tokens.len()).max().unwrap_or(0);
    let mut feats = vec![0.0; items.len() * max_t * dim];
    for (b, u) in items.iter().enumerate() {
        let dst = b * max_t * dim;
        feats[dst..dst + u.features.len()].copy_from_slice(u.features.data());
    }
    Batch {
        ids: items.iter().map(|u| u.id.clone()).collect(),
        domains: items.iter().map(|u| u.domain.clone()).collect(),
        features: Tensor::new(vec![items.len(), max_t, dim], feats).unwrap(),
        frame_lengths: items.iter().map(|u| u.frames()).collect(),
        tokens: items
            .iter()
            .map(|u| {
                let mut t = u.tokens.clone();
                t.resize(max_l, PAD_ID);
                t
            })
            .collect(),
        token_mask: items
            .iter()
            .map(|u| (0..max_l).map(|j| j < u.tokens.len()).collect())
            .collect(),
        token_lengths: items.iter().map(|u| u.tokens.len()).collect(),
    }
}

/// Seeded permutation of `0..n` cut into index groups of `batch_size`.
pub fn shuffled_batches(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
