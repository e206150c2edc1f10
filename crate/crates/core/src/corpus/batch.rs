//! The mixed caption/replay mini-batch stream.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Index of a sample in the caption pool or the replay pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainItem {
    Caption(usize),
    Replay(usize),
}

pub type Batch = Vec<TrainItem>;

/// One epoch over `captions ∪ replay`: the pooled indices are shuffled once
/// with a permutation derived from `seed` and cut into consecutive batches.
/// The last batch may be short.
pub fn mix_batches<C, R>(
    captions: &[C],
    replay: &[R],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if captions.is_empty() && replay.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut pool: Vec<TrainItem> = (0..captions.len())
        .map(TrainItem::Caption)
        .chain((0..replay.len()).map(TrainItem::Replay))
        .collect();
    pool.shuffle(&mut substream(seed, "batches"));
    Ok(pool.chunks(batch_size).map(<[TrainItem]>::to_vec).collect())
}
