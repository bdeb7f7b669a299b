//! Training batches with in-batch negatives: each user's target doubles as
//! a negative candidate for every other user in the batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ItemId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    /// Indices into the dataset's user list.
    pub user_indices: Vec<usize>,
    /// Target item of each user, in the same order; user `j`'s candidate set
    /// is this whole list with `j` as the positive index.
    pub target_items: Vec<ItemId>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.user_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.user_indices.is_empty()
    }

    /// The negative items for the user at batch position `pos`.
    pub fn negatives_for(&self, pos: usize) -> Vec<ItemId> {
        self.target_items
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != pos)
            .map(|(_, &item)| item)
            .collect()
    }
}

/// Deterministic shuffled batching. Partial trailing batches are dropped
/// (training only cares about full in-batch negative sets).
pub struct BatchIterator {
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    targets: Vec<ItemId>,
}

impl BatchIterator {
    pub fn new(dataset: &Dataset, batch_size: usize, seed: u64) -> Result<BatchIterator> {
        if batch_size < 2 {
            return Err(Error::Argument(format!(
                "batch_size must be at least 2 for in-batch negatives, got {batch_size}"
            )));
        }
        if batch_size > dataset.users.len() {
            return Err(Error::Argument(format!(
                "batch_size {} exceeds user count {}",
                batch_size,
                dataset.users.len()
            )));
        }
        let mut order: Vec<usize> = (0..dataset.users.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        Ok(BatchIterator {
            order,
            batch_size,
            cursor: 0,
            targets: dataset.users.iter().map(|u| u.target.item_id).collect(),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len() / self.batch_size
    }
}

impl Iterator for BatchIterator {
    type Item = TrainBatch;

    fn next(&mut self) -> Option<TrainBatch> {
        if self.cursor + self.batch_size > self.order.len() {
            return None;
        }
        let user_indices = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        let target_items = user_indices.iter().map(|&u| self.targets[u]).collect();
        Some(TrainBatch {
            user_indices,
            target_items,
        })
    }
}
