//! Item corpus, user interaction sequences, ingestion, chronological
//! splitting, and the synthetic generator used by the training-quality tests.

pub mod batch;
pub mod synth;
pub mod tsv;

pub use batch::{BatchIterator, TrainBatch};
pub use synth::{synth_generate, SynthManifest};
pub use tsv::{load_dataset, parse_single_user, write_dataset};

use crate::error::{Error, Result};

pub type ItemId = usize;

/// Engagement feature width: normalized dwell plus a 3-way one-hot.
pub const FEATURE_DIM: usize = 4;

/// Dwell threshold above which an interaction counts as a long view.
pub const LONG_VIEW_DWELL: f64 = 0.7;

/// Number of most-recent items in the short behavior sequence.
pub const RS_SEQ_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub item_id: ItemId,
    pub timestamp: i64,
    /// Normalized dwell in [0, 1].
    pub dwell: f64,
    /// Engagement class in {0, 1, 2}.
    pub engagement: u8,
}

impl Interaction {
    /// Fixed-width feature vector: `[dwell, onehot(engagement)]`.
    pub fn features(&self) -> [f64; FEATURE_DIM] {
        let mut f = [0.0; FEATURE_DIM];
        f[0] = self.dwell;
        f[1 + self.engagement as usize] = 1.0;
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserRecord {
    pub user_id: u64,
    pub demographics: Vec<f64>,
    /// Chronological interactions, strictly increasing timestamps.
    pub history: Vec<Interaction>,
    /// Held-out target; its timestamp postdates the whole history.
    pub target: Interaction,
}

impl UserRecord {
    /// Most recent items, newest last.
    pub fn seq_rs(&self) -> Vec<ItemId> {
        let start = self.history.len().saturating_sub(RS_SEQ_LEN);
        self.history[start..].iter().map(|i| i.item_id).collect()
    }

    /// Every interacted item counts as a click.
    pub fn seq_click(&self) -> Vec<ItemId> {
        self.history.iter().map(|i| i.item_id).collect()
    }

    /// Items whose dwell exceeds the long-view threshold.
    pub fn seq_long_view(&self) -> Vec<ItemId> {
        self.history
            .iter()
            .filter(|i| i.dwell > LONG_VIEW_DWELL)
            .map(|i| i.item_id)
            .collect()
    }

    /// Item ids of the latest `n` interactions, oldest first.
    pub fn long_history_ids(&self, n: usize) -> Vec<ItemId> {
        let start = self.history.len().saturating_sub(n);
        self.history[start..].iter().map(|i| i.item_id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_items: usize,
    pub users: Vec<UserRecord>,
    pub split: Option<SplitTag>,
    /// Present when the data came from the synthetic generator.
    pub manifest: Option<SynthManifest>,
    /// Topic labels used for generation only; never fed to the model.
    pub item_topics: Option<Vec<usize>>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        for user in &self.users {
            let mut prev: Option<i64> = None;
            for it in &self.history_and_target(user) {
                if it.item_id >= self.n_items {
                    return Err(Error::Integrity(format!(
                        "user {}: item id {} outside corpus of {}",
                        user.user_id, it.item_id, self.n_items
                    )));
                }
                if !(0.0..=1.0).contains(&it.dwell) || !it.dwell.is_finite() {
                    return Err(Error::Integrity(format!(
                        "user {}: dwell {} outside [0, 1]",
                        user.user_id, it.dwell
                    )));
                }
                if it.engagement > 2 {
                    return Err(Error::Integrity(format!(
                        "user {}: engagement code {} outside 0..=2",
                        user.user_id, it.engagement
                    )));
                }
                if let Some(p) = prev {
                    if it.timestamp <= p {
                        return Err(Error::Integrity(format!(
                            "user {}: timestamps not strictly increasing at {}",
                            user.user_id, it.timestamp
                        )));
                    }
                }
                prev = Some(it.timestamp);
            }
        }
        Ok(())
    }

    fn history_and_target(&self, user: &UserRecord) -> Vec<Interaction> {
        let mut v = user.history.clone();
        v.push(user.target.clone());
        v
    }

    /// Chronological split on target timestamps: every test target strictly
    /// postdates every train target. The boundary moves forward past ties.
    pub fn split_chronological(&self, train_frac: f64) -> Result<(Dataset, Dataset)> {
        if self.users.is_empty() {
            return Err(Error::Argument("cannot split an empty dataset".into()));
        }
        let mut order: Vec<usize> = (0..self.users.len()).collect();
        order.sort_by_key(|&i| (self.users[i].target.timestamp, i));

        let mut cut = ((self.users.len() as f64) * train_frac).ceil() as usize;
        cut = cut.clamp(1, self.users.len());
        while cut < self.users.len()
            && self.users[order[cut]].target.timestamp
                == self.users[order[cut - 1]].target.timestamp
        {
            cut += 1;
        }
        if cut == self.users.len() {
            return Err(Error::Argument(
                "chronological split impossible: no strictly later target timestamps".into(),
            ));
        }

        let pick = |ids: &[usize], tag: SplitTag| Dataset {
            n_items: self.n_items,
            users: ids.iter().map(|&i| self.users[i].clone()).collect(),
            split: Some(tag),
            manifest: self.manifest.clone(),
            item_topics: self.item_topics.clone(),
        };
        Ok((pick(&order[..cut], SplitTag::Train), pick(&order[cut..], SplitTag::Test)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mini_user(id: u64, items: &[ItemId]) -> UserRecord {
        let mut inter: Vec<Interaction> = items
            .iter()
            .enumerate()
            .map(|(t, &item_id)| Interaction {
                item_id,
                timestamp: t as i64,
                dwell: 0.5,
                engagement: 1,
            })
            .collect();
        let target = inter.pop().unwrap();
        UserRecord {
            user_id: id,
            demographics: vec![0.0; 2],
            history: inter,
            target,
        }
    }

    #[test]
    fn behavior_sequences() {
        let mut u = mini_user(0, &[1, 2, 3, 4]);
        u.history[1].dwell = 0.9;
        assert_eq!(u.seq_click(), vec![1, 2, 3]);
        assert_eq!(u.seq_long_view(), vec![2]);
        assert_eq!(u.long_history_ids(2), vec![2, 3]);
    }

    #[test]
    fn validate_rejects_out_of_corpus_item() {
        let ds = Dataset {
            n_items: 2,
            users: vec![mini_user(0, &[0, 5])],
            split: None,
            manifest: None,
            item_topics: None,
        };
        assert!(ds.validate().is_err());
    }

    #[test]
    fn chronological_split_is_strict() {
        let mut users = Vec::new();
        for i in 0..10u64 {
            let mut u = mini_user(i, &[0, 1]);
            u.target.timestamp = 100 + i as i64;
            users.push(u);
        }
        let ds = Dataset {
            n_items: 2,
            users,
            split: None,
            manifest: None,
            item_topics: None,
        };
        let (train, test) = ds.split_chronological(0.7).unwrap();
        let max_train = train.users.iter().map(|u| u.target.timestamp).max().unwrap();
        let min_test = test.users.iter().map(|u| u.target.timestamp).min().unwrap();
        assert!(max_train < min_test);
        assert_eq!(train.users.len() + test.users.len(), 10);
    }
}
