//! Synthetic corpus with planted preference structure at two grains: users
//! draw items from a sparse topic mixture with a slow drift toward a
//! secondary topic, and most draws revisit a small personal pool of
//! favorite items sampled from that mixture. The held-out target comes
//! from the same process. A learner that recovers the topic structure
//! beats chance at retrieval by design, and a ranker that reads the long
//! history can resolve the favorite pool far better than a single user
//! vector can — which is what makes training-quality comparisons between
//! the cascade stages meaningful at this scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Interaction, ItemId, UserRecord};
use crate::config::ConfigMap;
use crate::error::{Error, Result};

/// Probability mass moved to the secondary topic by the end of the sequence.
const DRIFT_MAX: f64 = 0.20;
/// Probability of an off-preference (uniform corpus) interaction.
const NOISE_PROB: f64 = 0.10;
/// Size of each user's favorite-item pool.
const FAVORITE_POOL: usize = 24;
/// Probability that a non-noise draw revisits the favorite pool.
const FAVORITE_PROB: f64 = 0.85;
/// Fraction of each topic's items that form its hot head.
const HOT_FRACTION: f64 = 0.2;

pub const DEFAULT_DEMOGRAPHICS_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthManifest {
    pub seed: u64,
    pub n_items: usize,
    pub n_users: usize,
    pub n_topics: usize,
    pub seq_len: usize,
    pub d_u: usize,
}

impl SynthManifest {
    pub fn to_map(&self) -> ConfigMap {
        let mut m = ConfigMap::new();
        m.set("seed", self.seed);
        m.set("n_items", self.n_items);
        m.set("n_users", self.n_users);
        m.set("n_topics", self.n_topics);
        m.set("seq_len", self.seq_len);
        m.set("d_u", self.d_u);
        m
    }

    pub fn from_map(m: &ConfigMap) -> Result<SynthManifest> {
        let get = |key: &str| -> Result<u64> {
            m.get(key)
                .ok_or_else(|| Error::Integrity(format!("manifest missing key {key}")))?
                .parse()
                .map_err(|_| Error::Integrity(format!("manifest key {key} not an integer")))
        };
        Ok(SynthManifest {
            seed: get("seed")?,
            n_items: get("n_items")? as usize,
            n_users: get("n_users")? as usize,
            n_topics: get("n_topics")? as usize,
            seq_len: get("seq_len")? as usize,
            d_u: get("d_u")? as usize,
        })
    }
}

/// Demographics are reconstructible from the manifest: a deterministic
/// function of (seed, user_id) so a written dataset loads back identically.
pub fn demographics_vector(seed: u64, user_id: u64, d_u: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(user_id.wrapping_mul(0x2545_f491_4f6c_dd1d)),
    );
    (0..d_u).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

pub fn synth_generate(
    seed: u64,
    n_items: usize,
    n_users: usize,
    n_topics: usize,
    seq_len: usize,
) -> Result<Dataset> {
    if n_topics == 0 || n_topics > n_items {
        return Err(Error::Argument(format!(
            "need 1 <= n_topics <= n_items, got n_topics={n_topics}, n_items={n_items}"
        )));
    }
    if seq_len < 2 {
        return Err(Error::Argument(format!(
            "seq_len must be at least 2, got {seq_len}"
        )));
    }
    if n_users == 0 {
        return Err(Error::Argument("n_users must be positive".into()));
    }

    let mut corpus_rng = ChaCha8Rng::seed_from_u64(seed);
    // First n_topics items seed one per topic so no topic is empty;
    // the rest are assigned uniformly.
    let mut item_topics = vec![0usize; n_items];
    let mut topic_items: Vec<Vec<ItemId>> = vec![Vec::new(); n_topics];
    for (item, topic_slot) in item_topics.iter_mut().enumerate() {
        let topic = if item < n_topics {
            item
        } else {
            corpus_rng.gen_range(0..n_topics)
        };
        *topic_slot = topic;
        topic_items[topic].push(item);
    }
    // Every topic exposes a "hot" head of its items; favorite pools draw
    // from it, so users of the same topic compete over overlapping items.
    let hot_items: Vec<&[ItemId]> = topic_items
        .iter()
        .map(|items| {
            let n = ((items.len() as f64 * HOT_FRACTION).ceil() as usize).clamp(1, items.len());
            &items[..n]
        })
        .collect();
    // Zipf-weighted topic popularity: user interests are sparse and skewed.
    let topic_cdf: Vec<f64> = {
        let weights: Vec<f64> = (0..n_topics).map(|t| 1.0 / (t + 1) as f64).collect();
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        weights
            .iter()
            .map(|w| {
                acc += w / total;
                acc
            })
            .collect()
    };
    let sample_topic = |rng: &mut ChaCha8Rng| -> usize {
        let x: f64 = rng.gen_range(0.0..1.0);
        topic_cdf.iter().position(|&c| x < c).unwrap_or(n_topics - 1)
    };

    let mut users = Vec::with_capacity(n_users);
    for user_idx in 0..n_users {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed.wrapping_mul(0x5851_f42d_4c95_7f2d)
                .wrapping_add(user_idx as u64 + 1),
        );
        let primary = sample_topic(&mut rng);
        let secondary = if n_topics == 1 {
            primary
        } else {
            let mut s = rng.gen_range(0..n_topics - 1);
            if s >= primary {
                s += 1;
            }
            s
        };
        // favorite pool sampled from the hot head of the (undrifted) mixture
        let pool: Vec<ItemId> = (0..FAVORITE_POOL)
            .map(|_| {
                let topic = if rng.gen_bool(DRIFT_MAX / 2.0) { secondary } else { primary };
                let items = hot_items[topic];
                items[rng.gen_range(0..items.len())]
            })
            .collect();

        let draw = |rng: &mut ChaCha8Rng, step: usize| -> Interaction {
            let drift = DRIFT_MAX * step as f64 / seq_len.max(1) as f64;
            let (item_id, on_preference) = if rng.gen_bool(NOISE_PROB) {
                (rng.gen_range(0..n_items), false)
            } else if rng.gen_bool(FAVORITE_PROB) {
                (pool[rng.gen_range(0..pool.len())], true)
            } else {
                let topic = if rng.gen_bool(drift) { secondary } else { primary };
                let items = &topic_items[topic];
                (items[rng.gen_range(0..items.len())], true)
            };
            let dwell = if on_preference {
                rng.gen_range(0.55..1.0)
            } else {
                rng.gen_range(0.0..0.6)
            };
            let engagement = if dwell > 0.7 {
                2
            } else if dwell > 0.35 {
                1
            } else {
                0
            };
            Interaction {
                item_id,
                timestamp: step as i64,
                dwell,
                engagement,
            }
        };

        let history: Vec<Interaction> = (0..seq_len).map(|t| draw(&mut rng, t)).collect();
        let mut target = draw(&mut rng, seq_len);
        // Targets carry a global clock so the train/test split is chronological.
        target.timestamp = 1_000_000 + user_idx as i64;

        users.push(UserRecord {
            user_id: user_idx as u64,
            demographics: demographics_vector(seed, user_idx as u64, DEFAULT_DEMOGRAPHICS_DIM),
            history,
            target,
        });
    }

    let ds = Dataset {
        n_items,
        users,
        split: None,
        manifest: Some(SynthManifest {
            seed,
            n_items,
            n_users,
            n_topics,
            seq_len,
            d_u: DEFAULT_DEMOGRAPHICS_DIM,
        }),
        item_topics: Some(item_topics),
    };
    ds.validate()?;
    Ok(ds)
}
