//! Two-stage online inference: generator query -> flat MIPS top-k1 ->
//! cross-attention rescoring -> top-k2, plus a closed-loop benchmark
//! harness that reports P50/P99 latency and achieved QPS at a fixed
//! concurrency. Model and index are immutable shared state; every request
//! owns its scratch tape.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ServingConfig;
use crate::data::{Dataset, ItemId, UserRecord};
use crate::error::{Error, Result};
use crate::generator::{generator_forward, AttentionKind, ForwardMode};
use crate::mips::{topk_exact, topk_quantized, IndexedCorpus, QuantizedCorpus};
use crate::model::{Model, UserFeatures};
use crate::numeric::{Scalar, Session};
use crate::ranker::{batch_score, encode_long_history};

/// P99 service-level objective from the benchmark methodology.
pub const SLA_MS: f64 = 100.0;

/// Loaded stage-1 index; the quantized side is present when built with it.
#[derive(Debug, Clone)]
pub struct ServingIndex {
    pub exact: IndexedCorpus,
    pub quantized: Option<QuantizedCorpus>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Final,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub stage: Stage,
    /// `(item id, score)`, scores non-increasing, ids unique.
    pub entries: Vec<(ItemId, f64)>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage1_us: u64,
    pub stage2_us: u64,
    pub total_us: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CascadeResult {
    pub stage1: RetrievalResult,
    pub final_: RetrievalResult,
    pub timing: StageTiming,
}

/// The stage-1 query vector for a user: the generator's normalized
/// retrieval embedding, computed strictly without candidate tokens.
pub fn user_query_vector<S: Scalar>(model: &Model<S>, user: &UserRecord) -> Result<Vec<f32>> {
    let feats = UserFeatures::from_record(user, &model.cfg);
    let mut sess = Session::new(&model.params);
    let run = generator_forward(
        &mut sess,
        model,
        &feats,
        None,
        ForwardMode::Inference,
        AttentionKind::Decomposed,
    )?;
    debug_assert!(run.h_candidates.is_none());
    Ok(sess.value(run.h_ntp).to_f32_vec())
}

/// Run the full cascade for one user.
pub fn retrieve<S: Scalar>(
    model: &Model<S>,
    index: &ServingIndex,
    user: &UserRecord,
    cfg: &ServingConfig,
) -> Result<CascadeResult> {
    cfg.validate(index.exact.n_items)?;
    if index.exact.d_top != model.cfg.generator.d_top {
        return Err(Error::Config(format!(
            "index is {}-dimensional, model produces {}",
            index.exact.d_top,
            model.cfg.generator.d_top
        )));
    }

    let t0 = Instant::now();
    let query = user_query_vector(model, user)?;
    let stage1_entries = match (&index.quantized, cfg.quantized) {
        (Some(q), true) => topk_quantized(q, &query, cfg.k1)?,
        (None, true) => {
            return Err(Error::Config(
                "quantized serving requested but the index has no quantized side".into(),
            ))
        }
        _ => topk_exact(&index.exact, &query, cfg.k1)?,
    };
    let stage1 = RetrievalResult {
        stage: Stage::Stage1,
        entries: stage1_entries.iter().map(|&(i, s)| (i, s as f64)).collect(),
    };
    let stage1_us = t0.elapsed().as_micros() as u64;

    let t1 = Instant::now();
    let final_entries = if cfg.mode.reranks() {
        let feats = UserFeatures::from_record(user, &model.cfg);
        let candidates: Vec<ItemId> = stage1.entries.iter().map(|(i, _)| *i).collect();
        let mut sess = Session::new(&model.params);
        let enc = encode_long_history(&mut sess, model, &feats.long_items)?;
        let scores = batch_score(&mut sess, model, &candidates, &enc)?;
        let mut rescored: Vec<(ItemId, f64)> = candidates
            .iter()
            .enumerate()
            .map(|(row, &item)| (item, sess.value(scores).get(row, 0).to_f64()))
            .collect();
        // stage-1 scores are discarded; order by the ranker score alone
        rescored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        rescored.truncate(cfg.k2);
        rescored
    } else {
        stage1.entries.iter().take(cfg.k2).copied().collect()
    };
    let stage2_us = t1.elapsed().as_micros() as u64;

    Ok(CascadeResult {
        stage1,
        final_: RetrievalResult {
            stage: Stage::Final,
            entries: final_entries,
        },
        timing: StageTiming {
            stage1_us,
            stage2_us,
            total_us: t0.elapsed().as_micros() as u64,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub requests: usize,
    pub warmup_excluded: usize,
    pub concurrency: usize,
    pub duration_ms: f64,
    pub qps: f64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub stage1_mean_us: f64,
    pub stage2_mean_us: f64,
    pub sla_ms: f64,
    pub sla_violated: bool,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub concurrency: usize,
    pub requests: usize,
    /// Requests excluded from statistics at the front of each worker's stream.
    pub warmup: usize,
    pub seed: u64,
}

/// Nearest-rank quantile on a sorted sample: exact, so the estimation error
/// is zero (well under the 1% budget).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Closed-loop benchmark: `concurrency` workers issue requests back to back
/// over a deterministic user stream until the request budget is spent.
/// Timings are wall-clock and excluded from determinism claims.
pub fn bench<S: Scalar>(
    model: &Model<S>,
    index: &ServingIndex,
    dataset: &Dataset,
    cfg: &ServingConfig,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if dataset.users.is_empty() {
        return Err(Error::Argument("benchmark needs at least one user".into()));
    }
    if opts.concurrency == 0 || opts.requests == 0 {
        return Err(Error::Argument("concurrency and requests must be positive".into()));
    }
    let mut order: Vec<usize> = (0..dataset.users.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    order.shuffle(&mut rng);

    let next_request = AtomicUsize::new(0);
    let samples: Mutex<Vec<(usize, f64, u64, u64)>> = Mutex::new(Vec::with_capacity(opts.requests));
    let started = Instant::now();

    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for _ in 0..opts.concurrency {
            handles.push(scope.spawn(|| -> Result<()> {
                loop {
                    let req = next_request.fetch_add(1, Ordering::Relaxed);
                    if req >= opts.requests {
                        return Ok(());
                    }
                    let user = &dataset.users[order[req % order.len()]];
                    let t = Instant::now();
                    let result = retrieve(model, index, user, cfg)?;
                    let elapsed_ms = t.elapsed().as_secs_f64() * 1000.0;
                    samples.lock().expect("bench mutex").push((
                        req,
                        elapsed_ms,
                        result.timing.stage1_us,
                        result.timing.stage2_us,
                    ));
                }
            }));
        }
        for h in handles {
            h.join().expect("bench worker panicked")?;
        }
        Ok(())
    })?;

    let duration_ms = started.elapsed().as_secs_f64() * 1000.0;
    let mut samples = samples.into_inner().expect("bench mutex");
    samples.sort_by_key(|s| s.0);
    let measured: Vec<_> = samples
        .iter()
        .filter(|(req, ..)| *req >= opts.warmup.min(opts.requests.saturating_sub(1)))
        .collect();
    let mut latencies: Vec<f64> = measured.iter().map(|s| s.1).collect();
    latencies.sort_by(|a, b| a.total_cmp(b));
    let n = latencies.len().max(1);
    let mean_ms = latencies.iter().sum::<f64>() / n as f64;
    let p50_ms = quantile(&latencies, 0.50);
    let p99_ms = quantile(&latencies, 0.99);

    Ok(BenchReport {
        requests: samples.len(),
        warmup_excluded: samples.len() - measured.len(),
        concurrency: opts.concurrency,
        duration_ms,
        qps: samples.len() as f64 / (duration_ms / 1000.0),
        mean_ms,
        p50_ms,
        p99_ms,
        stage1_mean_us: measured.iter().map(|s| s.2 as f64).sum::<f64>() / n as f64,
        stage2_mean_us: measured.iter().map(|s| s.3 as f64).sum::<f64>() / n as f64,
        sla_ms: SLA_MS,
        sla_violated: p99_ms > SLA_MS,
    })
}

/// Histogram dump for the optional CSV artifact: `(upper_bound_ms, count)`.
pub fn latency_histogram(latencies_ms: &[f64], buckets: usize) -> Vec<(f64, usize)> {
    if latencies_ms.is_empty() || buckets == 0 {
        return Vec::new();
    }
    let max = latencies_ms.iter().cloned().fold(f64::MIN, f64::max);
    let width = (max / buckets as f64).max(1e-9);
    let mut hist = vec![0usize; buckets];
    for &l in latencies_ms {
        let b = ((l / width) as usize).min(buckets - 1);
        hist[b] += 1;
    }
    hist.into_iter()
        .enumerate()
        .map(|(i, c)| ((i + 1) as f64 * width, c))
        .collect()
}
