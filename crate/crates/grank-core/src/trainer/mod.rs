//! Joint multi-task optimization of generator, auxiliary head, and ranker
//! with in-batch negatives: Adam with global-norm clipping, deterministic
//! epochs, per-epoch checkpoints, and a JSONL metrics log.

pub mod checkpoint;

pub use checkpoint::{load_model, read_checkpoint, save_checkpoint, CheckpointData};

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{AppConfig, TrainingConfig};
use crate::data::{BatchIterator, Dataset, TrainBatch};
use crate::error::{Error, Result};
use crate::generator::{
    encode_candidates, encode_ntp_items, generator_forward, loss_ntp_with_items, loss_sa_info,
    AttentionKind, CandidateBatch, ForwardMode,
};
use crate::model::{Model, UserFeatures};
use crate::numeric::{Matrix, ParamSet, Scalar, Session, ValueId};
use crate::ranker::{batch_score_queries, encode_ranker_queries, encode_long_history, loss_ca_info, ranker_kv};

/// Adam state; moments live in the training precision.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub m: Vec<Matrix<S>>,
    pub v: Vec<Matrix<S>>,
    pub t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(params: &ParamSet<S>) -> Adam<S> {
        let m = params
            .iter()
            .map(|(_, p)| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect::<Vec<_>>();
        Adam {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One update from the gradients currently stored in `params`, with
    /// global-norm clipping applied to the raw gradients first.
    pub fn step(&mut self, params: &mut ParamSet<S>, tc: &TrainingConfig) {
        let norm = params.grad_norm();
        let clip = if tc.clip_norm > 0.0 && norm > tc.clip_norm {
            tc.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let b1 = S::from_f64(tc.beta1);
        let b2 = S::from_f64(tc.beta2);
        let one_m_b1 = S::from_f64(1.0 - tc.beta1);
        let one_m_b2 = S::from_f64(1.0 - tc.beta2);
        let eps = S::from_f64(tc.adam_eps);
        let bias1 = S::from_f64(1.0 - tc.beta1.powi(self.t as i32));
        let bias2 = S::from_f64(1.0 - tc.beta2.powi(self.t as i32));
        let lr = S::from_f64(tc.learning_rate);
        let clip_s = S::from_f64(clip);

        for id in params.ids().collect::<Vec<_>>() {
            let idx = id.index();
            let p = params.get_mut(id);
            for ((w, g), (m, v)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data().iter())
                .zip(
                    self.m[idx]
                        .data_mut()
                        .iter_mut()
                        .zip(self.v[idx].data_mut().iter_mut()),
                )
            {
                let g = *g * clip_s;
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Scalar loss values of one step (means over the batch).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub ntp: f64,
    pub sa: f64,
    pub ca: f64,
}

/// Per-batch forward pass producing the weighted multi-task loss. Heads
/// with a zero weight are skipped entirely, which is what makes the
/// ablation modes reachable from configuration alone.
pub fn batch_forward<'p, S: Scalar>(
    sess: &mut Session<'p, S>,
    model: &Model<S>,
    dataset: &Dataset,
    batch: &TrainBatch,
    tc: &TrainingConfig,
    kind: AttentionKind,
) -> Result<(ValueId, StepLosses)> {
    let b = batch.len();
    let use_ntp = tc.lambda0 > 0.0;
    let use_sa = tc.lambda1 > 0.0;
    let use_ca = tc.lambda2 > 0.0;

    // Batch-shared encodings: candidate tokens, item-side retrieval vectors,
    // ranker queries. All users score the same in-batch candidate set.
    let cands = if use_sa {
        Some(encode_candidates(
            sess,
            model,
            &CandidateBatch::from_batch_targets(&batch.target_items),
        )?)
    } else {
        None
    };
    let ntp_items = if use_ntp {
        Some(encode_ntp_items(sess, model, &batch.target_items)?)
    } else {
        None
    };
    let ranker_queries = if use_ca {
        Some(encode_ranker_queries(sess, model, &batch.target_items)?)
    } else {
        None
    };

    let mut ntp_terms: Vec<ValueId> = Vec::new();
    let mut sa_terms: Vec<ValueId> = Vec::new();
    let mut ca_terms: Vec<ValueId> = Vec::new();
    for (pos, &user_idx) in batch.user_indices.iter().enumerate() {
        let feats = UserFeatures::from_record(&dataset.users[user_idx], &model.cfg);
        if use_ntp || use_sa {
            let run = generator_forward(sess, model, &feats, cands, ForwardMode::Training, kind)?;
            if let Some(items) = ntp_items {
                ntp_terms.push(loss_ntp_with_items(sess, model, run.h_ntp, items, pos)?);
            }
            if use_sa {
                let h_c = run.h_candidates.ok_or_else(|| {
                    Error::Contract("auxiliary loss requested without candidates".into())
                })?;
                sa_terms.push(loss_sa_info(sess, model, h_c, pos)?);
            }
        }
        if let Some(queries) = ranker_queries {
            let enc = encode_long_history(sess, model, &feats.long_items)?;
            let kv = ranker_kv(sess, model, &enc)?;
            let scores = batch_score_queries(sess, model, queries, &kv)?;
            ca_terms.push(loss_ca_info(sess, scores, pos)?);
        }
    }

    let mean_of = |sess: &mut Session<'p, S>, terms: &[ValueId]| -> Result<Option<ValueId>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = sess.add(acc, t)?;
        }
        Ok(Some(sess.scale(acc, 1.0 / b as f64)))
    };
    let ntp = mean_of(sess, &ntp_terms)?;
    let sa = mean_of(sess, &sa_terms)?;
    let ca = mean_of(sess, &ca_terms)?;

    let total = total_loss(sess, (tc.lambda0, tc.lambda1, tc.lambda2), ntp, sa, ca)?;
    let read = |sess: &Session<'p, S>, v: Option<ValueId>| v.map_or(0.0, |v| sess.scalar_value(v));
    let losses = StepLosses {
        total: sess.scalar_value(total),
        ntp: read(sess, ntp),
        sa: read(sess, sa),
        ca: read(sess, ca),
    };
    Ok((total, losses))
}

/// Weighted sum of the per-head losses. A zero weight requires the matching
/// head to have been skipped upstream.
pub fn total_loss<S: Scalar>(
    sess: &mut Session<S>,
    lambdas: (f64, f64, f64),
    ntp: Option<ValueId>,
    sa: Option<ValueId>,
    ca: Option<ValueId>,
) -> Result<ValueId> {
    let mut acc: Option<ValueId> = None;
    for (lambda, term) in [(lambdas.0, ntp), (lambdas.1, sa), (lambdas.2, ca)] {
        match (lambda > 0.0, term) {
            (true, Some(t)) => {
                let scaled = sess.scale(t, lambda);
                acc = Some(match acc {
                    Some(a) => sess.add(a, scaled)?,
                    None => scaled,
                });
            }
            (true, None) => {
                return Err(Error::Contract(
                    "a positively weighted loss head was not computed".into(),
                ))
            }
            (false, Some(_)) => {
                return Err(Error::Contract(
                    "a zero-weighted loss head was computed anyway".into(),
                ))
            }
            (false, None) => {}
        }
    }
    acc.ok_or_else(|| Error::Contract("all loss weights are zero".into()))
}

/// One optimizer step over a batch. Deterministic given parameters, batch,
/// and optimizer state.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    dataset: &Dataset,
    batch: &TrainBatch,
    tc: &TrainingConfig,
    opt: &mut Adam<S>,
    kind: AttentionKind,
) -> Result<StepLosses> {
    model.params.zero_grads();
    let (grads, losses) = {
        let mut sess = Session::new(&model.params);
        let (total, losses) = batch_forward(&mut sess, model, dataset, batch, tc, kind)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                what: format!(
                    "training loss at step {}; batch users {:?}",
                    opt.t, batch.user_indices
                ),
            });
        }
        (sess.take_param_grads(total)?, losses)
    };
    for (id, g) in grads {
        model.params.accumulate_grad(id, &g)?;
    }
    opt.step(&mut model.params, tc);
    Ok(losses)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ntp: f64,
    pub loss_sa: f64,
    pub loss_ca: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Default)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs_run: usize,
    pub records: Vec<MetricsRecord>,
    pub last_losses: Option<StepLosses>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct TrainOptions<'a> {
    /// Where per-epoch checkpoints go; `None` trains in memory only.
    pub checkpoint_path: Option<&'a Path>,
    /// JSONL metrics sink; `None` keeps records in memory only.
    pub metrics_path: Option<&'a Path>,
    pub attention: AttentionKind,
    /// Epochs already completed (from a resumed checkpoint).
    pub start_epoch: usize,
}

impl<'a> Default for TrainOptions<'a> {
    fn default() -> Self {
        TrainOptions {
            checkpoint_path: None,
            metrics_path: None,
            attention: AttentionKind::Decomposed,
            start_epoch: 0,
        }
    }
}

/// Epoch loop over deterministic shuffled batches. The batch order of epoch
/// `e` depends only on `(seed, e)`, so resumed runs see the same stream.
pub fn train_loop<S: Scalar>(
    model: &mut Model<S>,
    train: &Dataset,
    app: &AppConfig,
    opt: &mut Adam<S>,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    let tc = &app.trainer;
    tc.validate()?;
    let mut summary = TrainSummary::default();
    let mut metrics_file = match opts.metrics_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    let started = Instant::now();
    let mut step = opt.t;

    for epoch in opts.start_epoch..tc.epochs {
        let epoch_seed = tc.seed.wrapping_add(0x9e37 * epoch as u64 + epoch as u64);
        let batches = BatchIterator::new(train, tc.batch_size, epoch_seed)?;
        for batch in batches {
            let losses = train_step(model, train, &batch, tc, opt, opts.attention)?;
            step += 1;
            summary.last_losses = Some(losses);
            if tc.log_interval > 0 && step % tc.log_interval as u64 == 0 {
                let rec = MetricsRecord {
                    step,
                    epoch,
                    loss_total: losses.total,
                    loss_ntp: losses.ntp,
                    loss_sa: losses.sa,
                    loss_ca: losses.ca,
                    wall_ms: started.elapsed().as_secs_f64() * 1000.0,
                };
                if let Some(f) = metrics_file.as_mut() {
                    serde_json::to_writer(&mut *f, &rec)?;
                    f.write_all(b"\n")?;
                }
                summary.records.push(rec);
            }
        }
        summary.epochs_run = epoch + 1;
        if let Some(path) = opts.checkpoint_path {
            save_checkpoint(path, model, Some(opt), app, epoch + 1)?;
            summary.checkpoints.push(path.to_path_buf());
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    summary.steps = step;
    // Epoch count 0 still snapshots initialization when a path is given.
    if tc.epochs == opts.start_epoch {
        if let Some(path) = opts.checkpoint_path {
            save_checkpoint(path, model, Some(opt), app, opts.start_epoch)?;
            summary.checkpoints.push(path.to_path_buf());
        }
    }
    Ok(summary)
}
