//! Lightweight target-aware ranker: the candidate queries a single-head
//! cross-attention over the encoded long history, and the pooled context is
//! projected to one relevance score. No residuals, no layer norm.
//!
//! Only the valid rows of the long history are materialized; the declared
//! capacity (`long_len`) just bounds how much history is kept, so padding
//! can never receive attention weight by construction.

use std::sync::Arc;

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{Scalar, Session, ValueId};

#[derive(Debug, Clone, Copy)]
pub struct LongHistoryEncoding {
    /// `valid_len x d` rows of MLP-encoded item embeddings.
    pub h_long: ValueId,
    pub valid_len: usize,
    pub long_len: usize,
}

/// Keys and values over the long history, computed once per user and reused
/// across every candidate scored against it.
#[derive(Debug, Clone, Copy)]
pub struct RankerKv {
    pub keys: ValueId,
    pub values: ValueId,
    pub valid_len: usize,
}

/// Encode the latest `long_len` items of a history. Errors on empty input.
pub fn encode_long_history<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    items: &[ItemId],
) -> Result<LongHistoryEncoding> {
    if items.is_empty() {
        return Err(Error::Argument(
            "ranker needs a non-empty history".into(),
        ));
    }
    let long_len = model.cfg.ranker.long_len;
    let start = items.len().saturating_sub(long_len);
    let kept = &items[start..];
    let table = sess.param(model.embedding);
    let rows = sess.gather(table, Arc::new(kept.to_vec()))?;
    let h_long = model.ranker.long_mlp.forward(sess, rows)?;
    Ok(LongHistoryEncoding {
        h_long,
        valid_len: kept.len(),
        long_len,
    })
}

pub fn ranker_kv<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    enc: &LongHistoryEncoding,
) -> Result<RankerKv> {
    let w_k = sess.param(model.ranker.w_k);
    let w_v = sess.param(model.ranker.w_v);
    Ok(RankerKv {
        keys: sess.matmul(enc.h_long, w_k)?,
        values: sess.matmul(enc.h_long, w_v)?,
        valid_len: enc.valid_len,
    })
}

/// Candidate-side queries from raw shared embeddings: `MLP_query(e*) W_Q`,
/// one row per candidate. Shared across users scoring the same candidates.
pub fn encode_ranker_queries<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    items: &[ItemId],
) -> Result<ValueId> {
    if items.is_empty() {
        return Err(Error::Argument("no candidates to score".into()));
    }
    let table = sess.param(model.embedding);
    let rows = sess.gather(table, Arc::new(items.to_vec()))?;
    let encoded = model.ranker.query_mlp.forward(sess, rows)?;
    let w_q = sess.param(model.ranker.w_q);
    sess.matmul(encoded, w_q)
}

/// Score a batch of candidate queries against one user's K/V. Returns a
/// `B x 1` score column; identical to scoring candidates one at a time.
pub fn batch_score_queries<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    queries: ValueId,
    kv: &RankerKv,
) -> Result<ValueId> {
    let d_k = model.cfg.ranker.d_k;
    let scores = sess.matmul_tb(queries, kv.keys)?;
    let scaled = sess.scale(scores, 1.0 / (d_k as f64).sqrt());
    let attn = sess.softmax_rows(scaled, None)?;
    let context = sess.matmul(attn, kv.values)?;
    model.ranker.ca_mlp.forward(sess, context)
}

/// Vectorized relevance scores for `candidates` against the encoded history.
pub fn batch_score<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    candidates: &[ItemId],
    enc: &LongHistoryEncoding,
) -> Result<ValueId> {
    let queries = encode_ranker_queries(sess, model, candidates)?;
    let kv = ranker_kv(sess, model, enc)?;
    batch_score_queries(sess, model, queries, &kv)
}

/// Single-candidate convenience wrapper over [`batch_score`].
pub fn cross_attention_score<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    candidate: ItemId,
    enc: &LongHistoryEncoding,
) -> Result<ValueId> {
    let scores = batch_score(sess, model, &[candidate], enc)?;
    Ok(sess.sum_all(scores))
}

/// Ranking InfoNCE over a `B x 1` score column; the positive row is at
/// `positive` and the denominator covers every row.
pub fn loss_ca_info<S: Scalar>(
    sess: &mut Session<S>,
    scores: ValueId,
    positive: usize,
) -> Result<ValueId> {
    let logits = sess.transpose(scores);
    let ce = sess.row_softmax_cross_entropy(logits, Arc::new(vec![positive]))?;
    Ok(sess.sum_all(ce))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::numeric::mlp::mlp_forward;
    use crate::numeric::Matrix;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.n_items = 20;
        cfg.generator.d = 8;
        cfg.generator.d_top = 8;
        cfg.generator.mlp_hidden = 8;
        cfg.generator.l_short = 4;
        cfg.generator.layers = 1;
        cfg.ranker.long_len = 10;
        cfg.ranker.d_k = 8;
        cfg
    }

    #[test]
    fn empty_history_rejected() {
        let model: Model<f64> = Model::new(tiny_cfg(), 20).unwrap();
        let mut sess = Session::new(&model.params);
        assert!(encode_long_history(&mut sess, &model, &[]).is_err());
    }

    #[test]
    fn history_longer_than_capacity_keeps_latest() {
        let model: Model<f64> = Model::new(tiny_cfg(), 21).unwrap();
        let mut sess = Session::new(&model.params);
        let items: Vec<ItemId> = (0..15).map(|i| i % 20).collect();
        let enc = encode_long_history(&mut sess, &model, &items).unwrap();
        assert_eq!(enc.valid_len, 10);
        // row 0 must encode item 5 (the 15-item history truncated to the last 10)
        let e5 = sess.constant(Matrix::from_vec(
            1,
            8,
            model.params.value(model.embedding).row(5).to_vec(),
        ).unwrap());
        let direct = mlp_forward(&mut sess, e5, &model.ranker.long_mlp.layers).unwrap();
        assert_eq!(sess.value(enc.h_long).row(0), sess.value(direct).row(0));
    }

    #[test]
    fn row_encoding_matches_direct_composition() {
        let model: Model<f64> = Model::new(tiny_cfg(), 22).unwrap();
        let mut sess = Session::new(&model.params);
        let enc = encode_long_history(&mut sess, &model, &[7]).unwrap();
        assert_eq!(enc.valid_len, 1);
        let e7 = sess.constant(Matrix::from_vec(
            1,
            8,
            model.params.value(model.embedding).row(7).to_vec(),
        ).unwrap());
        let direct = mlp_forward(&mut sess, e7, &model.ranker.long_mlp.layers).unwrap();
        assert_eq!(sess.value(enc.h_long), sess.value(direct));
    }

    #[test]
    fn singleton_history_context_is_its_value_row() {
        let model: Model<f64> = Model::new(tiny_cfg(), 23).unwrap();
        let mut sess = Session::new(&model.params);
        let enc = encode_long_history(&mut sess, &model, &[3]).unwrap();
        let kv = ranker_kv(&mut sess, &model, &enc).unwrap();
        // softmax over a single key is 1, so the context equals that value row
        let queries = encode_ranker_queries(&mut sess, &model, &[9]).unwrap();
        let scores = sess.matmul_tb(queries, kv.keys).unwrap();
        let scaled = sess.scale(scores, 1.0 / (8.0f64).sqrt());
        let attn = sess.softmax_rows(scaled, None).unwrap();
        assert_eq!(sess.value(attn).data(), &[1.0]);
        let ctx = sess.matmul(attn, kv.values).unwrap();
        assert_eq!(sess.value(ctx).data(), sess.value(kv.values).data());
    }

    #[test]
    fn duplicate_history_rows_renormalize_to_same_score() {
        let model: Model<f64> = Model::new(tiny_cfg(), 24).unwrap();
        let mut sess = Session::new(&model.params);
        let single = encode_long_history(&mut sess, &model, &[4]).unwrap();
        let tripled = encode_long_history(&mut sess, &model, &[4, 4, 4]).unwrap();
        let s1 = cross_attention_score(&mut sess, &model, 11, &single).unwrap();
        let s3 = cross_attention_score(&mut sess, &model, 11, &tripled).unwrap();
        let diff = (sess.scalar_value(s1) - sess.scalar_value(s3)).abs();
        assert!(diff < 1e-12, "duplicated rows changed the score by {diff}");
    }

    #[test]
    fn batch_score_equals_scalar_path() {
        let model: Model<f64> = Model::new(tiny_cfg(), 25).unwrap();
        let mut sess = Session::new(&model.params);
        let history: Vec<ItemId> = vec![1, 5, 9, 13, 2];
        let enc = encode_long_history(&mut sess, &model, &history).unwrap();
        let candidates: Vec<ItemId> = (0..20).collect();
        let batch = batch_score(&mut sess, &model, &candidates, &enc).unwrap();
        for (i, &cand) in candidates.iter().enumerate() {
            let single = cross_attention_score(&mut sess, &model, cand, &enc).unwrap();
            let a = sess.value(batch).get(i, 0);
            let b = sess.scalar_value(single);
            assert!((a - b).abs() <= 1e-6, "candidate {cand}: {a} vs {b}");
        }
    }

    #[test]
    fn permuting_candidates_permutes_scores() {
        let model: Model<f64> = Model::new(tiny_cfg(), 26).unwrap();
        let mut sess = Session::new(&model.params);
        let enc = encode_long_history(&mut sess, &model, &[3, 8, 1]).unwrap();
        let fwd = batch_score(&mut sess, &model, &[2, 6, 17], &enc).unwrap();
        let rev = batch_score(&mut sess, &model, &[17, 6, 2], &enc).unwrap();
        assert_eq!(sess.value(fwd).get(0, 0), sess.value(rev).get(2, 0));
        assert_eq!(sess.value(fwd).get(1, 0), sess.value(rev).get(1, 0));
        assert_eq!(sess.value(fwd).get(2, 0), sess.value(rev).get(0, 0));
    }

    #[test]
    fn loss_ca_uniform_and_dominant() {
        let model: Model<f64> = Model::new(tiny_cfg(), 27).unwrap();
        let mut sess = Session::new(&model.params);
        let uniform = sess.constant(Matrix::zeros(16, 1));
        let l = loss_ca_info(&mut sess, uniform, 5).unwrap();
        assert!((sess.scalar_value(l) - (16.0f64).ln()).abs() < 1e-12);

        let mut dominant = Matrix::zeros(4, 1);
        dominant.set(2, 0, 60.0);
        let dom = sess.constant(dominant);
        let l2 = loss_ca_info(&mut sess, dom, 2).unwrap();
        assert!(sess.scalar_value(l2) < 1e-9);

        // hand case: scores (1, 0, 0), positive first
        let hand = sess.constant(Matrix::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap());
        let l3 = loss_ca_info(&mut sess, hand, 0).unwrap();
        let expect = -(1.0f64.exp() / (1.0f64.exp() + 2.0)).ln();
        assert!((sess.scalar_value(l3) - expect).abs() < 1e-12);
    }
}
