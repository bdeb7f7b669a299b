//! Target-aware generator: encodes the short history plus a personalized
//! query token, runs an N-layer pre-norm causal decoder on the decomposed
//! attention, and exposes the retrieval (NTP) and auxiliary score heads.
//! Candidate tokens ride along during training only; the serving path never
//! constructs them, and the leakage tests prove they cannot reach `h_u`.

pub mod attention;

pub use attention::{
    candidate_mask, decomposed_attention, full_attention_oracle, full_sequence_mask,
    user_token_mask, AttentionParams,
};

use std::sync::Arc;

use crate::data::{ItemId, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::model::{Model, UserFeatures};
use crate::numeric::{Matrix, Scalar, Session, ValueId};

/// Which attention implementation a forward pass runs on. `FullOracle`
/// exists for equivalence and leakage tests only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Decomposed,
    FullOracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Training,
    Inference,
}

/// Target item plus in-batch negatives, with the batch position each row
/// came from. Training-only; the inference path rejects it.
#[derive(Debug, Clone)]
pub struct CandidateBatch {
    pub items: Vec<ItemId>,
    pub provenance: Vec<usize>,
}

impl CandidateBatch {
    pub fn from_batch_targets(targets: &[ItemId]) -> CandidateBatch {
        CandidateBatch {
            items: targets.to_vec(),
            provenance: (0..targets.len()).collect(),
        }
    }
}

/// Candidate tokens after the auxiliary MLP, shareable across the users of
/// one batch on the same session.
#[derive(Debug, Clone, Copy)]
pub struct EncodedCandidates {
    pub value: ValueId,
    pub count: usize,
}

pub fn encode_candidates<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    batch: &CandidateBatch,
) -> Result<EncodedCandidates> {
    if batch.items.is_empty() {
        return Err(Error::Argument("empty candidate batch".into()));
    }
    let table = sess.param(model.embedding);
    let rows = sess.gather(table, Arc::new(batch.items.clone()))?;
    let value = model.generator.aux_mlp.forward(sess, rows)?;
    Ok(EncodedCandidates {
        value,
        count: batch.items.len(),
    })
}

/// Encode the last-L interactions into an `L x d` matrix, left-padded with
/// zero rows. Returns the matrix and the first valid row index. Positional
/// embeddings are added by the caller so this stays a pure composition of
/// the input MLP over `[e_t; f_t]`.
pub fn encode_interactions<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    items: &[ItemId],
    features: &[[f64; FEATURE_DIM]],
) -> Result<(ValueId, usize)> {
    let l = model.cfg.generator.l_short;
    let d = model.cfg.generator.d;
    if items.len() != features.len() {
        return Err(Error::Argument(format!(
            "{} items with {} feature rows",
            items.len(),
            features.len()
        )));
    }
    if items.len() > l {
        return Err(Error::Argument(format!(
            "history of {} exceeds short window {l}",
            items.len()
        )));
    }
    let valid_from = l - items.len();
    let valid = if items.is_empty() {
        None
    } else {
        let table = sess.param(model.embedding);
        let emb = sess.gather(table, Arc::new(items.to_vec()))?;
        let feat = sess.constant(Matrix::from_fn(items.len(), FEATURE_DIM, |i, j| {
            S::from_f64(features[i][j])
        }));
        let joined = sess.concat_cols(&[emb, feat])?;
        Some(model.generator.input_mlp.forward(sess, joined)?)
    };
    let x = match (valid_from, valid) {
        (0, Some(v)) => v,
        (_, None) => sess.constant(Matrix::zeros(l, d)),
        (pad, Some(v)) => {
            let padding = sess.constant(Matrix::zeros(pad, d));
            sess.concat_rows(&[padding, v])?
        }
    };
    Ok((x, valid_from))
}

fn pool_items<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    items: &[ItemId],
) -> Result<ValueId> {
    let d = model.cfg.generator.d;
    if items.is_empty() {
        return Ok(sess.constant(Matrix::zeros(1, d)));
    }
    let table = sess.param(model.embedding);
    let rows = sess.gather(table, Arc::new(items.to_vec()))?;
    let ones = sess.constant(Matrix::from_fn(1, items.len(), |_, _| S::ONE));
    sess.matmul(ones, rows)
}

/// Personalized query token: demographics concatenated with sum-pooled
/// behavior sequences, projected to width `d`.
pub fn build_query_token<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    feats: &UserFeatures,
) -> Result<ValueId> {
    let demo = sess.constant(Matrix::from_fn(1, model.cfg.d_u, |_, j| {
        S::from_f64(feats.demographics[j])
    }));
    let rs = pool_items(sess, model, &feats.seq_rs)?;
    let click = pool_items(sess, model, &feats.seq_click)?;
    let lv = pool_items(sess, model, &feats.seq_long_view)?;
    let joined = sess.concat_cols(&[demo, rs, click, lv])?;
    model.generator.query_mlp.forward(sess, joined)
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorRun {
    /// Decoder output at the query-token position, `1 x d`.
    pub h_u: ValueId,
    /// Unit-norm retrieval vector, `1 x d_top`.
    pub h_ntp: ValueId,
    /// Candidate outputs after the decoder, `B x d` (training only).
    pub h_candidates: Option<ValueId>,
}

/// Run the decoder for one user. `candidates` must be absent in inference
/// mode; that guard realizes the training-serving consistency contract.
pub fn generator_forward<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    feats: &UserFeatures,
    candidates: Option<EncodedCandidates>,
    mode: ForwardMode,
    kind: AttentionKind,
) -> Result<GeneratorRun> {
    if mode == ForwardMode::Inference && candidates.is_some() {
        return Err(Error::Contract(
            "candidate tokens are a training-only input; the serving path must not build them"
                .into(),
        ));
    }
    let l = model.cfg.generator.l_short;
    let heads = model.cfg.generator.heads;
    let b = candidates.map(|c| c.count).unwrap_or(0);

    let (x, valid_from) =
        encode_interactions(sess, model, &feats.short_items, &feats.short_features)?;
    let pos = sess.param(model.generator.pos_embedding);
    let x = sess.add(x, pos)?;
    let u = build_query_token(sess, model, feats)?;
    let h_x0 = sess.concat_rows(&[x, u])?;

    let user_mask = Arc::new(user_token_mask(l, valid_from));
    let cand_mask = Arc::new(candidate_mask(l, valid_from, b));
    let full_mask = Arc::new(full_sequence_mask(l, valid_from, b));

    let (h_x, h_c) = match kind {
        AttentionKind::Decomposed => {
            let mut h_x = h_x0;
            let mut h_c = candidates.map(|c| c.value);
            for layer in &model.generator.layers {
                let attn = AttentionParams {
                    w_q: layer.w_q,
                    w_k: layer.w_k,
                    w_v: layer.w_v,
                    heads,
                };
                let g1 = sess.param(layer.ln1_gain);
                let b1 = sess.param(layer.ln1_bias);
                let nx = sess.layer_norm(h_x, g1, b1)?;
                let nc = match h_c {
                    Some(c) => Some(sess.layer_norm(c, g1, b1)?),
                    None => None,
                };
                let (ox, oc) = decomposed_attention(
                    sess,
                    nx,
                    nc,
                    &attn,
                    &user_mask,
                    if b > 0 { Some(&cand_mask) } else { None },
                )?;
                h_x = sess.add(h_x, ox)?;
                if let (Some(c), Some(oc)) = (h_c, oc) {
                    h_c = Some(sess.add(c, oc)?);
                }

                let g2 = sess.param(layer.ln2_gain);
                let b2 = sess.param(layer.ln2_bias);
                let nx2 = sess.layer_norm(h_x, g2, b2)?;
                let fx = layer.ffn.forward(sess, nx2)?;
                h_x = sess.add(h_x, fx)?;
                if let Some(c) = h_c {
                    let nc2 = sess.layer_norm(c, g2, b2)?;
                    let fc = layer.ffn.forward(sess, nc2)?;
                    h_c = Some(sess.add(c, fc)?);
                }
            }
            (h_x, h_c)
        }
        AttentionKind::FullOracle => {
            // One concatenated sequence through every layer; the combined
            // mask keeps candidates isolated and user tokens causal.
            let mut h = match candidates {
                Some(c) => sess.concat_rows(&[h_x0, c.value])?,
                None => h_x0,
            };
            for layer in &model.generator.layers {
                let attn = AttentionParams {
                    w_q: layer.w_q,
                    w_k: layer.w_k,
                    w_v: layer.w_v,
                    heads,
                };
                let g1 = sess.param(layer.ln1_gain);
                let b1 = sess.param(layer.ln1_bias);
                let n1 = sess.layer_norm(h, g1, b1)?;
                let (o, _) = full_attention_oracle(sess, n1, None, &attn, &full_mask)?;
                h = sess.add(h, o)?;

                let g2 = sess.param(layer.ln2_gain);
                let b2 = sess.param(layer.ln2_bias);
                let n2 = sess.layer_norm(h, g2, b2)?;
                let f = layer.ffn.forward(sess, n2)?;
                h = sess.add(h, f)?;
            }
            let h_x = sess.slice_rows(h, 0, l + 1)?;
            let h_c = if b > 0 {
                Some(sess.slice_rows(h, l + 1, b)?)
            } else {
                None
            };
            (h_x, h_c)
        }
    };

    let h_u = sess.slice_rows(h_x, l, 1)?;
    let projected = model.generator.ntp_user_proj.forward(sess, h_u)?;
    let h_ntp = sess.l2_normalize_rows(projected);
    Ok(GeneratorRun {
        h_u,
        h_ntp,
        h_candidates: h_c,
    })
}

/// Item-side retrieval vectors: `normalize(MLP_ntp(E[item]))`, one unit row
/// per item. Shared across the users of a batch.
pub fn encode_ntp_items<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    items: &[ItemId],
) -> Result<ValueId> {
    if items.is_empty() {
        return Err(Error::Argument("empty item list".into()));
    }
    let table = sess.param(model.embedding);
    let rows = sess.gather(table, Arc::new(items.to_vec()))?;
    let projected = model.generator.ntp_item_mlp.forward(sess, rows)?;
    Ok(sess.l2_normalize_rows(projected))
}

/// Retrieval InfoNCE against precomputed item vectors; the positive sits at
/// `positive` and the denominator runs over every row of `item_vectors`.
pub fn loss_ntp_with_items<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    h_ntp: ValueId,
    item_vectors: ValueId,
    positive: usize,
) -> Result<ValueId> {
    let sims = sess.matmul_tb(h_ntp, item_vectors)?;
    let logits = sess.scale(sims, 1.0 / model.cfg.generator.tau);
    let ce = sess.row_softmax_cross_entropy(logits, Arc::new(vec![positive]))?;
    Ok(sess.sum_all(ce))
}

/// Retrieval InfoNCE over `{target} ∪ negatives`.
pub fn loss_ntp<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    h_ntp: ValueId,
    target: ItemId,
    negatives: &[ItemId],
) -> Result<ValueId> {
    if negatives.is_empty() {
        return Err(Error::Argument("loss_ntp needs at least one negative".into()));
    }
    let mut items = Vec::with_capacity(negatives.len() + 1);
    items.push(target);
    items.extend_from_slice(negatives);
    let vectors = encode_ntp_items(sess, model, &items)?;
    loss_ntp_with_items(sess, model, h_ntp, vectors, 0)
}

/// Auxiliary score InfoNCE over the decoder's candidate outputs. No
/// temperature on these logits.
pub fn loss_sa_info<S: Scalar>(
    sess: &mut Session<S>,
    model: &Model<S>,
    h_candidates: ValueId,
    positive: usize,
) -> Result<ValueId> {
    let scores = model.generator.sa_mlp.forward(sess, h_candidates)?;
    let logits = sess.transpose(scores);
    let ce = sess.row_softmax_cross_entropy(logits, Arc::new(vec![positive]))?;
    Ok(sess.sum_all(ce))
}
