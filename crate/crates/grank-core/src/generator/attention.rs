//! Causal self-attention over user tokens with candidate tokens attached,
//! in two interchangeable forms:
//!
//! * [`decomposed_attention`] splits the computation into user-sequence
//!   self-attention, candidate-to-history cross scores, and one
//!   self-correlation scalar per candidate, joined by a per-candidate
//!   softmax. Candidates never see each other and never feed back into the
//!   user tokens.
//! * [`full_attention_oracle`] runs plain masked attention over the
//!   concatenated sequence. It exists to prove the decomposition equal and
//!   is never used for training or serving.
//!
//! User-token rows: position `i` attends to valid positions `j <= i` plus
//! itself; the query token (last row) attends to every valid token and
//! itself; padding positions are attended by nobody. Candidate rows attend
//! to all valid user tokens, the query token, and themselves only.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric::{AttentionMask, ParamId, Scalar, Session, ValueId};

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub heads: usize,
}

/// Mask over the `(L+1)` user tokens (history rows then the query token).
/// `valid_from` is the first non-padding history position.
pub fn user_token_mask(l: usize, valid_from: usize) -> AttentionMask {
    AttentionMask::from_fn(l + 1, l + 1, |i, j| {
        if i == j {
            return true; // padding rows stay softmax-able via the diagonal
        }
        if j < valid_from || j >= l {
            return false; // nobody attends padding; only U attends U (diagonal)
        }
        i == l || j <= i
    })
}

/// Per-candidate mask over `L+1` user columns plus the trailing self column.
pub fn candidate_mask(l: usize, valid_from: usize, b: usize) -> AttentionMask {
    AttentionMask::from_fn(b, l + 2, |_, j| j == l + 1 || j == l || j >= valid_from)
}

/// Combined mask for the oracle path over `(L+1+B)` rows.
pub fn full_sequence_mask(l: usize, valid_from: usize, b: usize) -> AttentionMask {
    let n = l + 1 + b;
    AttentionMask::from_fn(n, n, |i, j| {
        let user_row = i <= l;
        let user_col = j <= l;
        match (user_row, user_col) {
            (true, true) => user_token_mask(l, valid_from).is_allowed(i, j),
            (true, false) => false,
            (false, true) => j == l || j >= valid_from,
            (false, false) => i == j,
        }
    })
}

fn head_slices<S: Scalar>(
    sess: &mut Session<S>,
    value: ValueId,
    heads: usize,
) -> Result<Vec<ValueId>> {
    if heads == 1 {
        return Ok(vec![value]);
    }
    let (_, d) = sess.shape(value);
    let dh = d / heads;
    (0..heads)
        .map(|h| sess.slice_cols(value, h * dh, dh))
        .collect()
}

fn concat_heads<S: Scalar>(sess: &mut Session<S>, parts: Vec<ValueId>) -> Result<ValueId> {
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        sess.concat_cols(&parts)
    }
}

/// Decomposed attention. `x` holds the `(L+1) x d` user tokens; `c` the
/// optional `B x d` candidate tokens. Returns the attended user tokens and,
/// when candidates are present, the attended candidate rows.
pub fn decomposed_attention<S: Scalar>(
    sess: &mut Session<S>,
    x: ValueId,
    c: Option<ValueId>,
    attn: &AttentionParams,
    user_mask: &Arc<AttentionMask>,
    cand_mask: Option<&Arc<AttentionMask>>,
) -> Result<(ValueId, Option<ValueId>)> {
    let (rows, d) = sess.shape(x);
    if let Some(c) = c {
        let (_, dc) = sess.shape(c);
        if dc != d {
            return Err(Error::dim("decomposed_attention", (rows, d), sess.shape(c)));
        }
    }
    if d % attn.heads != 0 {
        return Err(Error::Argument(format!(
            "width {d} not divisible by {} heads",
            attn.heads
        )));
    }
    let dh = d / attn.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let lp1 = rows;

    let w_q = sess.param(attn.w_q);
    let w_k = sess.param(attn.w_k);
    let w_v = sess.param(attn.w_v);
    let q_x = sess.matmul(x, w_q)?;
    let k_x = sess.matmul(x, w_k)?;
    let v_x = sess.matmul(x, w_v)?;
    let qx_h = head_slices(sess, q_x, attn.heads)?;
    let kx_h = head_slices(sess, k_x, attn.heads)?;
    let vx_h = head_slices(sess, v_x, attn.heads)?;

    let cand = match c {
        Some(c) => {
            let q_c = sess.matmul(c, w_q)?;
            let k_c = sess.matmul(c, w_k)?;
            let v_c = sess.matmul(c, w_v)?;
            Some((
                head_slices(sess, q_c, attn.heads)?,
                head_slices(sess, k_c, attn.heads)?,
                head_slices(sess, v_c, attn.heads)?,
            ))
        }
        None => None,
    };

    let mut out_x = Vec::with_capacity(attn.heads);
    let mut out_c = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let scores = sess.matmul_tb(qx_h[h], kx_h[h])?;
        let scaled = sess.scale(scores, scale);
        let a_x = sess.softmax_rows(scaled, Some(user_mask.clone()))?;
        out_x.push(sess.matmul(a_x, vx_h[h])?);

        if let Some((qc_h, kc_h, vc_h)) = &cand {
            let cross = sess.matmul_tb(qc_h[h], kx_h[h])?;
            let self_corr = sess.rowwise_dot(qc_h[h], kc_h[h])?;
            let combined = sess.concat_cols(&[cross, self_corr])?;
            let combined = sess.scale(combined, scale);
            let mask = cand_mask
                .ok_or_else(|| Error::Contract("candidates present without a mask".into()))?;
            let a_c = sess.softmax_rows(combined, Some(mask.clone()))?;
            let a_hist = sess.slice_cols(a_c, 0, lp1)?;
            let a_self = sess.slice_cols(a_c, lp1, 1)?;
            let from_hist = sess.matmul(a_hist, vx_h[h])?;
            let from_self = sess.row_scale(a_self, vc_h[h])?;
            out_c.push(sess.add(from_hist, from_self)?);
        }
    }

    let o_x = concat_heads(sess, out_x)?;
    let o_c = if out_c.is_empty() {
        None
    } else {
        Some(concat_heads(sess, out_c)?)
    };
    Ok((o_x, o_c))
}

/// Reference path: masked full attention over `[x; c]`. Same signature and
/// outputs as [`decomposed_attention`].
pub fn full_attention_oracle<S: Scalar>(
    sess: &mut Session<S>,
    x: ValueId,
    c: Option<ValueId>,
    attn: &AttentionParams,
    combined_mask: &Arc<AttentionMask>,
) -> Result<(ValueId, Option<ValueId>)> {
    let (lp1, d) = sess.shape(x);
    let b = c.map(|c| sess.shape(c).0).unwrap_or(0);
    let s = match c {
        Some(c) => sess.concat_rows(&[x, c])?,
        None => x,
    };
    let dh = d / attn.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let w_q = sess.param(attn.w_q);
    let w_k = sess.param(attn.w_k);
    let w_v = sess.param(attn.w_v);
    let q = sess.matmul(s, w_q)?;
    let k = sess.matmul(s, w_k)?;
    let v = sess.matmul(s, w_v)?;
    let q_h = head_slices(sess, q, attn.heads)?;
    let k_h = head_slices(sess, k, attn.heads)?;
    let v_h = head_slices(sess, v, attn.heads)?;

    let mut outs = Vec::with_capacity(attn.heads);
    for h in 0..attn.heads {
        let scores = sess.matmul_tb(q_h[h], k_h[h])?;
        let scaled = sess.scale(scores, scale);
        let a = sess.softmax_rows(scaled, Some(combined_mask.clone()))?;
        outs.push(sess.matmul(a, v_h[h])?);
    }
    let o = concat_heads(sess, outs)?;
    let o_x = sess.slice_rows(o, 0, lp1)?;
    let o_c = if b > 0 {
        Some(sess.slice_rows(o, lp1, b)?)
    } else {
        None
    };
    Ok((o_x, o_c))
}
