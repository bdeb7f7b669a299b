//! Stage-1 candidate source: exact top-k maximum inner product search over
//! the item retrieval vectors, by flat linear scan with a bounded selection
//! heap. Brute force is the design here, not a placeholder — there is no
//! tree, graph, or codebook to build or maintain. An optional per-dimension
//! 8-bit affine quantized path mirrors a compressed index.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::data::ItemId;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{Scalar, Session};

const MAGIC: &[u8; 4] = b"GIDX";
const VERSION_EXACT: u32 = 1;
const VERSION_QUANTIZED: u32 = 2;

/// Flat corpus of unit-norm item vectors, row order = item id order.
/// Stored in f32: that is the on-disk format and the serving precision.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedCorpus {
    pub n_items: usize,
    pub d_top: usize,
    /// Row-major `n_items x d_top`.
    pub vectors: Vec<f32>,
}

impl IndexedCorpus {
    pub fn row(&self, item: ItemId) -> &[f32] {
        &self.vectors[item * self.d_top..(item + 1) * self.d_top]
    }
}

/// Per-dimension symmetric 8-bit affine codes: `v ≈ offset + scale * code`
/// with zero offsets under the symmetric scheme; the offset array stays in
/// the format so asymmetric codes remain readable.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCorpus {
    pub n_items: usize,
    pub d_top: usize,
    pub scale: Vec<f32>,
    pub offset: Vec<f32>,
    pub codes: Vec<i8>,
}

/// Build the corpus from a trained model: row `i` is
/// `normalize(MLP_ntp(E[i]))`, computed in the model precision and stored
/// as f32. Chunked so the tape stays small.
pub fn build_index<S: Scalar>(model: &Model<S>) -> Result<IndexedCorpus> {
    let n_items = model.cfg.n_items;
    let d_top = model.cfg.generator.d_top;
    let mut vectors = Vec::with_capacity(n_items * d_top);
    let chunk = 1024usize;
    let mut start = 0;
    while start < n_items {
        let end = (start + chunk).min(n_items);
        let ids: Vec<ItemId> = (start..end).collect();
        let mut sess = Session::new(&model.params);
        let table = sess.param(model.embedding);
        let rows = sess.gather(table, Arc::new(ids))?;
        let projected = model.generator.ntp_item_mlp.forward(&mut sess, rows)?;
        let normalized = sess.l2_normalize_rows(projected);
        vectors.extend(sess.value(normalized).to_f32_vec());
        start = end;
    }
    Ok(IndexedCorpus {
        n_items,
        d_top,
        vectors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Hit {
    score: f32,
    item: ItemId,
}

// Better = higher score, ties broken toward the lower item id.
impl Eq for Hit {}
impl Ord for Hit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.item.cmp(&self.item))
    }
}
impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_k(k: usize, n_items: usize) -> Result<()> {
    if k == 0 || k > n_items {
        return Err(Error::Argument(format!(
            "k must satisfy 1 <= k <= {n_items}, got {k}"
        )));
    }
    Ok(())
}

fn select_top_k(scores: impl Iterator<Item = (ItemId, f32)>, k: usize) -> Vec<(ItemId, f32)> {
    // min-heap of the best k seen so far; root is the current worst keeper
    let mut heap: BinaryHeap<std::cmp::Reverse<Hit>> = BinaryHeap::with_capacity(k + 1);
    for (item, score) in scores {
        let hit = Hit { score, item };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(hit));
        } else if hit > heap.peek().expect("non-empty").0 {
            heap.pop();
            heap.push(std::cmp::Reverse(hit));
        }
    }
    let mut out: Vec<Hit> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(|a, b| b.cmp(a));
    out.into_iter().map(|h| (h.item, h.score)).collect()
}

/// Exact top-k by inner product, descending, ties broken by lower item id.
pub fn topk_exact(corpus: &IndexedCorpus, query: &[f32], k: usize) -> Result<Vec<(ItemId, f32)>> {
    check_k(k, corpus.n_items)?;
    if query.len() != corpus.d_top {
        return Err(Error::dim("topk_exact", (1, query.len()), (1, corpus.d_top)));
    }
    Ok(select_top_k(
        (0..corpus.n_items).map(|item| {
            let row = corpus.row(item);
            let mut acc = 0.0f32;
            for (a, b) in row.iter().zip(query.iter()) {
                acc += a * b;
            }
            (item, acc)
        }),
        k,
    ))
}

/// Quantize with per-dimension symmetric scaling into `bits`-wide codes
/// (values in `[-(2^(bits-1)-1), 2^(bits-1)-1]`, stored as i8).
pub fn quantize(corpus: &IndexedCorpus, bits: u32) -> Result<QuantizedCorpus> {
    if !(1..=8).contains(&bits) {
        return Err(Error::Argument(format!("bits must be in 1..=8, got {bits}")));
    }
    let d = corpus.d_top;
    let max_code = ((1i32 << (bits - 1)) - 1).max(1) as f32;
    let mut max_abs = vec![0.0f32; d];
    for item in 0..corpus.n_items {
        for (j, v) in corpus.row(item).iter().enumerate() {
            max_abs[j] = max_abs[j].max(v.abs());
        }
    }
    let scale: Vec<f32> = max_abs
        .iter()
        .map(|&m| if m > 0.0 { m / max_code } else { 1.0 })
        .collect();
    let mut codes = Vec::with_capacity(corpus.n_items * d);
    for item in 0..corpus.n_items {
        for (j, v) in corpus.row(item).iter().enumerate() {
            let c = (v / scale[j]).round();
            codes.push(c.clamp(-max_code, max_code) as i8);
        }
    }
    Ok(QuantizedCorpus {
        n_items: corpus.n_items,
        d_top: d,
        scale,
        offset: vec![0.0; d],
        codes,
    })
}

impl QuantizedCorpus {
    pub fn dequantize_row(&self, item: ItemId) -> Vec<f32> {
        let d = self.d_top;
        self.codes[item * d..(item + 1) * d]
            .iter()
            .enumerate()
            .map(|(j, &c)| self.offset[j] + self.scale[j] * c as f32)
            .collect()
    }
}

/// Top-k under dequantized inner products; same ordering rules as the exact
/// path. Approximation quality is measured by the tests, never assumed.
pub fn topk_quantized(
    corpus: &QuantizedCorpus,
    query: &[f32],
    k: usize,
) -> Result<Vec<(ItemId, f32)>> {
    check_k(k, corpus.n_items)?;
    if query.len() != corpus.d_top {
        return Err(Error::dim(
            "topk_quantized",
            (1, query.len()),
            (1, corpus.d_top),
        ));
    }
    let d = corpus.d_top;
    // dot(q, offset + scale .* code) = dot(q, offset) + dot(q .* scale, code)
    let base: f32 = query
        .iter()
        .zip(corpus.offset.iter())
        .map(|(q, o)| q * o)
        .sum();
    let scaled_q: Vec<f32> = query
        .iter()
        .zip(corpus.scale.iter())
        .map(|(q, s)| q * s)
        .collect();
    Ok(select_top_k(
        (0..corpus.n_items).map(|item| {
            let codes = &corpus.codes[item * d..(item + 1) * d];
            let mut acc = base;
            for (q, &c) in scaled_q.iter().zip(codes.iter()) {
                acc += q * c as f32;
            }
            (item, acc)
        }),
        k,
    ))
}

/// Fraction of `a`'s ids present in `b`.
pub fn overlap(a: &[(ItemId, f32)], b: &[(ItemId, f32)]) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let set: std::collections::HashSet<ItemId> = b.iter().map(|(i, _)| *i).collect();
    a.iter().filter(|(i, _)| set.contains(i)).count() as f64 / a.len() as f64
}

pub fn save_index(
    path: &Path,
    corpus: &IndexedCorpus,
    quantized: Option<&QuantizedCorpus>,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let version = if quantized.is_some() {
        VERSION_QUANTIZED
    } else {
        VERSION_EXACT
    };
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(corpus.n_items as u32).to_le_bytes())?;
    w.write_all(&(corpus.d_top as u32).to_le_bytes())?;
    for v in &corpus.vectors {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(q) = quantized {
        for v in q.scale.iter().chain(q.offset.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for c in &q.codes {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_index(path: &Path) -> Result<(IndexedCorpus, Option<QuantizedCorpus>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad index magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION_EXACT && version != VERSION_QUANTIZED {
        return Err(Error::Checkpoint(format!("unsupported index version {version}")));
    }
    r.read_exact(&mut word)?;
    let n_items = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let d_top = u32::from_le_bytes(word) as usize;
    let mut vectors = vec![0f32; n_items * d_top];
    let mut buf = [0u8; 4];
    for v in vectors.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    let corpus = IndexedCorpus {
        n_items,
        d_top,
        vectors,
    };
    let quantized = if version == VERSION_QUANTIZED {
        let mut scale = vec![0f32; d_top];
        let mut offset = vec![0f32; d_top];
        for v in scale.iter_mut().chain(offset.iter_mut()) {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        let mut codes = vec![0i8; n_items * d_top];
        let mut byte = [0u8; 1];
        for c in codes.iter_mut() {
            r.read_exact(&mut byte)?;
            *c = i8::from_le_bytes(byte);
        }
        Some(QuantizedCorpus {
            n_items,
            d_top,
            scale,
            offset,
            codes,
        })
    } else {
        None
    };
    Ok((corpus, quantized))
}
