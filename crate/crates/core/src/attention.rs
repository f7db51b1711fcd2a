//! Softmax attention with grouped-query heads: batch (full / windowed causal)
//! and streaming forms backed by KV caches.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::math::{axpy, dot, softmax_in_place, Mat};

const F64_BYTES: usize = std::mem::size_of::<f64>();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub window: usize,
    pub rope_base: f64,
}

impl AttnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_kv_heads == 0 || self.n_query_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "{} query heads not divisible by {} kv heads",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even and nonzero for rotary embedding",
                self.head_dim
            )));
        }
        Ok(())
    }

    /// Query heads sharing one kv head.
    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    /// Per-token bytes of one K and one V row across kv heads.
    pub fn kv_bytes_per_token(&self) -> usize {
        2 * self.n_kv_heads * self.head_dim * F64_BYTES
    }
}

/// Which past positions a query may see.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal,
    /// Causal, restricted to the `W` most recent positions including self.
    Window(usize),
}

impl Mask {
    fn range(self, t: usize, len: usize) -> std::ops::Range<usize> {
        match self {
            Mask::None => 0..len,
            Mask::Causal => 0..t + 1,
            Mask::Window(w) => (t + 1).saturating_sub(w)..t + 1,
        }
    }
}

fn check_heads(q: &[Mat], k: &[Mat], v: &[Mat]) -> Result<(usize, usize)> {
    let err = |d: String| Err(shape_err("attention", d));
    if q.is_empty() || k.is_empty() || k.len() != v.len() {
        return err(format!("{} q / {} k / {} v heads", q.len(), k.len(), v.len()));
    }
    if q.len() % k.len() != 0 {
        return err(format!("{} query heads vs {} kv heads", q.len(), k.len()));
    }
    let (len, d) = q[0].shape();
    for m in q.iter().chain(k) {
        if m.shape() != (len, d) {
            return err(format!("head shape {:?} vs {:?}", m.shape(), (len, d)));
        }
    }
    for m in v {
        if m.rows() != len {
            return err(format!("value length {} vs {len}", m.rows()));
        }
    }
    Ok((len, q.len() / k.len()))
}

/// Masked softmax attention over per-head `L × d` tensors.
pub fn attention(q: &[Mat], k: &[Mat], v: &[Mat], mask: Mask) -> Result<Vec<Mat>> {
    let (len, group) = check_heads(q, k, v)?;
    let scale = 1.0 / (q[0].cols() as f64).sqrt();
    let dv = v[0].cols();
    let mut out = Vec::with_capacity(q.len());
    let mut logits = Vec::with_capacity(len);
    for (h, qh) in q.iter().enumerate() {
        let g = h / group;
        let (kh, vh) = (&k[g], &v[g]);
        let mut oh = Mat::zeros(len, dv);
        for t in 0..len {
            let span = mask.range(t, len);
            logits.clear();
            logits.extend(span.clone().map(|j| dot(qh.row(t), kh.row(j)) * scale));
            softmax_in_place(&mut logits);
            let row = oh.row_mut(t);
            for (p, j) in logits.iter().zip(span) {
                axpy(*p, vh.row(j), row);
            }
        }
        out.push(oh);
    }
    Ok(out)
}

/// `Softmax(QKᵀ/√d)V` per head, optionally causal.
pub fn full_attention(q: &[Mat], k: &[Mat], v: &[Mat], causal: bool) -> Result<Vec<Mat>> {
    attention(q, k, v, if causal { Mask::Causal } else { Mask::None })
}

/// Attend one token (rows of `q_t` are query heads) against context rows
/// supplied oldest first, then the token's own key/value.
fn attend_step<'a>(
    q_t: &Mat,
    k_t: &'a Mat,
    v_t: &'a Mat,
    context: impl Iterator<Item = (&'a [f64], &'a [f64])> + Clone,
    kv_head: impl Fn(usize, &'a [f64]) -> &'a [f64] + Copy,
) -> Mat {
    let n_kv = k_t.rows();
    let group = q_t.rows() / n_kv;
    let scale = 1.0 / (q_t.cols() as f64).sqrt();
    let mut out = Mat::zeros(q_t.rows(), v_t.cols());
    let mut logits: Vec<Vec<f64>> = vec![Vec::new(); group];
    // each kv row is read once per group rather than once per query head
    for g in 0..n_kv {
        let heads = g * group..(g + 1) * group;
        let rows = context
            .clone()
            .map(|(k, v)| (kv_head(g, k), kv_head(g, v)))
            .chain(std::iter::once((k_t.row(g), v_t.row(g))));
        logits.iter_mut().for_each(Vec::clear);
        for (k, _) in rows.clone() {
            for (l, h) in logits.iter_mut().zip(heads.clone()) {
                l.push(dot(q_t.row(h), k) * scale);
            }
        }
        logits.iter_mut().for_each(|l| softmax_in_place(l));
        for (i, (_, v)) in rows.enumerate() {
            for (l, h) in logits.iter().zip(heads.clone()) {
                axpy(l[i], v, out.row_mut(h));
            }
        }
    }
    out
}

fn check_step(cfg: &AttnConfig, q_t: &Mat, k_t: &Mat, v_t: &Mat) -> Result<()> {
    let want_q = (cfg.n_query_heads, cfg.head_dim);
    let want_kv = (cfg.n_kv_heads, cfg.head_dim);
    if q_t.shape() != want_q || k_t.shape() != want_kv || v_t.shape() != want_kv {
        return Err(shape_err(
            "attention step",
            format!(
                "q {:?} k {:?} v {:?}, expected q {want_q:?} kv {want_kv:?}",
                q_t.shape(),
                k_t.shape(),
                v_t.shape()
            ),
        ));
    }
    Ok(())
}

/// Ring buffer holding the last `window` post-RoPE K/V rows of one layer.
///
/// Storage grows to `window` rows on first fill and never reallocates after.
#[derive(Debug, Clone)]
pub struct SwaCache {
    cfg: AttnConfig,
    /// slot-major: `[slot][kv_head][d]`
    keys: Vec<f64>,
    values: Vec<f64>,
    abs_pos: usize,
}

impl SwaCache {
    pub fn new(cfg: AttnConfig) -> Self {
        Self {
            cfg,
            keys: Vec::new(),
            values: Vec::new(),
            abs_pos: 0,
        }
    }

    pub fn config(&self) -> &AttnConfig {
        &self.cfg
    }

    /// Tokens ever written.
    pub fn abs_pos(&self) -> usize {
        self.abs_pos
    }

    pub fn stored_rows(&self) -> usize {
        self.abs_pos.min(self.cfg.window)
    }

    /// Absolute positions currently held, oldest first.
    pub fn positions(&self) -> std::ops::Range<usize> {
        self.abs_pos - self.stored_rows()..self.abs_pos
    }

    fn row_len(&self) -> usize {
        self.cfg.n_kv_heads * self.cfg.head_dim
    }

    fn slot(&self, pos: usize) -> std::ops::Range<usize> {
        let s = pos % self.cfg.window;
        s * self.row_len()..(s + 1) * self.row_len()
    }

    /// Cached `(key, value)` rows for absolute position `pos`, all kv heads.
    pub fn get(&self, pos: usize) -> Option<(&[f64], &[f64])> {
        if !self.positions().contains(&pos) {
            return None;
        }
        let r = self.slot(pos);
        Some((&self.keys[r.clone()], &self.values[r]))
    }

    fn push(&mut self, k_t: &Mat, v_t: &Mat) {
        if self.abs_pos < self.cfg.window {
            self.keys.extend_from_slice(k_t.data());
            self.values.extend_from_slice(v_t.data());
        } else {
            let r = self.slot(self.abs_pos);
            self.keys[r.clone()].copy_from_slice(k_t.data());
            self.values[r].copy_from_slice(v_t.data());
        }
        self.abs_pos += 1;
    }

    /// Attend the incoming token over itself and the `W − 1` most recent
    /// cached tokens, then append it, evicting the oldest row when full.
    ///
    /// `q_t` is `n_query_heads × d`; `k_t`, `v_t` are `n_kv_heads × d`, with
    /// RoPE already applied at position [`abs_pos`](Self::abs_pos).
    pub fn step(&mut self, q_t: &Mat, k_t: &Mat, v_t: &Mat) -> Result<Mat> {
        check_step(&self.cfg, q_t, k_t, v_t)?;
        let visible = self.stored_rows().min(self.cfg.window - 1);
        let start = self.abs_pos - visible;
        let d = self.cfg.head_dim;
        let out = {
            let context = (start..self.abs_pos).map(|p| {
                let r = self.slot(p);
                (&self.keys[r.clone()], &self.values[r])
            });
            attend_step(q_t, k_t, v_t, context, move |g, row| &row[g * d..(g + 1) * d])
        };
        self.push(k_t, v_t);
        Ok(out)
    }

    /// Exact bytes of stored K and V rows.
    pub fn state_bytes(&self) -> usize {
        self.stored_rows() * self.cfg.kv_bytes_per_token()
    }
}

/// Free-function form of [`SwaCache::step`].
pub fn swa_step(q_t: &Mat, k_t: &Mat, v_t: &Mat, cache: &mut SwaCache) -> Result<Mat> {
    cache.step(q_t, k_t, v_t)
}

pub fn swa_state_bytes(cache: &SwaCache) -> usize {
    cache.state_bytes()
}

/// Unbounded KV list used by full-attention baseline layers.
#[derive(Debug, Clone)]
pub struct FullKvCache {
    cfg: AttnConfig,
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl FullKvCache {
    pub fn new(cfg: AttnConfig) -> Self {
        Self {
            cfg,
            keys: Vec::new(),
            values: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn step(&mut self, q_t: &Mat, k_t: &Mat, v_t: &Mat) -> Result<Mat> {
        check_step(&self.cfg, q_t, k_t, v_t)?;
        let row = self.cfg.n_kv_heads * self.cfg.head_dim;
        let d = self.cfg.head_dim;
        let out = {
            let context = self.keys.chunks_exact(row).zip(self.values.chunks_exact(row));
            attend_step(q_t, k_t, v_t, context, move |g, r| &r[g * d..(g + 1) * d])
        };
        self.keys.extend_from_slice(k_t.data());
        self.values.extend_from_slice(v_t.data());
        self.len += 1;
        Ok(out)
    }

    pub fn state_bytes(&self) -> usize {
        self.len * self.cfg.kv_bytes_per_token()
    }
}
