//! Gated DeltaNet: a linear-attention memory `S` (one `d_v × d_k` matrix per
//! head) updated by the gated delta rule
//!
//! ```text
//! S_t = α_t · S_{t−1} · (I − β_t k_t k_tᵀ) + β_t · v_t k_tᵀ,    o_t = S_t q_t
//! ```
//!
//! The state is stored value-major so reads are `S q` and the reflector
//! `I − β k kᵀ` acts on the key side.

mod backward;
mod cell;
mod chunked;

pub use backward::{gdn_backward, GdnGrads};
pub use cell::{gdn_cell_forward, gdn_cell_sequence, DeltaState, GdnConfig, GdnParams, GdnStepInfo};
pub use chunked::gdn_chunked;

use crate::error::{shape_err, Result};
use crate::math::{dot, l2_norm, Mat};

/// Per-head gate values for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnGates {
    /// Retention, in (0, 1].
    pub alpha: Vec<f64>,
    /// Write strength, in [0, 1].
    pub beta: Vec<f64>,
}

impl GdnGates {
    pub fn uniform(n_heads: usize, alpha: f64, beta: f64) -> Self {
        Self {
            alpha: vec![alpha; n_heads],
            beta: vec![beta; n_heads],
        }
    }
}

/// Scale `x` to unit L2 norm; the zero vector stays zero.
pub fn l2_normalize(x: &mut [f64]) {
    let n = l2_norm(x);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
}

/// In-place gated delta update of one head's `d_v × d_k` memory.
///
/// Uses `S(I − β k kᵀ) = S − β (S k) kᵀ`, so no `d_k × d_k` matrix is formed.
#[inline]
pub fn delta_update(s: &mut Mat, k: &[f64], v: &[f64], alpha: f64, beta: f64) {
    let dk = s.cols();
    debug_assert_eq!(k.len(), dk);
    debug_assert_eq!(v.len(), s.rows());
    for (i, &vi) in v.iter().enumerate() {
        let row = s.row_mut(i);
        let w = dot(row, k);
        // α S_i + β (v_i − α w_i) kᵀ
        let c = beta * (vi - alpha * w);
        for (sij, &kj) in row.iter_mut().zip(k) {
            *sij = alpha * *sij + c * kj;
        }
    }
}

/// Read `S q` for one head.
#[inline]
pub fn read_memory(s: &Mat, q: &[f64]) -> Vec<f64> {
    s.iter_rows().map(|r| dot(r, q)).collect()
}

fn check_heads(
    op: &'static str,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    state: &[Mat],
) -> Result<()> {
    let h = state.len();
    let (dv, dk) = state.first().map_or((0, 0), Mat::shape);
    if q.shape() != (h, dk) || k.shape() != (h, dk) || v.shape() != (h, dv) {
        return Err(shape_err(
            op,
            format!(
                "q {:?} k {:?} v {:?} for {h} heads of {dv}x{dk} state",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    Ok(())
}

/// One gated delta-rule step over all heads. Rows of `q`, `k`, `v` are heads;
/// keys must already be unit norm. Returns `o_t` (`heads × d_v`).
pub fn gdn_step(q: &Mat, k: &Mat, v: &Mat, gates: &GdnGates, state: &mut [Mat]) -> Result<Mat> {
    check_heads("gdn_step", q, k, v, state)?;
    if gates.alpha.len() != state.len() || gates.beta.len() != state.len() {
        return Err(shape_err("gdn_step", "gate count differs from head count"));
    }
    let mut out = Mat::zeros(state.len(), v.cols());
    for (h, s) in state.iter_mut().enumerate() {
        delta_update(s, k.row(h), v.row(h), gates.alpha[h], gates.beta[h]);
        out.row_mut(h).copy_from_slice(&read_memory(s, q.row(h)));
    }
    Ok(out)
}

/// Plain linear-attention step: `S += v φ(k)ᵀ`, `o = S φ(q)` with φ the
/// identity on queries and L2 normalization on keys.
pub fn linear_attn_step(q: &Mat, k: &Mat, v: &Mat, state: &mut [Mat]) -> Result<Mat> {
    check_heads("linear_attn_step", q, k, v, state)?;
    let mut out = Mat::zeros(state.len(), v.cols());
    for (h, s) in state.iter_mut().enumerate() {
        let mut kh = k.row(h).to_vec();
        l2_normalize(&mut kh);
        for (i, &vi) in v.row(h).iter().enumerate() {
            crate::math::axpy(vi, &kh, s.row_mut(i));
        }
        out.row_mut(h).copy_from_slice(&read_memory(s, q.row(h)));
    }
    Ok(out)
}

/// A length-`L` sequence of recurrence inputs, stored per head.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnSequence {
    /// per head, `L × d_k`
    pub q: Vec<Mat>,
    /// per head, `L × d_k`, unit-norm rows
    pub k: Vec<Mat>,
    /// per head, `L × d_v`
    pub v: Vec<Mat>,
    /// `L × heads`
    pub alpha: Mat,
    /// `L × heads`
    pub beta: Mat,
}

impl GdnSequence {
    pub fn len(&self) -> usize {
        self.alpha.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_heads(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self, state: &[Mat]) -> Result<()> {
        let h = state.len();
        let l = self.len();
        let (dv, dk) = state.first().map_or((0, 0), Mat::shape);
        let ok = self.q.len() == h
            && self.k.len() == h
            && self.v.len() == h
            && self.alpha.shape() == (l, h)
            && self.beta.shape() == (l, h)
            && self.q.iter().all(|m| m.shape() == (l, dk))
            && self.k.iter().all(|m| m.shape() == (l, dk))
            && self.v.iter().all(|m| m.shape() == (l, dv))
            && state.iter().all(|m| m.shape() == (dv, dk));
        if !ok {
            return Err(shape_err(
                "GdnSequence",
                format!("inputs do not match {h} heads of {dv}x{dk} state over {l} steps"),
            ));
        }
        Ok(())
    }

    /// Random instance with unit keys, α ∈ [α_lo, 1], β ∈ [0, 1].
    pub fn random(
        rng: &mut crate::math::Rng,
        len: usize,
        heads: usize,
        d_k: usize,
        d_v: usize,
        alpha_lo: f64,
    ) -> Self {
        let k = (0..heads)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..len).map(|_| rng.unit_vec(d_k)).collect();
                Mat::from_rows(&rows).unwrap_or_else(|_| Mat::zeros(len, d_k))
            })
            .collect();
        Self {
            q: (0..heads)
                .map(|_| Mat::random_uniform(rng, len, d_k, -1.0, 1.0))
                .collect(),
            k,
            v: (0..heads)
                .map(|_| Mat::random_uniform(rng, len, d_v, -1.0, 1.0))
                .collect(),
            alpha: Mat::random_uniform(rng, len, heads, alpha_lo, 1.0),
            beta: Mat::random_uniform(rng, len, heads, 0.0, 1.0),
        }
    }

    fn token(&self, t: usize) -> (Mat, Mat, Mat, GdnGates) {
        let pick = |hs: &[Mat]| {
            let cols = hs[0].cols();
            let mut m = Mat::zeros(hs.len(), cols);
            for (h, src) in hs.iter().enumerate() {
                m.row_mut(h).copy_from_slice(src.row(t));
            }
            m
        };
        (
            pick(&self.q),
            pick(&self.k),
            pick(&self.v),
            GdnGates {
                alpha: self.alpha.row(t).to_vec(),
                beta: self.beta.row(t).to_vec(),
            },
        )
    }
}

/// Reference path: `L` successive [`gdn_step`] calls. Returns per-head
/// outputs (`L × d_v`) and the final state.
pub fn gdn_recurrent(seq: &GdnSequence, s0: &[Mat]) -> Result<(Vec<Mat>, Vec<Mat>)> {
    seq.validate(s0)?;
    let mut state = s0.to_vec();
    let dv = s0.first().map_or(0, Mat::rows);
    let mut out = vec![Mat::zeros(seq.len(), dv); seq.n_heads()];
    for t in 0..seq.len() {
        let (q, k, v, gates) = seq.token(t);
        let o = gdn_step(&q, &k, &v, &gates, &mut state)?;
        for (h, oh) in out.iter_mut().enumerate() {
            oh.row_mut(t).copy_from_slice(o.row(h));
        }
    }
    Ok((out, state))
}

pub fn zero_state(n_heads: usize, d_k: usize, d_v: usize) -> Vec<Mat> {
    vec![Mat::zeros(d_v, d_k); n_heads]
}
