//! Chunk-parallel evaluation of the gated delta rule.
//!
//! Inside a chunk the recurrence unrolls to `S_t = γ_t S_0 + Σ_{i≤t} (γ_t/γ_i) u_i k_iᵀ`
//! with `γ_t = Π_{j≤t} α_j` and pseudo-values
//!
//! ```text
//! u_t = β_t (v_t − γ_t S_0 k_t − Σ_{i<t} (γ_t/γ_i)(k_t·k_i) u_i)
//! ```
//!
//! which is a unit lower-triangular solve against the decayed key Gram
//! matrix. Outputs and the carried state then come from dense products.
//! Decay ratios are formed as `exp(ln γ_t − ln γ_i)` so they never exceed 1.

use super::{gdn_recurrent, GdnSequence};
use crate::error::{Error, Result};
use crate::math::{axpy, matmul, Mat};

/// Chunked form of [`gdn_recurrent`]; identical results up to rounding.
/// `chunk = 1` runs the step loop itself.
pub fn gdn_chunked(seq: &GdnSequence, s0: &[Mat], chunk: usize) -> Result<(Vec<Mat>, Vec<Mat>)> {
    if chunk == 0 {
        return Err(Error::Input("chunk size must be >= 1".into()));
    }
    if chunk == 1 {
        return gdn_recurrent(seq, s0);
    }
    seq.validate(s0)?;
    let len = seq.len();
    let mut outputs = Vec::with_capacity(seq.n_heads());
    let mut finals = Vec::with_capacity(seq.n_heads());
    for (h, s_init) in s0.iter().enumerate() {
        let mut s = s_init.clone();
        let mut out = Mat::zeros(len, s.rows());
        let mut start = 0;
        while start < len {
            let end = (start + chunk).min(len);
            let block = ChunkInputs {
                q: seq.q[h].slice_rows(start, end),
                k: seq.k[h].slice_rows(start, end),
                v: seq.v[h].slice_rows(start, end),
                alpha: (start..end).map(|t| seq.alpha.get(t, h)).collect(),
                beta: (start..end).map(|t| seq.beta.get(t, h)).collect(),
            };
            let (o, s_next) = chunk_forward(&block, &s)?;
            for t in 0..end - start {
                out.row_mut(start + t).copy_from_slice(o.row(t));
            }
            s = s_next;
            start = end;
        }
        outputs.push(out);
        finals.push(s);
    }
    Ok((outputs, finals))
}

pub(super) struct ChunkInputs {
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// One head, one chunk. Returns `(n × d_v outputs, state after the chunk)`.
pub(super) fn chunk_forward(c: &ChunkInputs, s0: &Mat) -> Result<(Mat, Mat)> {
    let n = c.alpha.len();
    let dv = s0.rows();

    let mut log_gamma = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &a in &c.alpha {
        acc += a.ln();
        log_gamma.push(acc);
    }
    let gamma: Vec<f64> = log_gamma.iter().map(|l| l.exp()).collect();
    let decay = |t: usize, i: usize| (log_gamma[t] - log_gamma[i]).exp();

    let s0_t = s0.transpose();
    let k_s0 = matmul(&c.k, &s0_t)?; // n × d_v, rows S_0 k_t
    let q_s0 = matmul(&c.q, &s0_t)?;
    let kt = c.k.transpose();
    let gram = matmul(&c.k, &kt)?; // k_t · k_i
    let qk = matmul(&c.q, &kt)?; // q_t · k_i

    // forward substitution for the pseudo-values
    let mut u = Mat::zeros(n, dv);
    for t in 0..n {
        let mut rhs: Vec<f64> = c
            .v
            .row(t)
            .iter()
            .zip(k_s0.row(t))
            .map(|(v, ks)| v - gamma[t] * ks)
            .collect();
        for i in 0..t {
            let w = decay(t, i) * gram.get(t, i);
            if w != 0.0 {
                axpy(-w, u.row(i), &mut rhs);
            }
        }
        let b = c.beta[t];
        rhs.iter_mut().for_each(|x| *x *= b);
        u.row_mut(t).copy_from_slice(&rhs);
    }

    // o_t = γ_t S_0 q_t + Σ_{i≤t} (γ_t/γ_i)(q_t·k_i) u_i
    let mut scores = Mat::zeros(n, n);
    for t in 0..n {
        for i in 0..=t {
            scores.set(t, i, decay(t, i) * qk.get(t, i));
        }
    }
    let mut out = matmul(&scores, &u)?;
    for t in 0..n {
        axpy(gamma[t], q_s0.row(t), out.row_mut(t));
    }

    // S_n = γ_n S_0 + Σ_i (γ_n/γ_i) u_i k_iᵀ
    let last = n - 1;
    let mut weighted_k = c.k.clone();
    for i in 0..n {
        let w = decay(last, i);
        weighted_k.row_mut(i).iter_mut().for_each(|x| *x *= w);
    }
    let mut s_next = matmul(&u.transpose(), &weighted_k)?;
    for (dst, &src) in s_next.data_mut().iter_mut().zip(s0.data()) {
        *dst += gamma[last] * src;
    }
    Ok((out, s_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deltanet::zero_state;
    use crate::math::Rng;

    fn max_diff(a: &[Mat], b: &[Mat]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.max_abs_diff(y))
            .fold(0.0, f64::max)
    }

    fn random_state(rng: &mut Rng, h: usize, dk: usize, dv: usize) -> Vec<Mat> {
        (0..h).map(|_| Mat::random_uniform(rng, dv, dk, -0.5, 0.5)).collect()
    }

    #[test]
    fn chunk_sizes_agree_with_step_loop() {
        let mut rng = Rng::new(11);
        let len = 256;
        let seq = GdnSequence::random(&mut rng, len, 2, 8, 6, 0.8);
        let s0 = random_state(&mut rng, 2, 8, 6);
        let (o_ref, s_ref) = gdn_recurrent(&seq, &s0).unwrap();
        for chunk in [1, 2, 7, 64, len] {
            let (o, s) = gdn_chunked(&seq, &s0, chunk).unwrap();
            assert!(max_diff(&o, &o_ref) <= 1e-10, "chunk {chunk} out");
            assert!(max_diff(&s, &s_ref) <= 1e-10, "chunk {chunk} state");
        }
    }

    #[test]
    fn chunk_one_is_the_step_loop() {
        let mut rng = Rng::new(12);
        let seq = GdnSequence::random(&mut rng, 20, 2, 4, 4, 0.3);
        let s0 = zero_state(2, 4, 4);
        assert_eq!(gdn_chunked(&seq, &s0, 1).unwrap(), gdn_recurrent(&seq, &s0).unwrap());
    }

    #[test]
    fn strong_decay_stays_finite() {
        let mut rng = Rng::new(13);
        let mut seq = GdnSequence::random(&mut rng, 128, 1, 4, 4, 0.0);
        // push some gates towards zero retention
        for t in (0..128).step_by(5) {
            seq.alpha.set(t, 0, 1e-30);
        }
        let s0 = random_state(&mut rng, 1, 4, 4);
        let (o_ref, s_ref) = gdn_recurrent(&seq, &s0).unwrap();
        let (o, s) = gdn_chunked(&seq, &s0, 128).unwrap();
        assert!(o.iter().all(Mat::is_finite));
        assert!(max_diff(&o, &o_ref) <= 1e-10);
        assert!(max_diff(&s, &s_ref) <= 1e-10);
    }

    #[test]
    fn zero_chunk_rejected() {
        let mut rng = Rng::new(14);
        let seq = GdnSequence::random(&mut rng, 4, 1, 2, 2, 0.5);
        assert!(gdn_chunked(&seq, &zero_state(1, 2, 2), 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use crate::math::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]
            #[test]
            fn any_chunk_matches_recurrent(seed in any::<u64>(), len in 1usize..90, chunk in 1usize..40) {
                let mut rng = Rng::new(seed);
                let seq = GdnSequence::random(&mut rng, len, 2, 5, 3, 0.2);
                let s0 = random_state(&mut rng, 2, 5, 3);
                let (o_ref, s_ref) = gdn_recurrent(&seq, &s0).unwrap();
                let (o, s) = gdn_chunked(&seq, &s0, chunk).unwrap();
                prop_assert!(max_diff(&o, &o_ref) <= 1e-10);
                prop_assert!(max_diff(&s, &s_ref) <= 1e-10);
            }
        }
    }
}
