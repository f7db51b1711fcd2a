//! Reverse-mode gradients of the gated delta rule (backpropagation through time).
//!
//! Only the states at chunk boundaries are kept from the forward sweep; each
//! chunk's interior states are recomputed when the reverse sweep reaches it,
//! so peak memory is `O(L/chunk + chunk)` states per head.
//!
//! Per step, with `P = S_{t−1}`, `w = P k`, `z = dS k` and `dS = ∂/∂S_t`:
//!
//! ```text
//! dα = ⟨dS, P⟩ − β wᵀz        dβ = (v − α w)ᵀ z        dv = β z
//! dk = −αβ Pᵀz + β dSᵀ(v − α w)
//! dP = α (dS − β z kᵀ)
//! ```

use super::{delta_update, read_memory, GdnSequence};
use crate::error::{shape_err, Error, Result};
use crate::math::{axpy, dot, Mat};

/// Gradients of `Σ_t ⟨dO_t, o_t⟩ + ⟨dS_L, S_L⟩` w.r.t. every recurrence input.
#[derive(Debug, Clone, PartialEq)]
pub struct GdnGrads {
    pub q: Vec<Mat>,
    pub k: Vec<Mat>,
    pub v: Vec<Mat>,
    pub alpha: Mat,
    pub beta: Mat,
    pub s0: Vec<Mat>,
}

pub fn gdn_backward(
    seq: &GdnSequence,
    s0: &[Mat],
    d_out: &[Mat],
    d_final: Option<&[Mat]>,
    chunk: usize,
) -> Result<GdnGrads> {
    seq.validate(s0)?;
    if chunk == 0 {
        return Err(Error::Input("chunk size must be >= 1".into()));
    }
    let len = seq.len();
    let heads = seq.n_heads();
    if d_out.len() != heads || d_out.iter().zip(&seq.v).any(|(g, v)| g.shape() != v.shape()) {
        return Err(shape_err("gdn_backward", "upstream gradient shape differs from outputs"));
    }
    if let Some(df) = d_final {
        if df.len() != heads || df.iter().zip(s0).any(|(a, b)| a.shape() != b.shape()) {
            return Err(shape_err("gdn_backward", "final-state gradient shape differs from state"));
        }
    }

    let mut grads = GdnGrads {
        q: seq.q.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect(),
        k: seq.k.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect(),
        v: seq.v.iter().map(|m| Mat::zeros(m.rows(), m.cols())).collect(),
        alpha: Mat::zeros(len, heads),
        beta: Mat::zeros(len, heads),
        s0: Vec::with_capacity(heads),
    };

    for h in 0..heads {
        let (q, k, v) = (&seq.q[h], &seq.k[h], &seq.v[h]);
        let gate = |t: usize| (seq.alpha.get(t, h), seq.beta.get(t, h));

        // checkpoints: state before each chunk
        let mut checkpoints = Vec::with_capacity(len / chunk + 1);
        let mut s = s0[h].clone();
        for t in 0..len {
            if t % chunk == 0 {
                checkpoints.push(s.clone());
            }
            let (a, b) = gate(t);
            delta_update(&mut s, k.row(t), v.row(t), a, b);
        }

        let mut ds = match d_final {
            Some(df) => df[h].clone(),
            None => Mat::zeros(s0[h].rows(), s0[h].cols()),
        };
        for (c, ckpt) in checkpoints.iter().enumerate().rev() {
            let start = c * chunk;
            let end = (start + chunk).min(len);
            // states[j] = S_{start + j − 1}, i.e. states[0] is the state before `start`
            let mut states = Vec::with_capacity(end - start + 1);
            states.push(ckpt.clone());
            for t in start..end {
                let mut next = states[states.len() - 1].clone();
                let (a, b) = gate(t);
                delta_update(&mut next, k.row(t), v.row(t), a, b);
                states.push(next);
            }
            for t in (start..end).rev() {
                let s_t = &states[t - start + 1];
                let p = &states[t - start];
                let (a, b) = gate(t);
                let (kt, vt, qt) = (k.row(t), v.row(t), q.row(t));
                let dot_ = d_out[h].row(t);

                // o_t = S_t q_t
                for (i, &g) in dot_.iter().enumerate() {
                    axpy(g, qt, ds.row_mut(i));
                }
                grads.q[h]
                    .row_mut(t)
                    .copy_from_slice(&transpose_mul(s_t, dot_));

                let w = read_memory(p, kt);
                let z = read_memory(&ds, kt);
                let resid: Vec<f64> = vt.iter().zip(&w).map(|(vi, wi)| vi - a * wi).collect();

                let frob: f64 = ds.data().iter().zip(p.data()).map(|(x, y)| x * y).sum();
                grads.alpha.set(t, h, frob - b * dot(&w, &z));
                grads.beta.set(t, h, dot(&resid, &z));
                grads.v[h]
                    .row_mut(t)
                    .iter_mut()
                    .zip(&z)
                    .for_each(|(g, zi)| *g = b * zi);

                let pz = transpose_mul(p, &z);
                let dsr = transpose_mul(&ds, &resid);
                grads.k[h]
                    .row_mut(t)
                    .iter_mut()
                    .zip(pz.iter().zip(&dsr))
                    .for_each(|(g, (pzj, dsrj))| *g = -a * b * pzj + b * dsrj);

                // dS_{t−1} = α (dS − β z kᵀ)
                for (i, &zi) in z.iter().enumerate() {
                    let row = ds.row_mut(i);
                    for (x, &kj) in row.iter_mut().zip(kt) {
                        *x = a * (*x - b * zi * kj);
                    }
                }
            }
        }
        grads.s0.push(ds);
    }
    Ok(grads)
}

/// `mᵀ x` for a `rows × cols` matrix and a length-`rows` vector.
fn transpose_mul(m: &Mat, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (r, &xr) in m.iter_rows().zip(x) {
        axpy(xr, r, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deltanet::{gdn_recurrent, zero_state};
    use crate::math::Rng;

    fn objective(seq: &GdnSequence, s0: &[Mat], d_out: &[Mat], d_final: &[Mat]) -> f64 {
        let (o, s) = gdn_recurrent(seq, s0).unwrap();
        let a: f64 = o.iter().zip(d_out).map(|(x, g)| dot(x.data(), g.data())).sum();
        let b: f64 = s.iter().zip(d_final).map(|(x, g)| dot(x.data(), g.data())).sum();
        a + b
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(1);
        let seq = GdnSequence::random(&mut rng, 9, 2, 4, 3, 0.5);
        let s0 = zero_state(2, 4, 3);
        let d = vec![Mat::zeros(9, 3); 2];
        let g = gdn_backward(&seq, &s0, &d, None, 4).unwrap();
        for m in g.q.iter().chain(&g.k).chain(&g.v).chain(&g.s0) {
            assert!(m.data().iter().all(|&x| x == 0.0));
        }
        assert!(g.alpha.data().iter().all(|&x| x == 0.0));
        assert!(g.beta.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn beta_zero_means_no_value_gradient() {
        let mut rng = Rng::new(2);
        let mut seq = GdnSequence::random(&mut rng, 8, 2, 4, 4, 0.5);
        seq.beta = Mat::zeros(8, 2);
        let s0: Vec<Mat> = (0..2).map(|_| Mat::random_uniform(&mut rng, 4, 4, -1.0, 1.0)).collect();
        let d: Vec<Mat> = (0..2).map(|_| Mat::random_uniform(&mut rng, 8, 4, -1.0, 1.0)).collect();
        let g = gdn_backward(&seq, &s0, &d, None, 3).unwrap();
        assert!(g.v.iter().all(|m| m.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn checkpoint_chunk_does_not_change_gradients() {
        let mut rng = Rng::new(3);
        let seq = GdnSequence::random(&mut rng, 23, 2, 4, 3, 0.5);
        let s0: Vec<Mat> = (0..2).map(|_| Mat::random_uniform(&mut rng, 3, 4, -1.0, 1.0)).collect();
        let d: Vec<Mat> = (0..2).map(|_| Mat::random_uniform(&mut rng, 23, 3, -1.0, 1.0)).collect();
        let g1 = gdn_backward(&seq, &s0, &d, None, 1).unwrap();
        for chunk in [2, 5, 23, 64] {
            assert_eq!(gdn_backward(&seq, &s0, &d, None, chunk).unwrap(), g1);
        }
    }

    #[test]
    fn matches_finite_differences() {
        let h = 1e-5;
        for seed in 0..5 {
            let mut rng = Rng::new(100 + seed);
            let seq = GdnSequence::random(&mut rng, 6, 2, 4, 4, 0.3);
            let s0: Vec<Mat> = (0..2).map(|_| Mat::random_uniform(&mut rng, 4, 4, -1.0, 1.0)).collect();
            let d: Vec<Mat> = (0..2).map(|_| Mat::random_uniform(&mut rng, 6, 4, -1.0, 1.0)).collect();
            let df: Vec<Mat> = (0..2).map(|_| Mat::random_uniform(&mut rng, 4, 4, -1.0, 1.0)).collect();
            let g = gdn_backward(&seq, &s0, &d, Some(&df), 4).unwrap();

            let check = |analytic: f64, plus: f64, minus: f64| {
                let fd = (plus - minus) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                assert!(rel <= 1e-4, "analytic {analytic} fd {fd}");
            };
            // spot-check alpha and v; the full sweep lives in the acceptance suite
            for t in 0..6 {
                let mut p = seq.clone();
                let mut m = seq.clone();
                p.alpha.set(t, 1, seq.alpha.get(t, 1) + h);
                m.alpha.set(t, 1, seq.alpha.get(t, 1) - h);
                check(g.alpha.get(t, 1), objective(&p, &s0, &d, &df), objective(&m, &s0, &d, &df));

                let mut p = seq.clone();
                let mut m = seq.clone();
                p.v[0].set(t, 2, seq.v[0].get(t, 2) + h);
                m.v[0].set(t, 2, seq.v[0].get(t, 2) - h);
                check(g.v[0].get(t, 2), objective(&p, &s0, &d, &df), objective(&m, &s0, &d, &df));
            }
        }
    }
}
