//! Cross-module self-checks with machine-readable results.

use serde::Serialize;

use crate::attention::{attention, full_attention, AttnConfig, Mask, SwaCache};
use crate::bench::{cache_norm_trace, BenchMode, BenchPlan};
use crate::deltanet::{
    delta_update, gdn_backward, gdn_chunked, gdn_recurrent, gdn_step, read_memory, GdnGates,
    GdnGrads, GdnSequence,
};
use crate::error::{Error, Result};
use crate::losses::{logit_kl, loss_grad_check, relative_error, LossKind, FD_STEP, GRAD_CHECK_FLOOR};
use crate::math::{Mat, Rng, ROPE_BASE};
use crate::model::{build_model, forward_sequence, stream_step, ModelConfig, StreamSession};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Equivalence,
    Gradients,
    Invariants,
    All,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "equivalence" => Ok(Suite::Equivalence),
            "gradients" => Ok(Suite::Gradients),
            "invariants" => Ok(Suite::Invariants),
            "all" => Ok(Suite::All),
            other => Err(Error::Input(format!("unknown suite {other:?}"))),
        }
    }

    fn includes(self, s: Suite) -> bool {
        self == Suite::All || self == s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub suite: Suite,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: &str, suite: Suite, max_error: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            suite,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Added to one entry of every chunked output before comparison.
    pub perturb_chunked: Option<f64>,
    /// Model for the streaming check.
    pub config: ModelConfig,
}

impl VerifyOptions {
    pub fn new(config: ModelConfig) -> Self {
        Self {
            seed: 0,
            perturb_chunked: None,
            config,
        }
    }
}

pub fn verify(suite: Suite, opts: &VerifyOptions) -> Result<Report> {
    let mut checks = Vec::new();
    if suite.includes(Suite::Equivalence) {
        let s = Suite::Equivalence;
        checks.push(Check::new("gdn_step_vs_dense", s, check_step_dense(opts.seed, 1000)?, 1e-12));
        checks.push(Check::new(
            "chunked_vs_recurrent",
            s,
            check_chunked(opts.seed, opts.perturb_chunked)?,
            1e-10,
        ));
        checks.push(Check::new("stream_vs_batch", s, check_stream_batch(&opts.config, opts.seed, 32)?, 1e-9));
        checks.push(Check::new("swa_wide_window_vs_causal", s, check_wide_window(opts.seed)?, 1e-10));
        checks.push(Check::new("orthonormal_retrieval", s, check_retrieval(opts.seed)?, 1e-10));
    }
    if suite.includes(Suite::Gradients) {
        let s = Suite::Gradients;
        checks.push(Check::new("gdn_backward_vs_fd", s, check_gdn_gradients(opts.seed, 20)?, 1e-4));
        for kind in LossKind::ALL {
            let err = (0..20)
                .map(|i| loss_grad_check(kind, opts.seed.wrapping_add(i)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            checks.push(Check::new(&format!("loss_{}_vs_fd", kind.name()), s, err, 1e-6));
        }
    }
    if suite.includes(Suite::Invariants) {
        let s = Suite::Invariants;
        checks.push(Check::new("memory_norm_bound", s, check_norm_bound(&opts.config, opts.seed)?, 1e-12));
        checks.push(Check::new("reflector_contraction", s, check_reflector(opts.seed)?, 1e-12));
        let (hybrid, baseline) = check_state_law(&opts.config, opts.seed)?;
        checks.push(Check::new("hybrid_constant_state", s, hybrid, 0.0));
        checks.push(Check::new("baseline_state_increment", s, baseline, 0.0));
        checks.push(Check::new("kl_nonnegative", s, check_kl_nonnegative(opts.seed)?, 0.0));
    }
    Ok(Report {
        suite,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Independent reference evaluations used by the checks.
pub mod oracle {
    use crate::deltanet::{gdn_recurrent, GdnGrads, GdnSequence};
    use crate::error::Result;
    use crate::math::{matmul, Mat};

    /// `S' = α S (I − β k kᵀ) + β v kᵀ`, `o = S' q` with every matrix formed.
    pub fn dense_gdn_step(s: &Mat, q: &[f64], k: &[f64], v: &[f64], alpha: f64, beta: f64) -> Result<(Mat, Vec<f64>)> {
        let dk = k.len();
        let mut reflector = Mat::identity(dk);
        for i in 0..dk {
            for j in 0..dk {
                reflector.set(i, j, reflector.get(i, j) - beta * k[i] * k[j]);
            }
        }
        let mut next = matmul(s, &reflector)?.scale(alpha);
        for i in 0..v.len() {
            for j in 0..dk {
                next.set(i, j, next.get(i, j) + beta * v[i] * k[j]);
            }
        }
        let qm = Mat::from_vec(dk, 1, q.to_vec())?;
        let o = matmul(&next, &qm)?.into_data();
        Ok((next, o))
    }

    /// `Σ_h ⟨dO_h, O_h⟩ + ⟨dS_h, S_h⟩` through the step loop.
    pub fn recurrence_objective(seq: &GdnSequence, s0: &[Mat], d_out: &[Mat], d_final: &[Mat]) -> Result<f64> {
        let (o, s) = gdn_recurrent(seq, s0)?;
        let ip = |a: &[Mat], b: &[Mat]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>())
                .sum()
        };
        Ok(ip(&o, d_out) + ip(&s, d_final))
    }

    #[derive(Debug, Clone, Copy)]
    pub enum Field {
        Q(usize),
        K(usize),
        V(usize),
        Alpha,
        Beta,
        S0(usize),
    }

    impl Field {
        pub fn all(heads: usize) -> Vec<Field> {
            let mut f = vec![Field::Alpha, Field::Beta];
            for h in 0..heads {
                f.extend([Field::Q(h), Field::K(h), Field::V(h), Field::S0(h)]);
            }
            f
        }

        pub fn input_mut<'a>(self, seq: &'a mut GdnSequence, s0: &'a mut [Mat]) -> &'a mut Mat {
            match self {
                Field::Q(h) => &mut seq.q[h],
                Field::K(h) => &mut seq.k[h],
                Field::V(h) => &mut seq.v[h],
                Field::Alpha => &mut seq.alpha,
                Field::Beta => &mut seq.beta,
                Field::S0(h) => &mut s0[h],
            }
        }

        pub fn grad(self, g: &GdnGrads) -> &Mat {
            match self {
                Field::Q(h) => &g.q[h],
                Field::K(h) => &g.k[h],
                Field::V(h) => &g.v[h],
                Field::Alpha => &g.alpha,
                Field::Beta => &g.beta,
                Field::S0(h) => &g.s0[h],
            }
        }
    }

    /// Central difference of [`recurrence_objective`] w.r.t. one input entry.
    pub fn recurrence_fd(
        seq: &GdnSequence,
        s0: &[Mat],
        d_out: &[Mat],
        d_final: &[Mat],
        field: Field,
        idx: usize,
        h: f64,
    ) -> Result<f64> {
        let eval = |delta: f64| -> Result<f64> {
            let mut seq = seq.clone();
            let mut s0 = s0.to_vec();
            field.input_mut(&mut seq, &mut s0).data_mut()[idx] += delta;
            recurrence_objective(&seq, &s0, d_out, d_final)
        };
        Ok((eval(h)? - eval(-h)?) / (2.0 * h))
    }
}

fn random_states(rng: &mut Rng, h: usize, dk: usize, dv: usize) -> Vec<Mat> {
    (0..h).map(|_| Mat::random_uniform(rng, dv, dk, -0.5, 0.5)).collect()
}

fn max_diff(a: &[Mat], b: &[Mat]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

pub fn check_step_dense(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(11);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let heads = 1 + rng.index(3);
        let dk = 1 + rng.index(8);
        let dv = 1 + rng.index(8);
        let mut state = random_states(&mut rng, heads, dk, dv);
        let before = state.clone();
        let q = Mat::random_uniform(&mut rng, heads, dk, -1.0, 1.0);
        let rows: Vec<Vec<f64>> = (0..heads).map(|_| rng.unit_vec(dk)).collect();
        let k = Mat::from_rows(&rows)?;
        let v = Mat::random_uniform(&mut rng, heads, dv, -1.0, 1.0);
        let gates = GdnGates {
            alpha: (0..heads).map(|_| rng.uniform(0.0, 1.0)).collect(),
            beta: (0..heads).map(|_| rng.uniform(0.0, 1.0)).collect(),
        };
        let o = gdn_step(&q, &k, &v, &gates, &mut state)?;
        for h in 0..heads {
            let (s_ref, o_ref) =
                oracle::dense_gdn_step(&before[h], q.row(h), k.row(h), v.row(h), gates.alpha[h], gates.beta[h])?;
            worst = worst
                .max(state[h].max_abs_diff(&s_ref))
                .max(crate::math::max_abs_diff(o.row(h), &o_ref));
        }
    }
    Ok(worst)
}

pub fn check_chunked(seed: u64, perturb: Option<f64>) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(12);
    let len = 256;
    let seq = GdnSequence::random(&mut rng, len, 2, 8, 6, 0.8);
    let s0 = random_states(&mut rng, 2, 8, 6);
    let (o_ref, s_ref) = gdn_recurrent(&seq, &s0)?;
    let mut worst: f64 = 0.0;
    for chunk in [1, 2, 7, 64, len] {
        let (mut o, s) = gdn_chunked(&seq, &s0, chunk)?;
        if let Some(eps) = perturb {
            let x = o[0].get(len / 2, 0);
            o[0].set(len / 2, 0, x + eps);
        }
        worst = worst.max(max_diff(&o, &o_ref)).max(max_diff(&s, &s_ref));
    }
    Ok(worst)
}

/// Streamed logits vs a batch forward of every prefix.
pub fn check_stream_batch(cfg: &ModelConfig, seed: u64, steps: usize) -> Result<f64> {
    let (params, _) = build_model(cfg, seed)?;
    let mut rng = Rng::new(seed).fork(13);
    let tokens: Vec<usize> = (0..steps).map(|_| rng.index(cfg.vocab)).collect();
    let mut session = StreamSession::new(&params);
    let full = forward_sequence(&params, &tokens)?;
    let mut worst: f64 = 0.0;
    for (t, &tok) in tokens.iter().enumerate() {
        let logits = stream_step(&params, &mut session, tok)?;
        let prefix = forward_sequence(&params, &tokens[..=t])?;
        worst = worst
            .max(crate::math::max_abs_diff(&logits, prefix.row(t)))
            .max(crate::math::max_abs_diff(&logits, full.row(t)));
    }
    Ok(worst)
}

/// Window ≥ L against causal attention, batch and ring-buffer paths.
pub fn check_wide_window(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(14);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let len = 1 + rng.index(40);
        let nkv = 1 + rng.index(2);
        let nq = nkv * (1 + rng.index(2));
        let d = 2 * (1 + rng.index(4));
        let window = len + rng.index(8);
        let heads = |rng: &mut Rng, n: usize| -> Vec<Mat> {
            (0..n).map(|_| Mat::random_uniform(rng, len, d, -1.0, 1.0)).collect()
        };
        let q = heads(&mut rng, nq);
        let k = heads(&mut rng, nkv);
        let v = heads(&mut rng, nkv);
        let reference = full_attention(&q, &k, &v, true)?;
        worst = worst.max(max_diff(&attention(&q, &k, &v, Mask::Window(window))?, &reference));

        let cfg = AttnConfig {
            n_query_heads: nq,
            n_kv_heads: nkv,
            head_dim: d,
            window,
            rope_base: ROPE_BASE,
        };
        let mut cache = SwaCache::new(cfg);
        let pick = |hs: &[Mat], t: usize| -> Result<Mat> {
            Mat::from_rows(&hs.iter().map(|m| m.row(t).to_vec()).collect::<Vec<_>>())
        };
        for t in 0..len {
            let o = cache.step(&pick(&q, t)?, &pick(&k, t)?, &pick(&v, t)?)?;
            for (h, r) in reference.iter().enumerate() {
                worst = worst.max(crate::math::max_abs_diff(o.row(h), r.row(t)));
            }
        }
    }
    Ok(worst)
}

/// Modified Gram-Schmidt on random vectors.
pub fn orthonormal_keys(rng: &mut Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v = rng.normal_vec(dim);
        for u in &out {
            let p = crate::math::dot(&v, u);
            crate::math::axpy(-p, u, &mut v);
        }
        let norm = crate::math::l2_norm(&v);
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            out.push(v);
        }
    }
    out
}

/// Write up to `d_k` orthonormal-key pairs with α = β = 1, read each back.
pub fn check_retrieval(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(15);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let dk = 1 + rng.index(16);
        let dv = 1 + rng.index(8);
        let n = 1 + rng.index(dk);
        let keys = orthonormal_keys(&mut rng, n, dk);
        let values: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(dv)).collect();
        let mut s = Mat::zeros(dv, dk);
        for (k, v) in keys.iter().zip(&values) {
            delta_update(&mut s, k, v, 1.0, 1.0);
        }
        for (k, v) in keys.iter().zip(&values) {
            worst = worst.max(crate::math::max_abs_diff(&read_memory(&s, k), v));
        }
    }
    Ok(worst)
}

/// Max relative error of every gradient entry over `instances` seeded cases.
pub fn check_gdn_gradients(seed: u64, instances: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let err = gdn_gradient_error(seed.wrapping_add(i))?;
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn gdn_gradient_error(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(16);
    let (len, heads, dk, dv) = (6, 2, 3, 2);
    let seq = GdnSequence::random(&mut rng, len, heads, dk, dv, 0.5);
    let s0 = random_states(&mut rng, heads, dk, dv);
    let d_out: Vec<Mat> = (0..heads).map(|_| Mat::random_uniform(&mut rng, len, dv, -1.0, 1.0)).collect();
    let d_final = random_states(&mut rng, heads, dk, dv);
    let grads: GdnGrads = gdn_backward(&seq, &s0, &d_out, Some(&d_final), 4)?;
    let mut worst: f64 = 0.0;
    for field in oracle::Field::all(heads) {
        let analytic = field.grad(&grads);
        for idx in 0..analytic.data().len() {
            let fd = oracle::recurrence_fd(&seq, &s0, &d_out, &d_final, field, idx, FD_STEP)?;
            worst = worst.max(relative_error(analytic.data()[idx], fd, GRAD_CHECK_FLOOR));
        }
    }
    Ok(worst)
}

/// `max(0, ‖S_t‖ / bound − 1)` over a 256-step micro stream.
pub fn check_norm_bound(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let mut cfg = cfg.clone();
    cfg.baseline_mode = false;
    let plan = BenchPlan {
        total_steps: 256,
        seed,
        ..BenchPlan::new("verify", cfg, BenchMode::TokenStream)
    };
    let trace = cache_norm_trace(&plan)?;
    Ok((trace.max_bound_ratio - 1.0).max(0.0) + trace.bound_violations.len() as f64)
}

/// `max(0, ‖S(I − βkkᵀ)‖ / ‖S‖ − 1)` on random instances.
pub fn check_reflector(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(17);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let dk = 1 + rng.index(8);
        let dv = 1 + rng.index(8);
        let mut s = Mat::random_uniform(&mut rng, dv, dk, -1.0, 1.0);
        let before = s.frobenius();
        let k = rng.unit_vec(dk);
        let beta = rng.uniform(0.0, 1.0);
        // α = 1 and a zero value isolate the reflector
        delta_update(&mut s, &k, &vec![0.0; dv], 1.0, beta);
        if before > 0.0 {
            worst = worst.max(s.frobenius() / before - 1.0);
        }
    }
    Ok(worst)
}

/// Returns `(|bytes(10W) − bytes(W)|, max |Δbytes − expected per-step increment|)`.
pub fn check_state_law(cfg: &ModelConfig, seed: u64) -> Result<(f64, f64)> {
    let mut hybrid = cfg.clone();
    hybrid.baseline_mode = false;
    let (params, _) = build_model(&hybrid, seed)?;
    let mut session = StreamSession::new(&params);
    let w = cfg.window;
    let mut rng = Rng::new(seed).fork(18);
    let mut at_w = 0;
    for t in 1..=10 * w {
        stream_step(&params, &mut session, rng.index(cfg.vocab))?;
        if t == w {
            at_w = session.state_bytes().total;
        }
    }
    let hybrid_err = (session.state_bytes().total as f64 - at_w as f64).abs();

    let mut base = cfg.clone();
    base.baseline_mode = true;
    let (params, _) = build_model(&base, seed)?;
    let expected = base.attn_config().kv_bytes_per_token() * base.n_layers();
    let mut session = StreamSession::new(&params);
    let mut prev = session.state_bytes().total;
    let mut base_err: f64 = 0.0;
    for _ in 0..2 * w {
        stream_step(&params, &mut session, rng.index(cfg.vocab))?;
        let now = session.state_bytes().total;
        base_err = base_err.max((now as f64 - prev as f64 - expected as f64).abs());
        prev = now;
    }
    Ok((hybrid_err, base_err))
}

/// `max(0, −min KL)` over random logit pairs.
pub fn check_kl_nonnegative(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed).fork(19);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let v = 2 + rng.index(10);
        let a = Mat::random_uniform(&mut rng, 3, v, -4.0, 4.0);
        let b = Mat::random_uniform(&mut rng, 3, v, -4.0, 4.0);
        worst = worst.max(-logit_kl(&a, &b)?);
        worst = worst.max(logit_kl(&a, &a)?.abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deltanet::zero_state;

    #[test]
    fn dense_oracle_matches_on_identity_reflector() {
        // β = 0: S' = αS
        let s = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (next, o) = oracle::dense_gdn_step(&s, &[1.0, 0.0], &[0.0, 1.0], &[5.0, 6.0], 0.5, 0.0).unwrap();
        assert_eq!(next, s.scale(0.5));
        assert_eq!(o, vec![0.5, 1.5]);
    }

    #[test]
    fn light_checks_pass() {
        assert!(check_step_dense(1, 100).unwrap() <= 1e-12);
        assert!(check_chunked(1, None).unwrap() <= 1e-10);
        assert!(check_chunked(1, Some(1e-3)).unwrap() >= 1e-3 * 0.5);
        assert!(check_wide_window(1).unwrap() <= 1e-10);
        assert!(check_retrieval(1).unwrap() <= 1e-10);
        assert!(gdn_gradient_error(1).unwrap() <= 1e-4);
        assert!(check_reflector(1).unwrap() <= 1e-12);
        assert_eq!(check_kl_nonnegative(1).unwrap(), 0.0);
    }

    #[test]
    fn fd_field_access_round_trips() {
        let mut rng = Rng::new(2);
        let mut seq = GdnSequence::random(&mut rng, 3, 2, 2, 2, 0.5);
        let mut s0 = zero_state(2, 2, 2);
        for f in oracle::Field::all(2) {
            f.input_mut(&mut seq, &mut s0).data_mut()[0] = 0.25;
        }
        assert_eq!(seq.alpha.get(0, 0), 0.25);
        assert_eq!(s0[1].get(0, 0), 0.25);
    }

    #[test]
    fn suite_names() {
        assert_eq!(Suite::parse("all").unwrap(), Suite::All);
        assert!(Suite::parse("speed").is_err());
        assert!(Suite::All.includes(Suite::Gradients));
        assert!(!Suite::Equivalence.includes(Suite::Gradients));
    }
}
