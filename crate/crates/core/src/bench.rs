//! Streaming benchmarks: per-token latency, frame throughput and memory-norm
//! telemetry over a [`StreamSession`].

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::math::Rng;
use crate::model::{build_model, stream_step, ModelConfig, ModelParams, StreamSession};

pub const DEFAULT_WARMUP: usize = 64;
pub const DEFAULT_TOKENS_PER_FRAME: usize = 274;

/// Stream used to draw input tokens, independent of the weight streams.
const TOKEN_STREAM: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    TokenStream,
    FrameStream,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPlan {
    pub config_name: String,
    pub config: ModelConfig,
    pub mode: BenchMode,
    /// Token mode: recorded steps. Frame mode: frames.
    pub total_steps: usize,
    pub tokens_per_frame: usize,
    pub warmup_steps: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Token mode: time the first and last deciles in alternation on two
    /// identical sessions so slow drifts of the host hit both equally.
    pub paired_deciles: bool,
    /// Frame mode: identical sessions started at evenly spaced, wrapped frame
    /// offsets; each frame's latency is the median over lanes.
    pub lanes: usize,
}

impl BenchPlan {
    pub fn new(config_name: impl Into<String>, config: ModelConfig, mode: BenchMode) -> Self {
        Self {
            config_name: config_name.into(),
            config,
            mode,
            total_steps: 4096,
            tokens_per_frame: DEFAULT_TOKENS_PER_FRAME,
            warmup_steps: DEFAULT_WARMUP,
            repeats: 1,
            seed: 0,
            paired_deciles: true,
            lanes: 1,
        }
    }

    pub fn preset(name: &str, mode: BenchMode) -> Result<Self> {
        Ok(Self::new(name, ModelConfig::preset(name)?, mode))
    }

    pub fn baseline(mut self, on: bool) -> Self {
        self.config.baseline_mode = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Input("repeats must be >= 1".into()));
        }
        if self.lanes == 0 {
            return Err(Error::Input("lanes must be >= 1".into()));
        }
        if self.mode == BenchMode::FrameStream && self.tokens_per_frame == 0 {
            return Err(Error::Input("tokens_per_frame must be >= 1 in frame mode".into()));
        }
        self.config.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    /// Session position after the step (1-based).
    pub step: usize,
    pub latency_ns: u64,
    pub state_bytes: usize,
    /// Frobenius norm of each GDN layer's memory, in layer order.
    pub cache_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenSummary {
    pub empty: bool,
    pub steps: usize,
    pub mean_latency_ns: f64,
    /// Least-squares ns per step over recorded steps.
    pub latency_slope_ns: f64,
    /// Mean latency of the last decile over the first decile.
    pub decile_ratio: f64,
    pub first_state_bytes: usize,
    pub last_state_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenBench {
    pub records: Vec<BenchRecord>,
    pub summary: TokenSummary,
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len().min(y.len());
    if n == 0 {
        return (0.0, 0.0);
    }
    let nf = n as f64;
    let mx = x[..n].iter().sum::<f64>() / nf;
    let my = y[..n].iter().sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    (slope, my - slope * mx)
}

fn decile_len(n: usize) -> usize {
    (n / 10).max(1)
}

/// Last-decile mean over first-decile mean. Deciles hold `max(1, n/10)` items.
pub fn decile_ratio(y: &[f64]) -> f64 {
    if y.is_empty() {
        return f64::NAN;
    }
    let k = decile_len(y.len());
    let first = y[..k].iter().sum::<f64>() / k as f64;
    let last = y[y.len() - k..].iter().sum::<f64>() / k as f64;
    last / first
}

fn median(xs: &mut [u64]) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

fn elapsed_ns(start: Instant) -> u64 {
    (start.elapsed().as_nanos() as u64).max(1)
}

struct Streamer<'a> {
    params: &'a ModelParams,
    session: StreamSession,
    tokens: Rng,
}

impl<'a> Streamer<'a> {
    fn new(params: &'a ModelParams, seed: u64) -> Self {
        Self {
            params,
            session: StreamSession::new(params),
            tokens: Rng::new(seed).fork(TOKEN_STREAM),
        }
    }

    fn step(&mut self) -> Result<()> {
        let tok = self.tokens.index(self.params.cfg.vocab);
        stream_step(self.params, &mut self.session, tok)?;
        Ok(())
    }

    fn warm(&mut self, steps: usize) -> Result<()> {
        (0..steps).try_for_each(|_| self.step())
    }

    /// Wall time of `n` consecutive steps; token sampling is inside the timing.
    fn timed_steps(&mut self, n: usize) -> Result<u64> {
        let t0 = Instant::now();
        for _ in 0..n {
            self.step()?;
        }
        Ok(elapsed_ns(t0))
    }

    fn record(&self, latency_ns: u64) -> BenchRecord {
        BenchRecord {
            step: self.session.step(),
            latency_ns,
            state_bytes: self.session.state_bytes().total,
            cache_norms: self.session.memory_norms(),
        }
    }
}

/// Per-token latency curve after `warmup_steps`. With repeats, each step's
/// latency is the median across repeats; everything else comes from the
/// first repeat (it is deterministic).
pub fn run_token_bench(plan: &BenchPlan) -> Result<TokenBench> {
    plan.validate()?;
    let (params, _) = build_model(&plan.config, plan.seed)?;
    let n = plan.total_steps;
    let k = decile_len(n);
    let paired = plan.paired_deciles && n >= 2 * k;
    let mut records: Vec<BenchRecord> = Vec::with_capacity(n);
    let mut latencies: Vec<Vec<u64>> = vec![Vec::with_capacity(plan.repeats); n];
    for rep in 0..plan.repeats {
        let mut late = Streamer::new(&params, plan.seed);
        late.warm(plan.warmup_steps)?;
        let solo = if paired { n - k } else { n };
        for (i, lat) in latencies.iter_mut().enumerate().take(solo) {
            let ns = late.timed_steps(1)?;
            // paired first-decile timings replace these below
            if !(paired && i < k) {
                lat.push(ns);
            }
            if rep == 0 {
                records.push(late.record(ns));
            }
        }
        if paired {
            let mut early = Streamer::new(&params, plan.seed);
            early.warm(plan.warmup_steps)?;
            for j in 0..k {
                latencies[j].push(early.timed_steps(1)?);
                let ns = late.timed_steps(1)?;
                latencies[n - k + j].push(ns);
                if rep == 0 {
                    records.push(late.record(ns));
                }
            }
        }
    }
    for (r, lat) in records.iter_mut().zip(&mut latencies) {
        r.latency_ns = median(lat);
    }
    let summary = summarize_tokens(&records);
    Ok(TokenBench { records, summary })
}

pub fn summarize_tokens(records: &[BenchRecord]) -> TokenSummary {
    if records.is_empty() {
        return TokenSummary {
            empty: true,
            steps: 0,
            mean_latency_ns: 0.0,
            latency_slope_ns: 0.0,
            decile_ratio: f64::NAN,
            first_state_bytes: 0,
            last_state_bytes: 0,
        };
    }
    let x: Vec<f64> = records.iter().map(|r| r.step as f64).collect();
    let y: Vec<f64> = records.iter().map(|r| r.latency_ns as f64).collect();
    TokenSummary {
        empty: false,
        steps: records.len(),
        mean_latency_ns: y.iter().sum::<f64>() / y.len() as f64,
        latency_slope_ns: least_squares(&x, &y).0,
        decile_ratio: decile_ratio(&y),
        first_state_bytes: records[0].state_bytes,
        last_state_bytes: records[records.len() - 1].state_bytes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub latency_ns: u64,
    pub fps: f64,
    pub state_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameSummary {
    pub empty: bool,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub mean_fps: f64,
    /// Least-squares FPS change per frame.
    pub fps_slope: f64,
    /// `fps_slope · (frames − 1) / mean_fps`: fitted change across the run
    /// relative to the mean.
    pub relative_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBench {
    pub records: Vec<FrameRecord>,
    pub summary: FrameSummary,
}

/// Frames of `tokens_per_frame` steps each under one session; the cache is
/// carried across frames. Lane `m` starts at frame `m·F/lanes`, runs to the
/// end, then restarts from frame 0 with a fresh session, so at any moment
/// the lanes cover evenly spread frame indices. With two or more lanes every
/// sample is scaled by the median of its slot over the median of the run.
pub fn run_frame_bench(plan: &BenchPlan) -> Result<FrameBench> {
    plan.validate()?;
    if plan.mode != BenchMode::FrameStream {
        return Err(Error::Input("run_frame_bench needs a frame-mode plan".into()));
    }
    let (params, _) = build_model(&plan.config, plan.seed)?;
    let frames = plan.total_steps;
    let tpf = plan.tokens_per_frame;
    let mut state_bytes = vec![0; frames];
    let mut latencies: Vec<Vec<u64>> = vec![Vec::with_capacity(plan.repeats * plan.lanes); frames];
    let fresh = || -> Result<Streamer> {
        let mut s = Streamer::new(&params, plan.seed);
        s.warm(plan.warmup_steps)?;
        Ok(s)
    };
    for _ in 0..plan.repeats {
        let mut lanes = Vec::with_capacity(plan.lanes);
        for m in 0..plan.lanes {
            let start = m * frames / plan.lanes;
            let mut s = fresh()?;
            s.warm(start * tpf)?;
            lanes.push((s, start));
        }
        let mut slots: Vec<Vec<(usize, u64)>> = Vec::with_capacity(frames);
        for _ in 0..frames {
            let mut slot = Vec::with_capacity(plan.lanes);
            for (s, frame) in lanes.iter_mut() {
                if *frame == frames {
                    *s = fresh()?;
                    *frame = 0;
                }
                slot.push((*frame, s.timed_steps(tpf)?));
                state_bytes[*frame] = s.session.state_bytes().total;
                *frame += 1;
            }
            slots.push(slot);
        }
        if plan.lanes > 1 {
            // lanes in a slot share host conditions: divide them out
            let mut all: Vec<u64> = slots.iter().flatten().map(|&(_, ns)| ns).collect();
            let global = median(&mut all) as f64;
            for slot in &slots {
                let mut lat: Vec<u64> = slot.iter().map(|&(_, ns)| ns).collect();
                let m = median(&mut lat).max(1) as f64;
                for &(frame, ns) in slot {
                    latencies[frame].push(((ns as f64 / m * global).round() as u64).max(1));
                }
            }
        } else {
            for (frame, ns) in slots.into_iter().flatten() {
                latencies[frame].push(ns);
            }
        }
    }
    let records: Vec<FrameRecord> = latencies
        .iter_mut()
        .zip(state_bytes)
        .enumerate()
        .map(|(frame, (lat, bytes))| {
            let ns = median(lat);
            FrameRecord {
                frame,
                latency_ns: ns,
                fps: 1e9 / ns as f64,
                state_bytes: bytes,
            }
        })
        .collect();
    let summary = summarize_frames(&records, tpf);
    Ok(FrameBench { records, summary })
}

pub fn summarize_frames(records: &[FrameRecord], tokens_per_frame: usize) -> FrameSummary {
    let n = records.len();
    if n == 0 {
        return FrameSummary {
            empty: true,
            frames: 0,
            tokens_per_frame,
            mean_fps: 0.0,
            fps_slope: 0.0,
            relative_drift: 0.0,
        };
    }
    let x: Vec<f64> = records.iter().map(|r| r.frame as f64).collect();
    let y: Vec<f64> = records.iter().map(|r| r.fps).collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let slope = least_squares(&x, &y).0;
    FrameSummary {
        empty: false,
        frames: n,
        tokens_per_frame,
        mean_fps: mean,
        fps_slope: slope,
        relative_drift: slope * (n.saturating_sub(1)) as f64 / mean,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlateauStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// `(max − min) / mean`
    pub relative_range: f64,
}

fn plateau(values: &[f64]) -> PlateauStats {
    let mean = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    PlateauStats {
        mean,
        min,
        max,
        relative_range: if mean > 0.0 { (max - min) / mean } else { f64::INFINITY },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormTrace {
    /// `rows[t][l]`: norm of GDN layer `l` after `t` steps; row 0 is the fresh session.
    pub rows: Vec<Vec<f64>>,
    /// Steps (1-based) where some layer broke `‖S_t‖ ≤ α̂‖S_{t−1}‖ + β̂‖v_t‖`.
    pub bound_violations: Vec<usize>,
    /// Largest `‖S_t‖ / bound` seen, over layers and steps with a nonzero bound.
    pub max_bound_ratio: f64,
    /// Per layer, over steps `n/2 + 1 ..= n`.
    pub second_half: Vec<PlateauStats>,
}

impl NormTrace {
    pub fn n_layers(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn plateau_holds(&self, max_relative_range: f64) -> bool {
        !self.second_half.is_empty()
            && self.second_half.iter().all(|p| p.relative_range <= max_relative_range)
    }
}

const BOUND_SLACK: f64 = 1e-12;

/// Memory norms after every step of a stationary random token stream
/// (`warmup_steps` is ignored: the trace starts at the fresh session).
pub fn cache_norm_trace(plan: &BenchPlan) -> Result<NormTrace> {
    plan.validate()?;
    let (params, _) = build_model(&plan.config, plan.seed)?;
    let mut s = Streamer::new(&params, plan.seed);
    let mut prev = s.session.memory_norms();
    if prev.is_empty() {
        return Err(Error::Config("norm trace needs at least one GDN layer".into()));
    }
    let mut rows = Vec::with_capacity(plan.total_steps + 1);
    rows.push(prev.clone());
    let mut violations = Vec::new();
    let mut max_ratio: f64 = 0.0;
    for _ in 0..plan.total_steps {
        s.step()?;
        let now = s.session.memory_norms();
        let mut ok = true;
        for ((info, &p), &n) in s.session.last_gdn_info().iter().zip(&prev).zip(&now) {
            let bound = info.norm_bound(p);
            if n > bound * (1.0 + BOUND_SLACK) + BOUND_SLACK {
                ok = false;
            }
            if bound > 0.0 {
                max_ratio = max_ratio.max(n / bound);
            }
        }
        if !ok {
            violations.push(s.session.step());
        }
        rows.push(now.clone());
        prev = now;
    }
    let n = plan.total_steps;
    let half = &rows[n / 2 + 1..];
    let layers = rows[0].len();
    let second_half = if half.is_empty() {
        Vec::new()
    } else {
        (0..layers)
            .map(|l| plateau(&half.iter().map(|r| r[l]).collect::<Vec<_>>()))
            .collect()
    };
    Ok(NormTrace {
        rows,
        bound_violations: violations,
        max_bound_ratio: max_ratio,
        second_half,
    })
}

fn norm_header(n: usize) -> impl Iterator<Item = String> {
    (0..n).map(|i| format!("norm_layer_{i}"))
}

/// `step,latency_ns,state_bytes,norm_layer_0,…`, one row per step.
pub fn write_bench_csv<W: Write>(out: W, records: &[BenchRecord]) -> Result<()> {
    let layers = records.first().map_or(0, |r| r.cache_norms.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "latency_ns".into(), "state_bytes".into()];
    header.extend(norm_header(layers));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.step.to_string(), r.latency_ns.to_string(), r.state_bytes.to_string()];
        row.extend(r.cache_norms.iter().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `frame,latency_ns,fps,state_bytes`, one row per frame.
pub fn write_frame_csv<W: Write>(out: W, records: &[FrameRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["frame", "latency_ns", "fps", "state_bytes"])?;
    }
    w.flush()?;
    Ok(())
}

/// `step,norm_layer_0,…`, one row per step starting at step 0.
pub fn write_norm_csv<W: Write>(out: W, trace: &NormTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string()];
    header.extend(norm_header(trace.n_layers()));
    w.write_record(&header)?;
    for (t, row) in trace.rows.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deltanet::GdnConfig;
    use crate::math::ROPE_BASE;
    use crate::model::HybridRatio;

    fn tiny() -> ModelConfig {
        ModelConfig {
            hidden: 16,
            n_blocks: 1,
            layers_per_block: 4,
            hybrid_ratio: HybridRatio::Quarter,
            n_query_heads: 2,
            n_kv_heads: 1,
            head_dim: 8,
            window: 8,
            mlp_hidden: 24,
            vocab: 32,
            gdn: GdnConfig {
                n_heads: 2,
                d_k: 4,
                d_v: 4,
                conv_width: 4,
                chunk: 4,
            },
            baseline_mode: false,
            rope_base: ROPE_BASE,
            init_scale: 0.3,
        }
    }

    fn plan(mode: BenchMode, steps: usize) -> BenchPlan {
        BenchPlan {
            total_steps: steps,
            warmup_steps: 4,
            ..BenchPlan::new("tiny", tiny(), mode)
        }
    }

    #[test]
    fn least_squares_matches_normal_equations() {
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let n = 2 + rng.index(200);
            let x: Vec<f64> = (0..n).map(|i| i as f64 + rng.uniform(0.0, 1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| 3.0 - 0.25 * v + rng.normal()).collect();
            // Cramer's rule on the raw sums
            let nf = n as f64;
            let sx: f64 = x.iter().sum();
            let sy: f64 = y.iter().sum();
            let sxx: f64 = x.iter().map(|v| v * v).sum();
            let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            let det = nf * sxx - sx * sx;
            let slope = (nf * sxy - sx * sy) / det;
            let icpt = (sxx * sy - sx * sxy) / det;
            let (m, c) = least_squares(&x, &y);
            assert!((m - slope).abs() <= 1e-9 * slope.abs().max(1.0));
            assert!((c - icpt).abs() <= 1e-9 * icpt.abs().max(1.0));
        }
        assert_eq!(least_squares(&[1.0, 1.0], &[2.0, 5.0]).0, 0.0);
    }

    #[test]
    fn decile_ratio_cases() {
        let flat = vec![5.0; 100];
        assert_eq!(decile_ratio(&flat), 1.0);
        let ramp: Vec<f64> = (1..=100).map(f64::from).collect();
        // (91..=100 mean) / (1..=10 mean)
        assert!((decile_ratio(&ramp) - 95.5 / 5.5).abs() < 1e-12);
        assert_eq!(decile_ratio(&[2.0, 4.0]), 2.0);
    }

    #[test]
    fn empty_token_bench() {
        let b = run_token_bench(&plan(BenchMode::TokenStream, 0)).unwrap();
        assert!(b.records.is_empty());
        assert!(b.summary.empty);
    }

    #[test]
    fn token_records_are_deterministic() {
        let p = BenchPlan { repeats: 3, ..plan(BenchMode::TokenStream, 20) };
        let a = run_token_bench(&p).unwrap();
        let b = run_token_bench(&p).unwrap();
        assert_eq!(a.records.len(), 20);
        assert_eq!(a.records[0].step, 5);
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!(x.latency_ns > 0);
            assert_eq!(x.step, y.step);
            assert_eq!(x.state_bytes, y.state_bytes);
            assert_eq!(x.cache_norms, y.cache_norms);
            assert!(x.cache_norms.iter().all(|&n| n >= 0.0));
        }
        assert_eq!(a.records[0].cache_norms.len(), 3);
    }

    #[test]
    fn paired_deciles_keep_records() {
        let p = plan(BenchMode::TokenStream, 25);
        let a = run_token_bench(&p).unwrap();
        let b = run_token_bench(&BenchPlan { paired_deciles: false, ..p.clone() }).unwrap();
        assert_eq!(a.records.len(), 25);
        for (i, (x, y)) in a.records.iter().zip(&b.records).enumerate() {
            assert_eq!(x.step, 5 + i);
            assert_eq!(x.state_bytes, y.state_bytes);
            assert_eq!(x.cache_norms, y.cache_norms);
        }
    }

    #[test]
    fn lanes_match_single_lane_state() {
        let p = BenchPlan { tokens_per_frame: 3, ..plan(BenchMode::FrameStream, 7) }.baseline(true);
        let one = run_frame_bench(&p).unwrap();
        let many = run_frame_bench(&BenchPlan { lanes: 3, repeats: 2, ..p.clone() }).unwrap();
        assert_eq!(many.records.len(), 7);
        for (x, y) in one.records.iter().zip(&many.records) {
            assert_eq!(x.frame, y.frame);
            assert_eq!(x.state_bytes, y.state_bytes);
            assert!(y.latency_ns > 0);
        }
        assert!(run_frame_bench(&BenchPlan { lanes: 0, ..p }).is_err());
    }

    #[test]
    fn baseline_state_grows_every_step() {
        let p = plan(BenchMode::TokenStream, 30).baseline(true);
        let b = run_token_bench(&p).unwrap();
        assert!(b.records.iter().all(|r| r.cache_norms.is_empty()));
        let per_step = 2 * 1 * 8 * 8 * 4;
        for w in b.records.windows(2) {
            assert_eq!(w[1].state_bytes - w[0].state_bytes, per_step);
        }
    }

    #[test]
    fn single_frame_fps() {
        let p = BenchPlan { tokens_per_frame: 5, ..plan(BenchMode::FrameStream, 1) };
        let f = run_frame_bench(&p).unwrap();
        assert_eq!(f.records.len(), 1);
        let r = &f.records[0];
        assert!((r.fps - 1e9 / r.latency_ns as f64).abs() < 1e-9);
        assert_eq!(f.summary.fps_slope, 0.0);
        assert!(run_frame_bench(&plan(BenchMode::TokenStream, 1)).is_err());
    }

    #[test]
    fn invalid_plans() {
        let p = BenchPlan { repeats: 0, ..plan(BenchMode::TokenStream, 1) };
        assert!(run_token_bench(&p).is_err());
        let p = BenchPlan { tokens_per_frame: 0, ..plan(BenchMode::FrameStream, 1) };
        assert!(run_frame_bench(&p).is_err());
    }

    #[test]
    fn norm_trace_starts_at_zero_and_respects_bound() {
        let t = cache_norm_trace(&plan(BenchMode::TokenStream, 200)).unwrap();
        assert_eq!(t.rows.len(), 201);
        assert!(t.rows[0].iter().all(|&n| n == 0.0));
        assert!(t.bound_violations.is_empty());
        assert!(t.max_bound_ratio <= 1.0 + 1e-9);
        assert_eq!(t.second_half.len(), 3);
        assert!(cache_norm_trace(&plan(BenchMode::TokenStream, 4).baseline(true)).is_err());
    }

    #[test]
    fn csv_schema() {
        let b = run_token_bench(&plan(BenchMode::TokenStream, 6)).unwrap();
        let mut buf = Vec::new();
        write_bench_csv(&mut buf, &b.records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,latency_ns,state_bytes,norm_layer_0,norm_layer_1,norm_layer_2"
        );
        assert_eq!(lines.count(), 6);

        let t = cache_norm_trace(&plan(BenchMode::TokenStream, 3)).unwrap();
        let mut buf = Vec::new();
        write_norm_csv(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,norm_layer_0,norm_layer_1,norm_layer_2\n0,0,0,0\n"));

        let mut buf = Vec::new();
        write_frame_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "frame,latency_ns,fps,state_bytes\n");
    }
}
