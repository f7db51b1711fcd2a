//! Hybrid decoder: blocks of sliding-window attention and Gated DeltaNet
//! mixers, each followed by a gated-SiLU MLP, with pre-norm residuals.
//!
//! Two execution paths produce the same logits: [`forward_sequence`] over a
//! whole token sequence and [`stream_step`] one token at a time against a
//! [`StreamSession`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::attention::{attention, AttnConfig, FullKvCache, Mask, SwaCache};
use crate::deltanet::{
    gdn_cell_forward, gdn_cell_sequence, DeltaState, GdnConfig, GdnParams, GdnStepInfo,
};
use crate::error::{shape_err, Error, Result};
use crate::math::{
    matmul, rms_norm, rms_norm_vec, rope_in_place, silu_in_place, silu_scalar, vec_mat, Mat, Rng,
    ROPE_BASE,
};

pub const MICRO_PRESET: &str = include_str!("../presets/micro.json");
pub const PAPER_SHAPE_PRESET: &str = include_str!("../presets/paper-shape.json");

/// Fraction of mixer layers that are sliding-window attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HybridRatio {
    Zero,
    Eighth,
    Quarter,
    Half,
}

impl HybridRatio {
    /// Layers per SWA layer, `None` for ratio 0.
    pub fn period(self) -> Option<usize> {
        match self {
            HybridRatio::Zero => None,
            HybridRatio::Eighth => Some(8),
            HybridRatio::Quarter => Some(4),
            HybridRatio::Half => Some(2),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HybridRatio::Zero => "0",
            HybridRatio::Eighth => "1/8",
            HybridRatio::Quarter => "1/4",
            HybridRatio::Half => "1/2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "0" => Ok(HybridRatio::Zero),
            "1/8" => Ok(HybridRatio::Eighth),
            "1/4" => Ok(HybridRatio::Quarter),
            "1/2" => Ok(HybridRatio::Half),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("unknown hybrid ratio {other:?}")))
                .and_then(Self::from_f64),
        }
    }

    pub fn from_f64(r: f64) -> Result<Self> {
        [
            (0.0, HybridRatio::Zero),
            (0.125, HybridRatio::Eighth),
            (0.25, HybridRatio::Quarter),
            (0.5, HybridRatio::Half),
        ]
        .into_iter()
        .find(|(v, _)| (v - r).abs() < 1e-12)
        .map(|(_, h)| h)
        .ok_or_else(|| Error::Config(format!("hybrid ratio {r} not in {{0, 1/8, 1/4, 1/2}}")))
    }
}

impl fmt::Display for HybridRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for HybridRatio {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for HybridRatio {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(x) => HybridRatio::from_f64(x),
            Raw::Str(s) => HybridRatio::parse(&s),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

fn default_rope_base() -> f64 {
    ROPE_BASE
}

fn default_init_scale() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: usize,
    pub n_blocks: usize,
    pub layers_per_block: usize,
    pub hybrid_ratio: HybridRatio,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub window: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    pub gdn: GdnConfig,
    #[serde(default)]
    pub baseline_mode: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Half-width of the uniform weight initialization.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LayerKind {
    #[serde(rename = "SWA")]
    Swa,
    #[serde(rename = "GDN")]
    Gdn,
    #[serde(rename = "FULL")]
    FullAttention,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Swa => "SWA",
            LayerKind::Gdn => "GDN",
            LayerKind::FullAttention => "FULL",
        })
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Self::from_json(MICRO_PRESET),
            "paper-shape" => Self::from_json(PAPER_SHAPE_PRESET),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.n_blocks == 0 || self.layers_per_block == 0 {
            return Err(Error::Config("hidden, n_blocks, layers_per_block must be nonzero".into()));
        }
        if self.vocab == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("vocab and mlp_hidden must be nonzero".into()));
        }
        self.attn_config().validate()?;
        self.gdn.validate()
    }

    pub fn attn_config(&self) -> AttnConfig {
        AttnConfig {
            n_query_heads: self.n_query_heads,
            n_kv_heads: self.n_kv_heads,
            head_dim: self.head_dim,
            window: self.window,
            rope_base: self.rope_base,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_blocks * self.layers_per_block
    }

    /// SWA layers open every run of `1/ratio` layers; the rest are GDN.
    /// Baseline mode makes every layer full attention.
    pub fn layer_pattern(&self) -> Vec<LayerKind> {
        (0..self.n_layers())
            .map(|i| {
                if self.baseline_mode {
                    LayerKind::FullAttention
                } else {
                    match self.hybrid_ratio.period() {
                        Some(p) if i % p == 0 => LayerKind::Swa,
                        _ => LayerKind::Gdn,
                    }
                }
            })
            .collect()
    }

    pub fn attn_param_count(&self) -> usize {
        let q = self.n_query_heads * self.head_dim;
        let kv = self.n_kv_heads * self.head_dim;
        self.hidden * (q + 2 * kv) + q * self.hidden
    }

    pub fn mlp_param_count(&self) -> usize {
        3 * self.hidden * self.mlp_hidden
    }

    pub fn param_count(&self) -> usize {
        let layers: usize = self
            .layer_pattern()
            .iter()
            .map(|k| {
                let mixer = match k {
                    LayerKind::Gdn => self.gdn.param_count(self.hidden),
                    _ => self.attn_param_count(),
                };
                mixer + self.mlp_param_count() + 2 * self.hidden
            })
            .sum();
        2 * self.vocab * self.hidden + self.hidden + layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

impl AttnParams {
    pub fn random(cfg: &AttnConfig, hidden: usize, rng: &mut Rng, scale: f64) -> Self {
        let q = cfg.n_query_heads * cfg.head_dim;
        let kv = cfg.n_kv_heads * cfg.head_dim;
        let mut m = |r, c| Mat::random_uniform(rng, r, c, -scale, scale);
        Self {
            w_q: m(hidden, q),
            w_k: m(hidden, kv),
            w_v: m(hidden, kv),
            w_o: m(q, hidden),
        }
    }
}

/// Attention mixer over `L × hidden` normalized input starting at absolute
/// position `start`.
pub fn attention_mixer_sequence(
    x: &Mat,
    params: &AttnParams,
    cfg: &AttnConfig,
    mask: Mask,
    start: usize,
) -> Result<Mat> {
    let d = cfg.head_dim;
    let split = |m: &Mat, heads: usize, rotate: bool| -> Vec<Mat> {
        (0..heads)
            .map(|h| {
                let mut head = m.slice_cols(h * d, (h + 1) * d);
                if rotate {
                    for t in 0..head.rows() {
                        rope_in_place(head.row_mut(t), start + t, cfg.rope_base);
                    }
                }
                head
            })
            .collect()
    };
    let q = split(&matmul(x, &params.w_q)?, cfg.n_query_heads, true);
    let k = split(&matmul(x, &params.w_k)?, cfg.n_kv_heads, true);
    let v = split(&matmul(x, &params.w_v)?, cfg.n_kv_heads, false);
    let heads = attention(&q, &k, &v, mask)?;
    let mut joined = Mat::zeros(x.rows(), cfg.n_query_heads * d);
    for t in 0..x.rows() {
        let row = joined.row_mut(t);
        for (h, oh) in heads.iter().enumerate() {
            row[h * d..(h + 1) * d].copy_from_slice(oh.row(t));
        }
    }
    matmul(&joined, &params.w_o)
}

/// Project one normalized token into rotated `q` (`heads × d`), rotated `k`
/// and `v` (`kv_heads × d`).
fn attention_token_qkv(x: &[f64], p: &AttnParams, cfg: &AttnConfig, pos: usize) -> Result<(Mat, Mat, Mat)> {
    let d = cfg.head_dim;
    let mut q = vec_mat(x, &p.w_q);
    let mut k = vec_mat(x, &p.w_k);
    let v = vec_mat(x, &p.w_v);
    q.chunks_exact_mut(d).for_each(|h| rope_in_place(h, pos, cfg.rope_base));
    k.chunks_exact_mut(d).for_each(|h| rope_in_place(h, pos, cfg.rope_base));
    Ok((
        Mat::from_vec(cfg.n_query_heads, d, q)?,
        Mat::from_vec(cfg.n_kv_heads, d, k)?,
        Mat::from_vec(cfg.n_kv_heads, d, v)?,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w_gate: Mat,
    pub w_up: Mat,
    pub w_down: Mat,
}

impl MlpParams {
    pub fn random(hidden: usize, inner: usize, rng: &mut Rng, scale: f64) -> Self {
        let mut m = |r, c| Mat::random_uniform(rng, r, c, -scale, scale);
        Self {
            w_gate: m(hidden, inner),
            w_up: m(hidden, inner),
            w_down: m(inner, hidden),
        }
    }

    /// `down(silu(x·gate) ⊙ (x·up))`
    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec_mat(x, &self.w_gate);
        silu_in_place(&mut g);
        let u = vec_mat(x, &self.w_up);
        g.iter_mut().zip(u).for_each(|(a, b)| *a *= b);
        vec_mat(&g, &self.w_down)
    }

    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let g = matmul(x, &self.w_gate)?.map(silu_scalar);
        let u = matmul(x, &self.w_up)?;
        matmul(&g.hadamard(&u)?, &self.w_down)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    Attention { params: AttnParams, mask: AttnSpan },
    Gdn(GdnParams),
}

/// Attention reach of an attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnSpan {
    Window(usize),
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub mixer_norm: Vec<f64>,
    pub mixer: Mixer,
    pub mlp_norm: Vec<f64>,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    /// `vocab × hidden`
    pub embed: Mat,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f64>,
    /// `hidden × vocab`, untied from `embed`
    pub head: Mat,
}

/// Deterministic initialization. Each layer draws from its own stream keyed
/// by layer index and kind, so a layer's weights do not depend on the rest of
/// the pattern.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<(ModelParams, Vec<LayerKind>)> {
    cfg.validate()?;
    let root = Rng::new(seed);
    let s = cfg.init_scale;
    let h = cfg.hidden;
    let attn = cfg.attn_config();
    let pattern = cfg.layer_pattern();
    let layers = pattern
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let kind_tag = match kind {
                LayerKind::Gdn => 1,
                _ => 0,
            };
            let mut mixer_rng = root.fork(1000 + 2 * i as u64 + kind_tag);
            let mut mlp_rng = root.fork(100_000 + i as u64);
            let mixer = match kind {
                LayerKind::Gdn => Mixer::Gdn(GdnParams::random(cfg.gdn, h, &mut mixer_rng, s)),
                LayerKind::Swa => Mixer::Attention {
                    params: AttnParams::random(&attn, h, &mut mixer_rng, s),
                    mask: AttnSpan::Window(cfg.window),
                },
                LayerKind::FullAttention => Mixer::Attention {
                    params: AttnParams::random(&attn, h, &mut mixer_rng, s),
                    mask: AttnSpan::Full,
                },
            };
            Layer {
                kind,
                mixer_norm: vec![1.0; h],
                mixer,
                mlp_norm: vec![1.0; h],
                mlp: MlpParams::random(h, cfg.mlp_hidden, &mut mlp_rng, s),
            }
        })
        .collect();
    let params = ModelParams {
        cfg: cfg.clone(),
        embed: Mat::random_uniform(&mut root.fork(1), cfg.vocab, h, -s, s),
        layers,
        final_norm: vec![1.0; h],
        head: Mat::random_uniform(&mut root.fork(2), h, cfg.vocab, -s, s),
    };
    Ok((params, pattern))
}

impl ModelParams {
    /// Copy with every windowed attention layer widened to full causal attention.
    pub fn with_full_attention(&self) -> ModelParams {
        let mut p = self.clone();
        for l in &mut p.layers {
            if let Mixer::Attention { mask, .. } = &mut l.mixer {
                *mask = AttnSpan::Full;
            }
        }
        p
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocab {}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }
}

/// Logits for every position (`L × vocab`).
pub fn forward_sequence(params: &ModelParams, tokens: &[usize]) -> Result<Mat> {
    params.check_tokens(tokens)?;
    let cfg = &params.cfg;
    let attn = cfg.attn_config();
    let mut x = Mat::zeros(tokens.len(), cfg.hidden);
    for (t, &id) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(params.embed.row(id));
    }
    for layer in &params.layers {
        let n = rms_norm(&x, &layer.mixer_norm)?;
        let mixed = match &layer.mixer {
            Mixer::Attention { params: p, mask } => {
                let m = match mask {
                    AttnSpan::Window(w) => Mask::Window(*w),
                    AttnSpan::Full => Mask::Causal,
                };
                attention_mixer_sequence(&n, p, &attn, m, 0)?
            }
            Mixer::Gdn(p) => gdn_cell_sequence(&n, p, &mut DeltaState::new(&p.cfg))?,
        };
        x = x.add(&mixed)?;
        let n = rms_norm(&x, &layer.mlp_norm)?;
        x = x.add(&layer.mlp.forward(&n)?)?;
    }
    matmul(&rms_norm(&x, &params.final_norm)?, &params.head)
}

#[derive(Debug, Clone)]
pub enum LayerState {
    Swa(SwaCache),
    Full(FullKvCache),
    Gdn(DeltaState),
}

impl LayerState {
    pub fn state_bytes(&self) -> usize {
        match self {
            LayerState::Swa(c) => c.state_bytes(),
            LayerState::Full(c) => c.state_bytes(),
            LayerState::Gdn(s) => s.state_bytes(),
        }
    }
}

/// Per-layer recurrent state for token-by-token inference.
#[derive(Debug, Clone)]
pub struct StreamSession {
    cfg: ModelConfig,
    layers: Vec<LayerState>,
    gdn_info: Vec<Option<GdnStepInfo>>,
    step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StateBytes {
    pub per_layer: Vec<usize>,
    pub total: usize,
}

impl StreamSession {
    pub fn new(params: &ModelParams) -> Self {
        let attn = params.cfg.attn_config();
        let layers: Vec<LayerState> = params
            .layers
            .iter()
            .map(|l| match &l.mixer {
                Mixer::Attention { mask: AttnSpan::Window(w), .. } => {
                    LayerState::Swa(SwaCache::new(AttnConfig { window: *w, ..attn }))
                }
                Mixer::Attention { mask: AttnSpan::Full, .. } => LayerState::Full(FullKvCache::new(attn)),
                Mixer::Gdn(p) => LayerState::Gdn(DeltaState::new(&p.cfg)),
            })
            .collect();
        Self {
            cfg: params.cfg.clone(),
            gdn_info: vec![None; layers.len()],
            layers,
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[LayerState] {
        &self.layers
    }

    pub fn state_bytes(&self) -> StateBytes {
        let per_layer: Vec<usize> = self.layers.iter().map(LayerState::state_bytes).collect();
        StateBytes {
            total: per_layer.iter().sum(),
            per_layer,
        }
    }

    /// Frobenius norm of each GDN layer's memory, in layer order.
    pub fn memory_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerState::Gdn(s) => Some(s.memory_norm()),
                _ => None,
            })
            .collect()
    }

    /// Gates and value norms written by each GDN layer on the last step.
    pub fn last_gdn_info(&self) -> Vec<&GdnStepInfo> {
        self.gdn_info.iter().flatten().collect()
    }
}

pub fn state_bytes(session: &StreamSession) -> StateBytes {
    session.state_bytes()
}

/// Advance every layer by one token and return its logits.
pub fn stream_step(params: &ModelParams, session: &mut StreamSession, token: usize) -> Result<Vec<f64>> {
    if session.cfg != params.cfg || session.layers.len() != params.layers.len() {
        return Err(Error::Session("session was built for a different model config".into()));
    }
    params.check_tokens(&[token])?;
    let attn = params.cfg.attn_config();
    let pos = session.step;
    let mut x = params.embed.row(token).to_vec();
    for (i, (layer, state)) in params.layers.iter().zip(&mut session.layers).enumerate() {
        let n = rms_norm_vec(&x, &layer.mixer_norm);
        let mixed = match (&layer.mixer, state) {
            (Mixer::Attention { params: p, .. }, LayerState::Swa(cache)) => {
                let (q, k, v) = attention_token_qkv(&n, p, &attn, pos)?;
                vec_mat(cache.step(&q, &k, &v)?.data(), &p.w_o)
            }
            (Mixer::Attention { params: p, .. }, LayerState::Full(cache)) => {
                let (q, k, v) = attention_token_qkv(&n, p, &attn, pos)?;
                vec_mat(cache.step(&q, &k, &v)?.data(), &p.w_o)
            }
            (Mixer::Gdn(p), LayerState::Gdn(s)) => {
                let (y, info) = gdn_cell_forward(&n, p, s)?;
                session.gdn_info[i] = Some(info);
                y
            }
            _ => return Err(shape_err("stream_step", format!("layer {i} state does not match its mixer"))),
        };
        x.iter_mut().zip(&mixed).for_each(|(a, b)| *a += b);
        let n = rms_norm_vec(&x, &layer.mlp_norm);
        let m = layer.mlp.forward_vec(&n);
        x.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
    }
    session.step += 1;
    Ok(vec_mat(&rms_norm_vec(&x, &params.final_norm), &params.head))
}

/// Shapes of a config computed without allocating any weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeReport {
    pub hidden: usize,
    pub n_blocks: usize,
    pub layers_per_block: usize,
    pub hybrid_ratio: String,
    pub block_pattern: Vec<Vec<LayerKind>>,
    pub n_swa_layers: usize,
    pub n_gdn_layers: usize,
    pub n_full_layers: usize,
    pub swa_query_heads: usize,
    pub swa_kv_heads: usize,
    pub swa_head_dim: usize,
    pub window: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    /// heads × d_k × d_v
    pub gdn_state_shape: [usize; 3],
    pub gdn_state_bytes_per_layer: usize,
    pub swa_cache_bytes_per_layer_full: usize,
    pub param_count: usize,
    pub logits_shape: [usize; 2],
}

pub fn shape_report(cfg: &ModelConfig, seq_len: usize) -> Result<ShapeReport> {
    cfg.validate()?;
    let pattern = cfg.layer_pattern();
    let count = |k| pattern.iter().filter(|&&p| p == k).count();
    Ok(ShapeReport {
        hidden: cfg.hidden,
        n_blocks: cfg.n_blocks,
        layers_per_block: cfg.layers_per_block,
        hybrid_ratio: cfg.hybrid_ratio.to_string(),
        block_pattern: pattern.chunks(cfg.layers_per_block).map(<[_]>::to_vec).collect(),
        n_swa_layers: count(LayerKind::Swa),
        n_gdn_layers: count(LayerKind::Gdn),
        n_full_layers: count(LayerKind::FullAttention),
        swa_query_heads: cfg.n_query_heads,
        swa_kv_heads: cfg.n_kv_heads,
        swa_head_dim: cfg.head_dim,
        window: cfg.window,
        mlp_hidden: cfg.mlp_hidden,
        vocab: cfg.vocab,
        gdn_state_shape: [cfg.gdn.n_heads, cfg.gdn.d_k, cfg.gdn.d_v],
        gdn_state_bytes_per_layer: cfg.gdn.state_bytes(),
        swa_cache_bytes_per_layer_full: cfg.window * cfg.attn_config().kv_bytes_per_token(),
        param_count: cfg.param_count(),
        logits_shape: [seq_len, cfg.vocab],
    })
}
