//! Distillation and fine-tuning objectives, their input gradients, and the
//! same-input layer alignment harness.
//!
//! - layerwise MSE: `Σ_hidden (h_student − h_teacher)²`, averaged over tokens
//! - logit KL: `(1/T) Σ_t KL(softmax(z_teacher) ‖ softmax(z_student))`
//! - SFT cross-entropy: `(1/T) Σ_t CE(q_t, softmax(z_student))`
//!
//! No temperature is applied to logits.

use std::io::Write;

use serde::Serialize;

use crate::attention::{AttnConfig, Mask};
use crate::deltanet::{gdn_cell_sequence, DeltaState, GdnConfig, GdnParams};
use crate::error::{shape_err, Error, Result};
use crate::math::{log_sum_exp, rms_norm, Mat, Rng};
use crate::model::{attention_mixer_sequence, AttnParams, MlpParams};

fn same_shape(op: &'static str, a: &Mat, b: &Mat) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Squared L2 distance summed over hidden, mean over tokens.
pub fn layerwise_mse(student: &Mat, teacher: &Mat) -> Result<f64> {
    layerwise_mse_batch(std::slice::from_ref(student), std::slice::from_ref(teacher))
}

/// [`layerwise_mse`] over a batch of sequences: mean over every token of every sequence.
pub fn layerwise_mse_batch(student: &[Mat], teacher: &[Mat]) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(shape_err("layerwise_mse", "batch sizes differ"));
    }
    let mut sum = 0.0;
    let mut tokens = 0;
    for (s, t) in student.iter().zip(teacher) {
        same_shape("layerwise_mse", s, t)?;
        sum += s
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        tokens += s.rows();
    }
    Ok(if tokens == 0 { 0.0 } else { sum / tokens as f64 })
}

/// ∂ layerwise_mse / ∂ student = `2 (s − t) / L`.
pub fn layerwise_mse_grad(student: &Mat, teacher: &Mat) -> Result<Mat> {
    same_shape("layerwise_mse_grad", student, teacher)?;
    let scale = 2.0 / student.rows().max(1) as f64;
    Ok(student.sub(teacher)?.scale(scale))
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|z| z - lse).collect()
}

/// Mean token-level `KL(softmax(teacher) ‖ softmax(student))`.
pub fn logit_kl(teacher: &Mat, student: &Mat) -> Result<f64> {
    same_shape("logit_kl", teacher, student)?;
    let t_len = teacher.rows();
    if t_len == 0 {
        return Ok(0.0);
    }
    let total: f64 = teacher
        .iter_rows()
        .zip(student.iter_rows())
        .map(|(zt, zs)| {
            let lt = log_softmax(zt);
            let ls = log_softmax(zs);
            lt.iter()
                .zip(&ls)
                .map(|(a, b)| if a.is_finite() { a.exp() * (a - b) } else { 0.0 })
                .sum::<f64>()
        })
        .sum();
    Ok(total / t_len as f64)
}

/// ∂ logit_kl / ∂ student logits = `(softmax(z_s) − softmax(z_t)) / T`.
pub fn logit_kl_grad(teacher: &Mat, student: &Mat) -> Result<Mat> {
    same_shape("logit_kl_grad", teacher, student)?;
    let scale = 1.0 / teacher.rows().max(1) as f64;
    let pt = crate::math::softmax_rows(teacher);
    let ps = crate::math::softmax_rows(student);
    Ok(ps.sub(&pt)?.scale(scale))
}

/// Per-token target distributions over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution(Mat);

impl TokenDistribution {
    const TOL: f64 = 1e-9;

    pub fn new(probs: Mat) -> Result<Self> {
        for (t, row) in probs.iter_rows().enumerate() {
            if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                return Err(Error::Input(format!("target row {t} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > Self::TOL {
                return Err(Error::Input(format!("target row {t} sums to {s}")));
            }
        }
        Ok(Self(probs))
    }

    pub fn one_hot(ids: &[usize], vocab: usize) -> Result<Self> {
        let mut m = Mat::zeros(ids.len(), vocab);
        for (t, &id) in ids.iter().enumerate() {
            if id >= vocab {
                return Err(Error::Input(format!("target id {id} >= vocab {vocab}")));
            }
            m.set(t, id, 1.0);
        }
        Ok(Self(m))
    }

    pub fn probs(&self) -> &Mat {
        &self.0
    }

    /// Mean per-token entropy.
    pub fn entropy(&self) -> f64 {
        let t = self.0.rows().max(1) as f64;
        self.0
            .iter_rows()
            .map(|r| r.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / t
    }
}

/// Mean token-level cross-entropy of student predictions against targets.
pub fn sft_ce(targets: &TokenDistribution, student: &Mat) -> Result<f64> {
    same_shape("sft_ce", targets.probs(), student)?;
    let t_len = student.rows();
    if t_len == 0 {
        return Ok(0.0);
    }
    let total: f64 = targets
        .probs()
        .iter_rows()
        .zip(student.iter_rows())
        .map(|(q, z)| {
            let ls = log_softmax(z);
            q.iter()
                .zip(&ls)
                .filter(|(&p, _)| p > 0.0)
                .map(|(p, l)| -p * l)
                .sum::<f64>()
        })
        .sum();
    Ok(total / t_len as f64)
}

/// ∂ sft_ce / ∂ student logits = `(softmax(z) − q) / T` for normalized `q`.
pub fn sft_ce_grad(targets: &TokenDistribution, student: &Mat) -> Result<Mat> {
    same_shape("sft_ce_grad", targets.probs(), student)?;
    let scale = 1.0 / student.rows().max(1) as f64;
    Ok(crate::math::softmax_rows(student)
        .sub(targets.probs())?
        .scale(scale))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Kl,
    Ce,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Mse, LossKind::Kl, LossKind::Ce];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Kl => "kl",
            LossKind::Ce => "ce",
        }
    }
}

/// Relative error with a floor on the denominator so that components whose
/// true gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor used by all gradient checks.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference(x: &Mat, h: f64, f: impl Fn(&Mat) -> f64) -> Mat {
    let mut g = Mat::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.data().len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    g
}

/// Max relative error of the analytic input gradient vs central differences
/// (h = 1e-5) on a random micro instance.
pub fn loss_grad_check(kind: LossKind, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (analytic, numeric) = match kind {
        LossKind::Mse => {
            let s = Mat::random_uniform(&mut rng, 3, 4, -1.0, 1.0);
            let t = Mat::random_uniform(&mut rng, 3, 4, -1.0, 1.0);
            let fd = finite_difference(&s, FD_STEP, |x| layerwise_mse(x, &t).unwrap_or(f64::NAN));
            (layerwise_mse_grad(&s, &t)?, fd)
        }
        LossKind::Kl => {
            let zt = Mat::random_uniform(&mut rng, 3, 5, -3.0, 3.0);
            let zs = Mat::random_uniform(&mut rng, 3, 5, -3.0, 3.0);
            let fd = finite_difference(&zs, FD_STEP, |x| logit_kl(&zt, x).unwrap_or(f64::NAN));
            (logit_kl_grad(&zt, &zs)?, fd)
        }
        LossKind::Ce => {
            let ids: Vec<usize> = (0..3).map(|_| rng.index(5)).collect();
            let q = TokenDistribution::one_hot(&ids, 5)?;
            let zs = Mat::random_uniform(&mut rng, 3, 5, -3.0, 3.0);
            let fd = finite_difference(&zs, FD_STEP, |x| sft_ce(&q, x).unwrap_or(f64::NAN));
            (sft_ce_grad(&q, &zs)?, fd)
        }
    };
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n, GRAD_CHECK_FLOOR))
        .fold(0.0, f64::max))
}

/// One frozen full-attention decoder layer of the synthetic teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLayer {
    pub attn_cfg: AttnConfig,
    pub mixer_norm: Vec<f64>,
    pub attn: AttnParams,
    pub mlp_norm: Vec<f64>,
    pub mlp: MlpParams,
}

impl TeacherLayer {
    pub fn random(attn_cfg: AttnConfig, hidden: usize, mlp_hidden: usize, rng: &mut Rng, scale: f64) -> Self {
        Self {
            attn_cfg,
            mixer_norm: vec![1.0; hidden],
            attn: AttnParams::random(&attn_cfg, hidden, rng, scale),
            mlp_norm: vec![1.0; hidden],
            mlp: MlpParams::random(hidden, mlp_hidden, rng, scale),
        }
    }

    pub fn hidden(&self) -> usize {
        self.mixer_norm.len()
    }

    /// The attention output that a student mixer is trained to reproduce.
    pub fn mixer_output(&self, x: &Mat) -> Result<Mat> {
        let n = rms_norm(x, &self.mixer_norm)?;
        attention_mixer_sequence(&n, &self.attn, &self.attn_cfg, Mask::Causal, 0)
    }

    /// Full layer (mixer + MLP with residuals): the next layer's shared input.
    pub fn forward(&self, x: &Mat) -> Result<Mat> {
        let h = x.add(&self.mixer_output(x)?)?;
        let n = rms_norm(&h, &self.mlp_norm)?;
        h.add(&self.mlp.forward(&n)?)
    }
}

/// A student replacement for one teacher attention mixer. It reuses the
/// teacher layer's input norm.
#[derive(Debug, Clone, PartialEq)]
pub enum StudentMixer {
    Gdn(GdnParams),
    /// Exact copy of a teacher attention mixer (harness sanity check).
    Attention(AttnParams),
}

impl StudentMixer {
    pub fn zero_gdn(cfg: GdnConfig, hidden: usize) -> Self {
        StudentMixer::Gdn(GdnParams::zeros(cfg, hidden))
    }

    fn hidden(&self) -> usize {
        match self {
            StudentMixer::Gdn(p) => p.hidden(),
            StudentMixer::Attention(p) => p.w_q.rows(),
        }
    }

    fn forward(&self, teacher: &TeacherLayer, x: &Mat) -> Result<Mat> {
        let n = rms_norm(x, &teacher.mixer_norm)?;
        match self {
            StudentMixer::Gdn(p) => gdn_cell_sequence(&n, p, &mut DeltaState::new(&p.cfg)),
            StudentMixer::Attention(p) => {
                attention_mixer_sequence(&n, p, &teacher.attn_cfg, Mask::Causal, 0)
            }
        }
    }
}

/// One CSV row of an alignment run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignRecord {
    pub layer_index: usize,
    pub loss: f64,
    pub teacher_out_norm: f64,
    pub student_out_norm: f64,
}

/// Where a student layer's input came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum InputSource {
    /// The stack's input sequences (layer 0).
    StackInput,
    /// Output of teacher layer `i`.
    TeacherOutput(usize),
    /// Output of student layer `i`; the harness never produces this.
    StudentOutput(usize),
}

fn batch_norm(xs: &[Mat]) -> f64 {
    xs.iter()
        .map(|m| m.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Feed the same batch of shared inputs to a teacher layer's attention mixer
/// and a student mixer; return their layerwise MSE.
pub fn align_layer(
    teacher: &TeacherLayer,
    student: &StudentMixer,
    shared: &[Mat],
    layer_index: usize,
) -> Result<AlignRecord> {
    if student.hidden() != teacher.hidden() {
        return Err(shape_err(
            "align_layer",
            format!("student hidden {} vs teacher hidden {}", student.hidden(), teacher.hidden()),
        ));
    }
    let teacher_out = shared
        .iter()
        .map(|x| teacher.mixer_output(x))
        .collect::<Result<Vec<_>>>()?;
    let student_out = shared
        .iter()
        .map(|x| student.forward(teacher, x))
        .collect::<Result<Vec<_>>>()?;
    Ok(AlignRecord {
        layer_index,
        loss: layerwise_mse_batch(&student_out, &teacher_out)?,
        teacher_out_norm: batch_norm(&teacher_out),
        student_out_norm: batch_norm(&student_out),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRun {
    pub records: Vec<AlignRecord>,
    /// Input consumed by each student layer.
    pub sources: Vec<InputSource>,
}

/// Align a whole stack: student layer `i` always consumes teacher layer
/// `i − 1`'s output, never a student's.
pub fn align_stack(teacher: &[TeacherLayer], students: &[StudentMixer], inputs: &[Mat]) -> Result<AlignmentRun> {
    if teacher.len() != students.len() {
        return Err(shape_err(
            "align_stack",
            format!("{} teacher layers vs {} students", teacher.len(), students.len()),
        ));
    }
    let mut shared = inputs.to_vec();
    let mut source = InputSource::StackInput;
    let mut run = AlignmentRun {
        records: Vec::with_capacity(teacher.len()),
        sources: Vec::with_capacity(teacher.len()),
    };
    for (i, (t, s)) in teacher.iter().zip(students).enumerate() {
        run.records.push(align_layer(t, s, &shared, i)?);
        run.sources.push(source);
        shared = shared.iter().map(|x| t.forward(x)).collect::<Result<Vec<_>>>()?;
        source = InputSource::TeacherOutput(i);
    }
    Ok(run)
}

pub fn write_align_csv<W: Write>(out: W, records: &[AlignRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
